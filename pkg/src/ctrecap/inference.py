"""Maximum-likelihood fitting, uncertainty, and interval-length benchmarking.

The optimiser is quasi-Newton (L-BFGS-B) on the unconstrained working scale
with central finite-difference gradients; a Nelder-Mead fallback is
available.  Standard errors come from the inverse of the negative numerical
Hessian at the maximum.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .data import EncounterData
from .likelihood import total_loglik
from .model import (
    ModelSpec,
    NumericRangeError,
    ParamVector,
    check_params,
    intensity_at_time,
    inverse_logit,
    is_intercept_name,
    natural_parameters,
)

GRADIENT_STEP = 1e-6
HESSIAN_STEP = 1e-4
_PENALTY = 1e12


class InitError(ValueError):
    """The objective is not finite at the starting parameters."""


class CovarianceUnavailableError(ValueError):
    """No usable covariance matrix on this fit result."""


@dataclass(frozen=True)
class FitOptions:
    """Controls for fit(); defaults follow the package-wide conventions.

    Multi-start runs the user (or default) initial value plus
    ``n_starts - 1`` Gaussian perturbations of it (sd ``perturb_sd`` on the
    working scale, seeded by ``seed``) and keeps the best optimum.
    """

    n_starts: int = 5
    perturb_sd: float = 0.5
    seed: int = 0
    ftol_rel: float = 1e-9
    gtol: float = 1e-5
    max_iter: int = 500
    method: str = "quasi-newton"  # or "nelder-mead"
    bound: float = 40.0           # box half-width on working parameters
    compute_covariance: bool = True

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.method not in ("quasi-newton", "nelder-mead"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """A local maximiser of the joint log-likelihood and its uncertainty."""

    spec: ModelSpec
    params: ParamVector
    loglik: float
    covariance: np.ndarray | None
    converged: bool
    iterations: int
    n_evals: int
    l_used: float
    wall_time: float
    singular_hessian: bool
    covariance_positive_definite: bool
    message: str

    @property
    def mle(self) -> ParamVector:
        return self.params

    @property
    def aic(self) -> float:
        return 2.0 * len(self.params) - 2.0 * self.loglik

    def natural_estimates(self) -> dict[str, float]:
        return natural_parameters(self.spec, self.params)


def default_init(spec: ModelSpec) -> ParamVector:
    """Order-of-magnitude-neutral starting values: p = 0.5, 100-day mean
    sojourn for alive-alive transitions, 10-year mean survival, flat season."""
    values = {}
    for level in spec.covariate_levels():
        for name in spec.transition_param_names(level):
            values[name] = np.log(1.0 / 100.0) if is_intercept_name(name) else 0.0
    for name in spec.death_param_names():
        values[name] = np.log(1.0 / 3650.0) if is_intercept_name(name) else 0.0
    base = ParamVector.zeros(spec)
    working = base.values.copy()
    for name, value in values.items():
        idx = base.index(name)
        if is_intercept_name(name):
            value -= spec.intercept_offset
        working[idx] = value
    return base.with_values(working)


def _objective_factory(spec, data):
    counter = {"n": 0}

    def negloglik(x: np.ndarray) -> float:
        counter["n"] += 1
        try:
            value = total_loglik(spec, ParamVector(x, spec.param_names()), data)
        except NumericRangeError:
            return _PENALTY
        if not np.isfinite(value):
            return _PENALTY
        return -value

    return negloglik, counter


def finite_difference_gradient(f, x: np.ndarray, step: float = GRADIENT_STEP) -> np.ndarray:
    """Central differences with per-coordinate relative steps step*(1+|x_i|)."""
    grad = np.empty_like(x)
    for i in range(x.size):
        h = step * (1.0 + abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2.0 * h)
    return grad


def finite_difference_hessian(f, x: np.ndarray, step: float = HESSIAN_STEP) -> np.ndarray:
    """Central-difference Hessian with steps step*(1+|x_i|), symmetrised."""
    n = x.size
    h = step * (1.0 + np.abs(x))
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        up, dn = x.copy(), x.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        H[i, i] = (f(up) - 2.0 * f0 + f(dn)) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            pp, pm, mp, mm = x.copy(), x.copy(), x.copy(), x.copy()
            pp[[i, j]] += h[[i, j]]
            mm[[i, j]] -= h[[i, j]]
            pm[i] += h[i]
            pm[j] -= h[j]
            mp[i] -= h[i]
            mp[j] += h[j]
            H[i, j] = H[j, i] = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def _single_start(negloglik, x0, options: FitOptions):
    if options.method == "nelder-mead":
        return optimize.minimize(
            negloglik,
            x0,
            method="Nelder-Mead",
            options={
                "maxiter": options.max_iter * x0.size,
                "maxfev": options.max_iter * x0.size,
                "xatol": 1e-6,
                "fatol": options.ftol_rel * max(1.0, abs(negloglik(x0))),
                "adaptive": True,
            },
        )
    bounds = None
    if options.bound:
        bounds = [(-options.bound, options.bound)] * x0.size
    return optimize.minimize(
        negloglik,
        np.clip(x0, -options.bound, options.bound) if options.bound else x0,
        method="L-BFGS-B",
        jac=lambda x: finite_difference_gradient(negloglik, x),
        bounds=bounds,
        options={
            "maxiter": options.max_iter,
            "ftol": options.ftol_rel,
            "gtol": options.gtol,
            "maxcor": 20,
        },
    )


def fit(
    spec: ModelSpec,
    data: EncounterData,
    init: ParamVector | None = None,
    options: FitOptions = FitOptions(),
) -> FitResult:
    """Maximise the joint log-likelihood on the working scale.

    Raises InitError when the log-likelihood is not finite at the starting
    values.  A fit that hits the iteration cap is returned with
    converged=False rather than raised.
    """
    t0 = time.perf_counter()
    if data.n_individuals == 0:
        raise InitError("no encounter histories to fit")
    params0 = init if init is not None else default_init(spec)
    check_params(spec, params0)
    negloglik, counter = _objective_factory(spec, data)
    f0 = negloglik(params0.values)
    if not np.isfinite(f0) or f0 >= _PENALTY:
        raise InitError("log-likelihood is not finite at the initial values")

    rng = np.random.default_rng(options.seed)
    starts = [params0.values]
    for _ in range(options.n_starts - 1):
        starts.append(params0.values + rng.normal(0.0, options.perturb_sd, params0.values.size))

    best = None
    for x0 in starts:
        res = _single_start(negloglik, np.asarray(x0, dtype=float), options)
        if best is None or res.fun < best.fun:
            best = res

    mle = ParamVector(best.x, spec.param_names())
    covariance = None
    singular = False
    pos_def = False
    if options.compute_covariance:
        H = finite_difference_hessian(negloglik, best.x)  # Hessian of -loglik
        try:
            covariance = np.linalg.inv(H)
            covariance = 0.5 * (covariance + covariance.T)
            if not np.all(np.isfinite(covariance)):
                raise np.linalg.LinAlgError("non-finite covariance")
            eigvals = np.linalg.eigvalsh(H)
            if eigvals.min() <= 0 or eigvals.max() / eigvals.min() > 1e12:
                singular = True
            pos_def = bool(eigvals.min() > 0)
        except np.linalg.LinAlgError:
            covariance = None
            singular = True

    return FitResult(
        spec=spec,
        params=mle,
        loglik=-float(best.fun),
        covariance=covariance,
        converged=bool(best.success),
        iterations=int(getattr(best, "nit", 0)),
        n_evals=counter["n"],
        l_used=spec.partition_length,
        wall_time=time.perf_counter() - t0,
        singular_hessian=singular,
        covariance_positive_definite=pos_def,
        message=str(best.message),
    )


# -- Wald intervals -------------------------------------------------------------


@dataclass(frozen=True)
class WaldInterval:
    name: str
    estimate: float
    lower: float | None
    upper: float | None
    ok: bool


def wald_intervals(fit_result: FitResult, level: float = 0.95) -> dict[str, WaldInterval]:
    """Working-scale Wald intervals mapped to the natural scale.

    Log-scale coefficients are reported directly; detection parameters are
    transformed through the inverse logit.  Parameters whose variance is not
    available (singular covariance) are flagged and get no interval.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if fit_result.covariance is None:
        raise CovarianceUnavailableError("fit has no covariance matrix")
    z = float(stats.norm.ppf(0.5 * (1.0 + level)))
    spec = fit_result.spec
    natural = fit_result.natural_estimates()
    out: dict[str, WaldInterval] = {}
    for i, name in enumerate(fit_result.params.names):
        variance = float(fit_result.covariance[i, i])
        working = float(fit_result.params.values[i])
        if name.startswith("logit_p"):
            report_name = "p" + name[len("logit_p"):]
            transform = inverse_logit
        else:
            report_name = name
            offset = spec.intercept_offset if is_intercept_name(name) else 0.0
            transform = lambda x, off=offset: x + off
        estimate = natural[report_name]
        if variance >= 0.0 and np.isfinite(variance):
            half = z * np.sqrt(variance)
            out[report_name] = WaldInterval(
                name=report_name,
                estimate=estimate,
                lower=float(transform(working - half)),
                upper=float(transform(working + half)),
                ok=True,
            )
        else:
            out[report_name] = WaldInterval(report_name, estimate, None, None, False)
    return out


# -- Monte-Carlo intensity bands --------------------------------------------------


@dataclass(frozen=True, eq=False)
class IntensityBands:
    """Pointwise quantile bands for each transition intensity curve.

    curves maps (j, k, level) -> dict with 'plug_in', 'lower', 'upper'
    arrays over `days`; `level` is the covariate value or None.
    """

    days: np.ndarray
    draws: int
    band_level: float
    curves: dict


def _nearest_positive_definite(cov: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(cov)
    floor = max(eigvals.max(), 1.0) * 1e-12
    return (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T


def mc_intensity_bands(
    fit_result: FitResult,
    day_grid: Sequence[float],
    draws: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    repair_pd: bool = False,
) -> IntensityBands:
    """Monte-Carlo confidence bands for the seasonal intensity curves.

    Samples parameter vectors from N(mle, covariance), maps each through the
    seasonal link on `day_grid`, and returns pointwise quantiles around the
    plug-in curve.  draws = 0 returns plug-in curves only.
    """
    spec = fit_result.spec
    days = np.asarray(day_grid, dtype=float)
    if draws < 0:
        raise ValueError("draws must be non-negative")
    samples = None
    if draws:
        if fit_result.covariance is None:
            raise CovarianceUnavailableError("fit has no covariance matrix")
        cov = fit_result.covariance
        if not fit_result.covariance_positive_definite:
            if not repair_pd:
                raise CovarianceUnavailableError(
                    "covariance is not positive definite; pass repair_pd=True "
                    "to project onto the nearest positive-definite matrix"
                )
            cov = _nearest_positive_definite(cov)
        else:
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                if not repair_pd:
                    raise CovarianceUnavailableError(
                        "covariance is not positive definite; pass repair_pd=True "
                        "to project onto the nearest positive-definite matrix"
                    ) from None
                cov = _nearest_positive_definite(cov)
        rng = np.random.default_rng(seed)
        samples = rng.multivariate_normal(fit_result.params.values, cov, size=draws)

    lo_q, hi_q = 0.5 * (1.0 - level), 0.5 * (1.0 + level)
    pairs = spec.alive_pairs()
    curves: dict = {}
    for cov_level in spec.covariate_levels():
        covs = None if cov_level is None else {spec.covariate: cov_level}
        plug_q = intensity_at_time(spec, fit_result.params, days, covs)
        sampled = None
        if samples is not None:
            sampled = np.empty((draws, days.size, len(pairs)))
            for s in range(draws):
                qs = intensity_at_time(
                    spec, fit_result.params.with_values(samples[s]), days, covs
                )
                for idx, (j, k) in enumerate(pairs):
                    sampled[s, :, idx] = qs[:, j - 1, k - 1]
        for idx, (j, k) in enumerate(pairs):
            plug = plug_q[:, j - 1, k - 1]
            entry = {"plug_in": plug}
            if sampled is not None:
                entry["lower"] = np.quantile(sampled[:, :, idx], lo_q, axis=0)
                entry["upper"] = np.quantile(sampled[:, :, idx], hi_q, axis=0)
            else:
                entry["lower"] = plug.copy()
                entry["upper"] = plug.copy()
            curves[(j, k, cov_level)] = entry
    return IntensityBands(days=days, draws=draws, band_level=level, curves=curves)


# -- interval-length sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    partition_length: float
    loglik: float
    wall_time: float
    converged: bool
    natural: dict[str, float]
    error: str | None = None


@dataclass(frozen=True, eq=False)
class IntervalSweepResult:
    rows: tuple[SweepRow, ...]

    def __post_init__(self):
        lengths = [r.partition_length for r in self.rows]
        if any(b >= a for a, b in zip(lengths, lengths[1:])):
            raise ValueError("sweep rows must have strictly decreasing lengths")

    def logliks(self) -> dict[float, float]:
        return {r.partition_length: r.loglik for r in self.rows}


def interval_sweep(
    spec: ModelSpec,
    data: EncounterData,
    lengths: Sequence[float],
    init: ParamVector | None = None,
    options: FitOptions = FitOptions(),
) -> IntervalSweepResult:
    """Fit at each partition length, longest first, warm-starting each fit at
    the previous optimum.  Failures are recorded per row and the sweep
    continues."""
    lengths = sorted({float(l) for l in lengths}, reverse=True)
    if not lengths:
        raise ValueError("no interval lengths supplied")
    if any(l <= 0 for l in lengths):
        raise ValueError("interval lengths must be positive")
    rows = []
    warm = init
    run_options = options
    for l in lengths:
        spec_l = replace(spec, partition_length=l)
        t0 = time.perf_counter()
        try:
            result = fit(spec_l, data, init=warm, options=run_options)
        except Exception as err:  # keep sweeping; record the failure
            rows.append(
                SweepRow(
                    partition_length=l,
                    loglik=float("nan"),
                    wall_time=time.perf_counter() - t0,
                    converged=False,
                    natural={},
                    error=f"{type(err).__name__}: {err}",
                )
            )
            continue
        rows.append(
            SweepRow(
                partition_length=l,
                loglik=result.loglik,
                wall_time=result.wall_time,
                converged=result.converged,
                natural=result.natural_estimates(),
            )
        )
        warm = result.params
        # after the first optimum the surface barely moves; a single
        # warm start is enough for the remaining lengths
        run_options = replace(options, n_starts=1)
    return IntervalSweepResult(rows=tuple(rows))
