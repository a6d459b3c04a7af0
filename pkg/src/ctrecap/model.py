"""Mapping from working parameters and covariates to intensity matrices.

Transition rates between alive states follow a log-linear seasonal form:

    q_jk(t) = exp(a0 + a1 * sin(2*pi*t/period) + a2 * cos(2*pi*t/period))

optionally with a separate coefficient set per level of a binary individual
covariate.  Death rates are log-linear in the intercept and (optionally) the
covariate, shared across alive states unless `per_state_death` is set, and
constant over time.  For likelihood evaluation the study span is partitioned
into intervals of constant length and each rate is frozen at the interval
midpoint, so transition probability matrices factor into products of matrix
exponentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .linalg import IntensityMatrix, TransitionMatrix, expm_stack

PREDICTOR_LIMIT = 700.0


class NumericRangeError(ValueError):
    """A linear predictor left the range where exp() is representable."""


class InvalidIntervalError(ValueError):
    """A time interval [t_a, t_b] is reversed or outside the study span."""


class CovariateError(ValueError):
    """An individual's covariates do not match the model declaration."""


def is_intercept_name(name: str) -> bool:
    """True for intercept coefficients, including covariate-suffixed ones."""
    return "_intercept" in name


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def inverse_logit(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    enx = np.exp(x[~pos])
    out[~pos] = enx / (1.0 + enx)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModelSpec:
    """Declares the link structure; parameter values live in ParamVector.

    Attributes:
        n_states: number of alive states M (death state M+1 is implicit).
        study_span: last occasion time t_T in days; the partition covers
            [0, study_span].
        partition_length: length l of the piecewise-constant intervals.
        period: period of the seasonal terms in days.
        seasonal: include sin/cos terms on alive-alive transition rates.
        covariate: name of a binary individual covariate whose levels get
            separate transition coefficient sets, or None.
        covariate_on_mortality: add the covariate to the death-rate predictor.
        per_state_death: one death intercept per alive state instead of a
            shared one.
        intercept_offset: centring constant for intercepts; working
            intercepts are stored relative to it (natural = working + offset).
    """

    n_states: int
    study_span: float
    partition_length: float = 30.0
    period: float = 365.0
    seasonal: bool = True
    covariate: str | None = None
    covariate_on_mortality: bool = False
    per_state_death: bool = False
    intercept_offset: float = 0.0

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("need at least one alive state")
        if not (self.study_span > 0 and np.isfinite(self.study_span)):
            raise ValueError("study_span must be positive and finite")
        if not (self.partition_length > 0 and np.isfinite(self.partition_length)):
            raise ValueError("partition_length must be positive and finite")
        if not (self.period > 0 and np.isfinite(self.period)):
            raise ValueError("period must be positive and finite")
        if self.covariate_on_mortality and self.covariate is None:
            raise ValueError("covariate_on_mortality requires a covariate name")

    # -- partition ---------------------------------------------------------

    @property
    def n_intervals(self) -> int:
        return max(1, math.ceil(self.study_span / self.partition_length))

    def interval_bounds(self, r: int) -> tuple[float, float]:
        """Bounds [b_{r-1}, b_r) of interval r (1-based); the last interval
        is closed at study_span and may be shorter than partition_length."""
        if not 1 <= r <= self.n_intervals:
            raise ValueError(f"interval index {r} outside 1..{self.n_intervals}")
        lo = (r - 1) * self.partition_length
        hi = min(r * self.partition_length, self.study_span)
        return lo, hi

    def interval_midpoints(self) -> np.ndarray:
        edges = self.interval_edges()
        return 0.5 * (edges[:-1] + edges[1:])

    def interval_edges(self) -> np.ndarray:
        edges = self.partition_length * np.arange(self.n_intervals + 1, dtype=float)
        edges[-1] = self.study_span
        return edges

    def interval_of(self, t: float) -> int:
        """1-based index of the interval containing t; study_span maps to the
        last interval (the partition closes at b_R = t_T)."""
        if not 0 <= t <= self.study_span:
            raise InvalidIntervalError(f"time {t} outside [0, {self.study_span}]")
        return int(min(t // self.partition_length, self.n_intervals - 1)) + 1

    # -- parameter layout ---------------------------------------------------

    def alive_pairs(self) -> list[tuple[int, int]]:
        return [
            (j, k)
            for j in range(1, self.n_states + 1)
            for k in range(1, self.n_states + 1)
            if j != k
        ]

    def covariate_levels(self) -> tuple[float, ...] | tuple[None]:
        return (None,) if self.covariate is None else (0.0, 1.0)

    def _level_suffix(self, level) -> str:
        return "" if level is None else f"_{self.covariate}{int(level)}"

    def transition_param_names(self, level=None) -> list[str]:
        names = []
        suffix = self._level_suffix(level)
        for j, k in self.alive_pairs():
            names.append(f"q{j}{k}_intercept{suffix}")
            if self.seasonal:
                names.append(f"q{j}{k}_sin{suffix}")
                names.append(f"q{j}{k}_cos{suffix}")
        return names

    def death_param_names(self) -> list[str]:
        if self.per_state_death:
            names = [f"death{j}_intercept" for j in range(1, self.n_states + 1)]
        else:
            names = ["death_intercept"]
        if self.covariate_on_mortality:
            names.append(f"death_{self.covariate}")
        return names

    def detection_param_names(self) -> list[str]:
        return [f"logit_p{m}" for m in range(1, self.n_states + 1)]

    def param_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for level in self.covariate_levels():
            names.extend(self.transition_param_names(level))
        names.extend(self.death_param_names())
        names.extend(self.detection_param_names())
        return tuple(names)

    @property
    def n_params(self) -> int:
        return len(self.param_names())

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "study_span": self.study_span,
            "partition_length": self.partition_length,
            "period": self.period,
            "seasonal": self.seasonal,
            "covariate": self.covariate,
            "covariate_on_mortality": self.covariate_on_mortality,
            "per_state_death": self.per_state_death,
            "intercept_offset": self.intercept_offset,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat vector of unconstrained working parameters with a name map."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        names = tuple(self.names)
        if len(v) != len(names):
            raise ValueError(f"{len(v)} values for {len(names)} names")
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.index(name)])

    def __len__(self) -> int:
        return len(self.names)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.names)

    def updated(self, **changes: float) -> "ParamVector":
        v = self.values.copy()
        for name, value in changes.items():
            v[self.index(name)] = value
        return self.with_values(v)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        names = spec.param_names()
        return cls(np.zeros(len(names)), names)


def check_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.names != spec.param_names():
        raise ValueError("parameter vector does not match the model declaration")


# -- covariates --------------------------------------------------------------


def covariate_signature(spec: ModelSpec, covariates: Mapping[str, float] | None):
    """Hashable key identifying the covariate level an individual belongs to."""
    if spec.covariate is None:
        return ()
    if not covariates or spec.covariate not in covariates:
        raise CovariateError(f"missing covariate {spec.covariate!r}")
    value = float(covariates[spec.covariate])
    if value not in (0.0, 1.0):
        raise CovariateError(f"covariate {spec.covariate!r} must be 0 or 1, got {value}")
    return (value,)


def _level_from_signature(spec: ModelSpec, signature) -> float | None:
    return None if spec.covariate is None else signature[0]


# -- intensity construction ---------------------------------------------------


def _seasonal_design(spec: ModelSpec, tval) -> np.ndarray:
    """Design rows [1, sin, cos] (or [1]) at times `tval`, shape (len(t), k)."""
    t = np.atleast_1d(np.asarray(tval, dtype=float))
    if spec.seasonal:
        ang = 2.0 * np.pi * t / spec.period
        return np.column_stack([np.ones_like(t), np.sin(ang), np.cos(ang)])
    return np.ones((t.size, 1))


def _transition_coef_matrix(spec: ModelSpec, params: ParamVector, level) -> np.ndarray:
    """Coefficients per alive pair, shape (n_pairs, k) with the intercept
    already shifted to the natural basis."""
    k = 3 if spec.seasonal else 1
    names = spec.transition_param_names(level)
    coefs = np.array([params[n] for n in names], dtype=float).reshape(-1, k)
    coefs[:, 0] += spec.intercept_offset
    return coefs


def _death_rates(spec: ModelSpec, params: ParamVector, level) -> np.ndarray:
    """Constant death rate per alive state, shape (M,)."""
    z = 0.0 if level is None else float(level)
    extra = params[f"death_{spec.covariate}"] * z if spec.covariate_on_mortality else 0.0
    if spec.per_state_death:
        pred = np.array(
            [params[f"death{j}_intercept"] for j in range(1, spec.n_states + 1)]
        )
    else:
        pred = np.full(spec.n_states, params["death_intercept"])
    pred = pred + spec.intercept_offset + extra
    if np.any(np.abs(pred) > PREDICTOR_LIMIT):
        raise NumericRangeError("death-rate predictor exceeds +-700")
    return np.exp(pred)


def _rates_at(spec: ModelSpec, params: ParamVector, tval, level) -> np.ndarray:
    """Alive-alive transition rates at times `tval`, shape (len(t), n_pairs)."""
    design = _seasonal_design(spec, tval)
    coefs = _transition_coef_matrix(spec, params, level)
    pred = design @ coefs.T
    if np.any(np.abs(pred) > PREDICTOR_LIMIT):
        bad = np.unravel_index(int(np.argmax(np.abs(pred))), pred.shape)
        name = spec.transition_param_names(level)[bad[1] * (3 if spec.seasonal else 1)]
        raise NumericRangeError(
            f"linear predictor for the {name} block exceeds +-{PREDICTOR_LIMIT:.0f}"
        )
    return np.exp(pred)


def _assemble_generators(spec: ModelSpec, alive_rates: np.ndarray, death: np.ndarray) -> np.ndarray:
    """Stack of generators from alive-alive rates (n, n_pairs) and death rates (M,)."""
    n = alive_rates.shape[0]
    M = spec.n_states
    Q = np.zeros((n, M + 1, M + 1))
    for idx, (j, k) in enumerate(spec.alive_pairs()):
        Q[:, j - 1, k - 1] = alive_rates[:, idx]
    Q[:, :M, M] = death[None, :]
    diag = -Q.sum(axis=2)
    ii = np.arange(M + 1)
    Q[:, ii, ii] = diag[:, ii]
    return Q


def intensity_stack(
    spec: ModelSpec,
    params: ParamVector,
    covariates: Mapping[str, float] | None = None,
) -> np.ndarray:
    """Generators for all partition intervals, shape (R, M+1, M+1).

    Rates are evaluated at the interval midpoints; this is the hot path used
    by the likelihood, so entries are returned as a raw array.
    """
    check_params(spec, params)
    level = _level_from_signature(spec, covariate_signature(spec, covariates))
    rates = _rates_at(spec, params, spec.interval_midpoints(), level)
    return _assemble_generators(spec, rates, _death_rates(spec, params, level))


def intensity_at(
    spec: ModelSpec,
    params: ParamVector,
    r: int,
    covariates: Mapping[str, float] | None = None,
) -> IntensityMatrix:
    """Generator over interval r (1-based), rates frozen at the midpoint."""
    if not 1 <= r <= spec.n_intervals:
        raise ValueError(f"interval index {r} outside 1..{spec.n_intervals}")
    check_params(spec, params)
    level = _level_from_signature(spec, covariate_signature(spec, covariates))
    lo, hi = spec.interval_bounds(r)
    rates = _rates_at(spec, params, 0.5 * (lo + hi), level)
    Q = _assemble_generators(spec, rates, _death_rates(spec, params, level))
    return IntensityMatrix(Q[0])


def intensity_at_time(
    spec: ModelSpec,
    params: ParamVector,
    tval,
    covariates: Mapping[str, float] | None = None,
) -> np.ndarray:
    """Generators with seasonal terms evaluated directly at times `tval`
    (no midpoint approximation), shape (len(t), M+1, M+1)."""
    check_params(spec, params)
    level = _level_from_signature(spec, covariate_signature(spec, covariates))
    rates = _rates_at(spec, params, tval, level)
    return _assemble_generators(spec, rates, _death_rates(spec, params, level))


def detection_probs(spec: ModelSpec, params: ParamVector) -> np.ndarray:
    """Detection probability per alive state, shape (M,)."""
    return np.array(
        [inverse_logit(params[n]) for n in spec.detection_param_names()], dtype=float
    )


# -- transition probabilities over arbitrary intervals -------------------------


def _segment_cuts(spec: ModelSpec, t_a: float, t_b: float) -> np.ndarray:
    """Cut [t_a, t_b] at interior partition boundaries."""
    l = spec.partition_length
    first = math.floor(t_a / l) + 1
    last = math.ceil(t_b / l) - 1
    interior = l * np.arange(first, last + 1, dtype=float)
    interior = interior[(interior > t_a) & (interior < t_b)]
    return np.concatenate([[t_a], interior, [t_b]])


def transition_matrix_between(
    spec: ModelSpec,
    params: ParamVector,
    t_a: float,
    t_b: float,
    covariates: Mapping[str, float] | None = None,
) -> TransitionMatrix:
    """Transition probabilities from time t_a to t_b under the
    piecewise-constant approximation: a single matrix exponential when both
    times share a partition interval, otherwise the ordered product of the
    per-interval exponentials (empty interior products permitted)."""
    t_a, t_b = float(t_a), float(t_b)
    if t_b < t_a:
        raise InvalidIntervalError(f"t_b={t_b} earlier than t_a={t_a}")
    if t_a < 0 or t_b > spec.study_span * (1 + 1e-12) + 1e-9:
        raise InvalidIntervalError(
            f"[{t_a}, {t_b}] outside the study span [0, {spec.study_span}]"
        )
    if t_a == t_b:
        return TransitionMatrix(np.eye(spec.n_states + 1))
    Qs = intensity_stack(spec, params, covariates)
    cuts = _segment_cuts(spec, t_a, t_b)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    ridx = np.minimum(mids // spec.partition_length, spec.n_intervals - 1).astype(int)
    mats = expm_stack(Qs[ridx] * np.diff(cuts)[:, None, None])
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return TransitionMatrix(out)


# -- natural-scale reporting ---------------------------------------------------


def natural_parameters(spec: ModelSpec, params: ParamVector) -> dict[str, float]:
    """Parameters as reported on the natural scale: detection probabilities in
    [0, 1]; transition and death coefficients on the log-rate scale."""
    check_params(spec, params)
    out: dict[str, float] = {}
    for name, value in zip(params.names, params.values):
        if name.startswith("logit_p"):
            out["p" + name[len("logit_p"):]] = float(inverse_logit(value))
        elif is_intercept_name(name):
            out[name] = float(value) + spec.intercept_offset
        else:
            out[name] = float(value)
    return out


def params_from_natural(
    spec: ModelSpec,
    natural: Mapping[str, float],
    base: ParamVector | None = None,
) -> ParamVector:
    """Inverse of natural_parameters; unknown names raise KeyError.

    `natural` may be partial, in which case remaining entries come from
    `base` (or zero).
    """
    params = base if base is not None else ParamVector.zeros(spec)
    check_params(spec, params)
    values = params.values.copy()
    for name, value in natural.items():
        if name.startswith("p") and ("logit_" + name) in params.names:
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be inside (0, 1), got {value}")
            values[params.index("logit_" + name)] = float(logit(value))
        else:
            idx = params.index(name)
            if is_intercept_name(name):
                values[idx] = float(value) - spec.intercept_offset
            else:
                values[idx] = float(value)
    return params.with_values(values)
