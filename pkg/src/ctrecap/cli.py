"""Command-line front end: simulate, fit, decode, bias-study.

Every run writes exactly one manifest.json next to its outputs recording the
command, seed, config digests, and output paths, so published numbers can be
re-derived.  Stochastic commands refuse to run without an explicit --seed.

Exit codes: 0 success, 2 input/validation/configuration error, 3 fit did not
converge (the report is still written), 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .data import (
    FormatError,
    ValidationError,
    parse_encounter_data,
    summarize,
    write_encounter_data,
)
from .decode import decode, decode_by_enumeration
from .inference import (
    CovarianceUnavailableError,
    FitOptions,
    FitResult,
    InitError,
    fit,
    interval_sweep,
    mc_intensity_bands,
    wald_intervals,
)
from .model import ModelSpec, ParamVector, natural_parameters, params_from_natural
from .simulate import SimConfig, simulate_dataset

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3


class CliError(Exception):
    """Input or configuration problem; maps to exit code 2."""


# -- plumbing -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, inputs: list[Path],
                    outputs: list[Path], seed, wall_time: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "arguments": {k: str(v) for k, v in args.items() if v is not None},
        "seed": seed,
        "code_version": __version__,
        "input_digests": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": wall_time,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}")
    except tomllib.TOMLDecodeError as err:
        raise CliError(f"{path}: {err}")


def _require_seed(args) -> int:
    if args.seed is None:
        raise CliError("this command is stochastic; pass an explicit --seed")
    return args.seed


def _model_spec_from_config(config: dict, study_span: float, l_override=None) -> ModelSpec:
    section = config.get("model", config)
    try:
        spec = ModelSpec(
            n_states=int(section["states"]),
            study_span=float(study_span),
            partition_length=float(l_override if l_override is not None
                                   else section.get("partition_length", 30.0)),
            period=float(section.get("period", 365.0)),
            seasonal=bool(section.get("seasonal", True)),
            covariate=section.get("covariate"),
            covariate_on_mortality=bool(section.get("covariate_on_mortality", False)),
            per_state_death=bool(section.get("per_state_death", False)),
            intercept_offset=float(section.get("intercept_offset", 0.0)),
        )
    except KeyError as err:
        raise CliError(f"model config is missing {err}")
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid model config: {err}")
    return spec


def _initial_params(config: dict, spec: ModelSpec):
    init_section = config.get("init")
    if not init_section:
        return None
    try:
        return params_from_natural(spec, init_section)
    except (KeyError, ValueError) as err:
        raise CliError(f"invalid [init] section: {err}")


def _read_data(data_dir: Path, delimiter: str):
    histories = data_dir / "histories.csv"
    effort = data_dir / "effort.csv"
    for path in (histories, effort):
        if not path.exists():
            raise CliError(f"missing input file: {path}")
    return parse_encounter_data(histories, effort, delimiter=delimiter), [histories, effort]


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    config_path = Path(args.config)
    raw = _load_toml(config_path)
    section = raw.get("simulation", raw)
    flat = dict(section)
    flat.setdefault("transition_coefs", section.get("transition_coefficients", {}))
    flat.pop("transition_coefficients", None)
    try:
        config = SimConfig.from_dict(flat, seed=seed)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid simulation config: {err}")
    t0 = time.perf_counter()
    result = simulate_dataset(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    histories = out_dir / "histories.csv"
    effort = out_dir / "effort.csv"
    truth = out_dir / "truth.json"
    write_encounter_data(result.data, histories, effort, delimiter=args.delimiter)
    truth.write_text(json.dumps(result.truth_record(), indent=2, sort_keys=True) + "\n")
    stats = summarize(result.data)
    _write_manifest(
        out_dir,
        "simulate",
        vars(args),
        [config_path],
        [histories, effort, truth],
        seed,
        time.perf_counter() - t0,
        extra={
            "realized_individuals": stats.n_individuals,
            "realized_occasions": stats.n_occasions,
        },
    )
    print(
        f"simulated {stats.n_individuals} detected individuals "
        f"({config.n_individuals} simulated) over {stats.n_occasions} occasions"
    )
    return EXIT_OK


# -- fit ------------------------------------------------------------------------


def _fit_report(result: FitResult, seed) -> dict:
    intervals = None
    if result.covariance is not None:
        intervals = {
            w.name: ([w.lower, w.upper] if w.ok else None)
            for w in wald_intervals(result).values()
        }
    return {
        "model": result.spec.to_dict(),
        "partition_length": result.l_used,
        "loglik": result.loglik,
        "aic": result.aic,
        "converged": result.converged,
        "iterations": result.iterations,
        "n_evals": result.n_evals,
        "wall_time_s": result.wall_time,
        "seed": seed,
        "estimates_working": result.params.as_dict(),
        "estimates_natural": result.natural_estimates(),
        "wald_intervals": intervals,
        "covariance": None if result.covariance is None else result.covariance.tolist(),
        "covariance_positive_definite": result.covariance_positive_definite,
        "singular_hessian": result.singular_hessian,
        "message": result.message,
    }


def cmd_fit(args) -> int:
    seed = _require_seed(args)
    data_dir = Path(args.data)
    data, inputs = _read_data(data_dir, args.delimiter)
    model_path = Path(args.model)
    config = _load_toml(model_path)
    spec = _model_spec_from_config(config, data.grid.span, l_override=args.l)
    init = _initial_params(config, spec)
    options = FitOptions(n_starts=args.starts, seed=seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs = []
    if args.sweep:
        lengths = [float(x) for x in args.sweep.split(",") if x.strip()]
        sweep = interval_sweep(spec, data, lengths, init=init, options=options)
        sweep_path = out_dir / "sweep.csv"
        _write_sweep_csv(sweep, sweep_path)
        outputs.append(sweep_path)
        best = [r for r in sweep.rows if r.error is None]
        converged = bool(best) and all(r.converged for r in best)
        report = {
            "model": spec.to_dict(),
            "seed": seed,
            "sweep": [
                {
                    "partition_length": r.partition_length,
                    "loglik": r.loglik,
                    "wall_time_s": r.wall_time,
                    "converged": r.converged,
                    "estimates_natural": r.natural,
                    "error": r.error,
                }
                for r in sweep.rows
            ],
        }
    else:
        result = fit(spec, data, init=init, options=options)
        converged = result.converged
        report = _fit_report(result, seed)
    report_path = out_dir / "fit.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    outputs.append(report_path)
    _write_manifest(
        out_dir, "fit", vars(args), inputs + [model_path], outputs, seed,
        time.perf_counter() - t0,
    )
    if not converged:
        print("fit did not converge; report written anyway", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    print(f"wrote {report_path}")
    return EXIT_OK


def _write_sweep_csv(sweep, path: Path) -> None:
    names = sorted({n for r in sweep.rows for n in r.natural})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["partition_length", "loglik", "wall_time_s", "converged"] + names)
        for r in sweep.rows:
            writer.writerow(
                [r.partition_length, repr(r.loglik), repr(r.wall_time), int(r.converged)]
                + [repr(r.natural[n]) if n in r.natural else "" for n in names]
            )


# -- decode ---------------------------------------------------------------------


def cmd_decode(args) -> int:
    data_dir = Path(args.data)
    data, inputs = _read_data(data_dir, args.delimiter)
    fit_path = Path(args.fit)
    if not fit_path.exists():
        raise CliError(f"missing fit report: {fit_path}")
    report = json.loads(fit_path.read_text())
    try:
        spec = ModelSpec.from_dict(report["model"])
        estimates = report["estimates_working"]
    except KeyError as err:
        raise CliError(f"fit report is missing {err}")
    names = spec.param_names()
    if set(estimates) != set(names):
        raise CliError(
            f"fit report has {len(estimates)} parameters but the model implies "
            f"{len(names)}; wrong model/fit pairing?"
        )
    params = ParamVector(np.array([estimates[n] for n in names]), names)
    if args.draws and args.seed is None:
        raise CliError("Monte-Carlo bands are stochastic; pass an explicit --seed")
    t0 = time.perf_counter()
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    decoder = decode_by_enumeration if args.oracle else decode
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["id", "time", "viterbi_state"]
            + [f"p_state_{k}" for k in range(1, spec.n_states + 2)]
        )
        for history in data.histories:
            path = decoder(spec, params, data.grid, history)
            for i, u in enumerate(range(history.first_capture, data.grid.n_occasions)):
                writer.writerow(
                    [history.individual_id, repr(float(data.grid.times[u])), int(path.states[i])]
                    + [repr(float(p)) for p in path.posterior[i]]
                )
    outputs = [out_path]
    if args.plot_data:
        curves_path = Path(args.plot_data)
        fit_result = _fit_result_from_report(report, spec, params)
        days = np.arange(0.0, float(spec.period))
        try:
            bands = mc_intensity_bands(
                fit_result, days, draws=args.draws, seed=args.seed or 0
            )
        except CovarianceUnavailableError as err:
            raise CliError(str(err))
        with open(curves_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["day", "transition", "covariate_level", "plug_in", "lower", "upper"])
            for (j, k, level), entry in bands.curves.items():
                for i, day in enumerate(bands.days):
                    writer.writerow(
                        [
                            day,
                            f"{j}->{k}",
                            "" if level is None else int(level),
                            repr(float(entry["plug_in"][i])),
                            repr(float(entry["lower"][i])),
                            repr(float(entry["upper"][i])),
                        ]
                    )
        outputs.append(curves_path)
    _write_manifest(
        out_path.parent, "decode", vars(args), inputs + [fit_path], outputs,
        args.seed, time.perf_counter() - t0,
    )
    print(f"wrote {out_path}")
    return EXIT_OK


def _fit_result_from_report(report: dict, spec: ModelSpec, params) -> FitResult:
    cov = report.get("covariance")
    return FitResult(
        spec=spec,
        params=params,
        loglik=report.get("loglik", float("nan")),
        covariance=None if cov is None else np.asarray(cov, dtype=float),
        converged=bool(report.get("converged", False)),
        iterations=int(report.get("iterations", 0)),
        n_evals=int(report.get("n_evals", 0)),
        l_used=float(report.get("partition_length", spec.partition_length)),
        wall_time=float(report.get("wall_time_s", 0.0)),
        singular_hessian=bool(report.get("singular_hessian", False)),
        covariance_positive_definite=bool(report.get("covariance_positive_definite", False)),
        message=str(report.get("message", "")),
    )


# -- bias study -------------------------------------------------------------------


def _one_replicate(payload):
    """Simulate one dataset and fit it; runs in a worker process."""
    config_dict, rep_seed, n, l, starts = payload
    config = SimConfig.from_dict({**config_dict, "n_individuals": n}, seed=rep_seed)
    sim = simulate_dataset(config)
    spec = config.model_spec(partition_length=l)
    try:
        result = fit(
            spec,
            sim.data,
            options=FitOptions(n_starts=starts, seed=rep_seed, compute_covariance=False),
        )
        natural = result.natural_estimates()
        return {
            "ok": result.converged,
            "n": n,
            "seed": rep_seed,
            "estimates": natural,
            "loglik": result.loglik,
        }
    except Exception as err:
        return {"ok": False, "n": n, "seed": rep_seed, "error": f"{type(err).__name__}: {err}"}


def cmd_bias_study(args) -> int:
    seed = _require_seed(args)
    config_path = Path(args.config)
    raw = _load_toml(config_path)
    section = raw.get("simulation", raw)
    flat = dict(section)
    flat.setdefault("transition_coefs", section.get("transition_coefficients", {}))
    flat.pop("transition_coefficients", None)
    try:
        base_config = SimConfig.from_dict(flat, seed=seed)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid simulation config: {err}")
    if args.replicates < 1:
        raise CliError("--replicates must be at least 1")
    n_list = [int(x) for x in args.n.split(",") if x.strip()]
    if not n_list:
        raise CliError("--n must list at least one sample size")

    spec = base_config.model_spec(partition_length=args.l)
    truth_natural = natural_parameters(spec, base_config.true_params(spec))

    jobs = []
    for n in n_list:
        for rep in range(args.replicates):
            rep_seed = int(
                np.random.SeedSequence(seed, spawn_key=(n, rep)).generate_state(1)[0]
            )
            jobs.append((base_config.to_dict(), rep_seed, n, args.l, args.starts))

    t0 = time.perf_counter()
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            outcomes = list(pool.map(_one_replicate, jobs))
    else:
        outcomes = [_one_replicate(job) for job in jobs]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_path = out_dir / "rb_raw.csv"
    summary_path = out_dir / "rb_summary.csv"
    failures = [o for o in outcomes if not o.get("ok")]
    _write_bias_tables(outcomes, truth_natural, n_list, raw_path, summary_path)
    _write_manifest(
        out_dir,
        "bias-study",
        vars(args),
        [config_path],
        [raw_path, summary_path],
        seed,
        time.perf_counter() - t0,
        extra={
            "replicates": args.replicates,
            "sample_sizes": n_list,
            "multi_start_policy": f"{args.starts} starts (default init + perturbations)",
            "failures": len(failures),
            "failure_details": [o.get("error", "not converged") for o in failures],
        },
    )
    print(f"wrote {summary_path} ({len(failures)} failed replicates)")
    return EXIT_OK


def _write_bias_tables(outcomes, truth_natural, n_list, raw_path, summary_path):
    param_names = sorted(truth_natural)
    with open(raw_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "replicate_seed", "parameter", "truth", "estimate", "rb", "metric"])
        for o in outcomes:
            if not o.get("ok"):
                continue
            for name in param_names:
                truth = truth_natural[name]
                est = o["estimates"][name]
                if truth != 0.0:
                    writer.writerow(
                        [o["n"], o["seed"], name, repr(truth), repr(est),
                         repr((est - truth) / truth), "relative"]
                    )
                else:
                    writer.writerow(
                        [o["n"], o["seed"], name, repr(truth), repr(est),
                         repr(est - truth), "absolute"]
                    )
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "parameter", "metric", "median", "q1", "q3", "replicates"])
        for n in n_list:
            rows = [o for o in outcomes if o.get("ok") and o["n"] == n]
            for name in param_names:
                truth = truth_natural[name]
                if truth != 0.0:
                    values = [(o["estimates"][name] - truth) / truth for o in rows]
                    metric = "relative"
                else:
                    values = [o["estimates"][name] - truth for o in rows]
                    metric = "absolute"
                if values:
                    writer.writerow(
                        [n, name, metric, repr(float(np.median(values))),
                         repr(float(np.quantile(values, 0.25))),
                         repr(float(np.quantile(values, 0.75))), len(values)]
                    )
                else:
                    writer.writerow([n, name, metric, "", "", "", 0])


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrecap",
        description="Continuous-time multi-state capture-recapture modelling",
    )
    parser.add_argument("--seed", type=int, default=None, help="random seed (required for stochastic commands)")
    parser.add_argument("--threads", type=int, default=1, help="parallel workers for replicate-level work")
    parser.add_argument("--delimiter", default=",", help="CSV delimiter for data files")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate encounter data from a config file")
    p_sim.add_argument("--config", required=True, help="simulation config (TOML)")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model to encounter data")
    p_fit.add_argument("--data", required=True, help="directory with histories.csv and effort.csv")
    p_fit.add_argument("--model", required=True, help="model declaration (TOML)")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--l", type=float, default=None, help="partition interval length in days")
    p_fit.add_argument("--sweep", default=None, help="comma-separated interval lengths to sweep")
    p_fit.add_argument("--starts", type=int, default=5, help="multi-start count")
    p_fit.set_defaults(func=cmd_fit)

    p_dec = sub.add_parser("decode", help="Viterbi + state-probability decoding")
    p_dec.add_argument("--data", required=True)
    p_dec.add_argument("--fit", required=True, help="fit.json from a previous fit")
    p_dec.add_argument("--out", required=True, help="decoded CSV path")
    p_dec.add_argument("--plot-data", default=None, help="also write day-gridded intensity curves here")
    p_dec.add_argument("--draws", type=int, default=0, help="Monte-Carlo draws for the curves")
    p_dec.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p_dec.set_defaults(func=cmd_decode)

    p_bias = sub.add_parser("bias-study", help="simulate-and-refit relative-bias study")
    p_bias.add_argument("--config", required=True, help="simulation config (TOML)")
    p_bias.add_argument("--replicates", type=int, required=True)
    p_bias.add_argument("--n", required=True, help="comma-separated sample sizes")
    p_bias.add_argument("--l", type=float, default=20.0)
    p_bias.add_argument("--starts", type=int, default=5)
    p_bias.add_argument("--out", required=True)
    p_bias.set_defaults(func=cmd_bias_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (FormatError, ValidationError, InitError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as err:  # pragma: no cover - unexpected
        print(f"unexpected error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
