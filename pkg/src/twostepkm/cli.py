"""Command-line front end.

``twostepkm estimate`` reads a CSV sample and writes a JSON report,
``twostepkm simulate`` runs the Monte Carlo study and writes a CSV, and
``twostepkm generate`` writes one simulated sample as CSV.

Settings may come from a flat TOML file (``--config``); flags override it.
A JSON report produced by ``estimate`` is also accepted as ``--config``,
in which case its embedded configuration is replayed.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapSpec, uniform_band
from .cic import CicEstimator, CicRequest
from .data import Estimand, load_csv, validate_for_estimand, write_csv
from .exceptions import EstimationError, TwoStepKMError, ValidationError
from .late import LateEstimator, LateRequest
from .propensity import PropensitySpec
from .simulation import CENSORING_LEVELS, DESIGNS, ESTIMATORS, DesignSpec, generate, run_study
from .unconfounded import UnconfoundedEstimator, UnconfoundedRequest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 2, 3

ESTIMATE_DEFAULTS = {
    "input": None,
    "estimand": None,
    "propensity": "series",
    "series_order": "auto",
    "bandwidth": None,
    "kernel": "epanechnikov",
    "trim": 0.01,
    "bootstrap_b": 0,
    "alpha": 0.05,
    "grid": "auto",
    "tau_grid": "auto",
    "seed": None,
    "threads": 1,
    "output": "-",
    "allow_defective": False,
}

SIMULATE_DEFAULTS = {
    "designs": list(DESIGNS),
    "censoring": list(CENSORING_LEVELS),
    "reps": 1000,
    "n": 1000,
    "estimators": list(ESTIMATORS),
    "seed": None,
    "threads": 1,
    "output": "-",
}

GENERATE_DEFAULTS = {"design": 1, "n": 1000, "censoring": 0.0, "seed": None, "output": "-"}

# keys whose value does not change the numbers in a report
NON_SEMANTIC = {"output", "threads"}


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _grid_arg(text: str):
    return "auto" if text.strip().lower() == "auto" else _float_list(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostepkm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate a treatment effect from a CSV sample")
    est.add_argument("--config", help="TOML settings file or a previous JSON report")
    est.add_argument("--input", help="CSV with columns q, delta, x1..xk and t/z/g/period as needed")
    est.add_argument("--estimand", type=str.lower, choices=[e.value.lower() for e in Estimand])
    est.add_argument("--propensity", choices=["logit", "series", "kernel"])
    est.add_argument("--series-order", type=int, dest="series_order", help="number of series terms")
    est.add_argument("--bandwidth", type=float)
    est.add_argument("--kernel", choices=["epanechnikov", "uniform", "biweight", "gaussian"])
    est.add_argument("--trim", type=float, help="clamp propensities to [trim, 1 - trim]")
    est.add_argument("--bootstrap-b", type=int, dest="bootstrap_b", help="bootstrap replicates; 0 disables bands")
    est.add_argument("--alpha", type=float)
    est.add_argument("--grid", type=_grid_arg, help="comma-separated outcome grid, or 'auto'")
    est.add_argument("--tau-grid", type=_grid_arg, dest="tau_grid", help="comma-separated quantile levels, or 'auto'")
    est.add_argument("--seed", type=int)
    est.add_argument("--threads", type=int)
    est.add_argument("--output", help="output path, '-' for standard output")
    est.add_argument("--allow-defective", action="store_const", const=True, dest="allow_defective",
                     help="accept truncated means and grids beyond the largest observation")

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--config")
    sim.add_argument("--designs", type=_int_list)
    sim.add_argument("--censoring", type=_float_list)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--estimators", type=lambda s: [v.strip() for v in s.split(",") if v.strip()])
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--output")

    gen = sub.add_parser("generate", help="write one simulated sample as CSV")
    gen.add_argument("--design", type=int)
    gen.add_argument("--n", type=int)
    gen.add_argument("--censoring", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--output")
    return parser


def load_config(path) -> dict:
    """Flat settings from a TOML file, or the ``config`` of a JSON report."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        data = json.loads(text)
        data = data.get("config", data)
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    config = dict(defaults)
    if getattr(args, "config", None):
        from_file = load_config(args.config)
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        config.update(from_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def draw_seed() -> int:
    seed = int(np.random.SeedSequence().entropy % 2**63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def config_hash(config: dict) -> str:
    semantic = {k: v for k, v in config.items() if k not in NON_SEMANTIC}
    return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode()).hexdigest()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        return None if not math.isfinite(value) else float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def propensity_spec(config: dict) -> PropensitySpec:
    order = config["series_order"]
    return PropensitySpec(
        method=config["propensity"],
        order=order if order == "auto" else int(order),
        bandwidth=config["bandwidth"],
        kernel=config["kernel"],
        trim_epsilon=float(config["trim"]),
    )


def make_estimator(sample, config: dict):
    """Estimator object for the configured estimand's family."""
    kind = Estimand(config["estimand"].upper())
    grids = {"y_grid": config["grid"], "tau_grid": config["tau_grid"],
             "allow_defective": bool(config["allow_defective"])}
    if kind.family == "unconfounded":
        return UnconfoundedEstimator(UnconfoundedRequest(sample, propensity_spec(config), **grids))
    if kind.family == "late":
        return LateEstimator(LateRequest(sample, propensity_spec(config), **grids))
    return CicEstimator(CicRequest(sample, **grids))


def _evaluate(estimator, kind: Estimand, grid=None):
    method = {
        Estimand.ATE: "ate", Estimand.DTE: "dte", Estimand.QTE: "qte",
        Estimand.LATE: "late", Estimand.LDTE: "ldte", Estimand.LQTE: "lqte",
        Estimand.ATT: "att", Estimand.DTT: "dtt", Estimand.QTT: "qtt",
    }[kind]
    if kind.is_scalar:
        return getattr(estimator, method)()
    return getattr(estimator, method)(grid=grid)


class _Replicate:
    """Picklable estimator closure for bootstrap workers."""

    def __init__(self, config: dict, kind: Estimand, grid):
        self.config, self.kind, self.grid = config, kind, grid

    def __call__(self, sample):
        return _evaluate(make_estimator(sample, self.config), self.kind, self.grid)


def cmd_estimate(config: dict) -> dict:
    if not config["input"]:
        raise ValidationError("--input is required")
    if not config["estimand"]:
        raise ValidationError("--estimand is required")
    kind = Estimand(str(config["estimand"]).upper())
    sample = load_csv(config["input"])
    checks = validate_for_estimand(sample, kind)
    checks.raise_for_failure()

    estimator = make_estimator(sample, config)
    curve = _evaluate(estimator, kind)
    band = None
    if int(config["bootstrap_b"]) > 0:
        grid = None if kind.is_scalar else np.asarray(curve.grid)
        spec = BootstrapSpec(B=int(config["bootstrap_b"]), alpha=float(config["alpha"]), seed=config["seed"])
        band = uniform_band(sample, _Replicate(config, kind, grid), spec, n_jobs=int(config["threads"]))
        curve = band.curve()

    return {
        "command": "estimate",
        "estimand": kind.value,
        "n": sample.n,
        "censoring_fraction": sample.censoring_fraction,
        "grid": None if kind.is_scalar else curve.grid,
        "estimates": curve.estimates,
        "value": curve.value if kind.is_scalar else None,
        "band": None if band is None else {
            **band.to_dict(), "lower": curve.lower, "upper": curve.upper,
        },
        "diagnostics": curve.diagnostics,
        "sample_checks": checks.to_dict(),
        "seed": config["seed"],
        "config": config,
        "config_hash": config_hash(config),
    }


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc


def _run(args: argparse.Namespace) -> int:
    if args.command == "estimate":
        config = resolve(ESTIMATE_DEFAULTS, args)
        if config["seed"] is None:
            config["seed"] = draw_seed()
        report = cmd_estimate(config)
        _write_text(config["output"], json.dumps(_jsonable(report), indent=2) + "\n")
        return EXIT_OK

    if args.command == "simulate":
        config = resolve(SIMULATE_DEFAULTS, args)
        if int(config["reps"]) < 1:
            raise ValidationError("reps must be at least 1")
        bad = [d for d in config["designs"] if d not in DESIGNS]
        if bad:
            raise ValidationError(f"invalid design id(s): {bad}")
        if config["output"] != "-" and not Path(config["output"]).resolve().parent.is_dir():
            raise ValidationError(f"cannot write {config['output']}: directory does not exist")
        if config["seed"] is None:
            config["seed"] = draw_seed()
        report = run_study(
            designs=config["designs"],
            censoring_levels=[float(c) for c in config["censoring"]],
            reps=int(config["reps"]),
            estimators=config["estimators"],
            seed=int(config["seed"]),
            n=int(config["n"]),
            n_jobs=int(config["threads"]),
            progress=lambda msg: print(msg, file=sys.stderr, flush=True),
        )
        try:
            report.to_csv(config["output"])
        except OSError as exc:
            raise ValidationError(f"cannot write {config['output']}: {exc}") from exc
        return EXIT_OK

    config = resolve(GENERATE_DEFAULTS, args)
    if config["seed"] is None:
        config["seed"] = draw_seed()
    design = DesignSpec(int(config["design"]), n=int(config["n"]), target_censoring=float(config["censoring"]))
    sample = generate(design, np.random.default_rng(int(config["seed"])))
    if config["output"] == "-":
        write_csv(sample, sys.stdout)
    else:
        write_csv(sample, config["output"])
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ValidationError as exc:
        _report_error(exc, EXIT_VALIDATION)
        return EXIT_VALIDATION
    except (EstimationError, TwoStepKMError) as exc:
        _report_error(exc, EXIT_ESTIMATION)
        return EXIT_ESTIMATION


def _report_error(exc: Exception, code: int) -> None:
    payload = {"error": str(exc), "error_type": type(exc).__name__, "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
