"""Command-line entry point.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 when
estimation fails (singular design, non-convergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DynDMLError, EstimationError, ValidationError

log = logging.getLogger("dyndml")

COMMANDS = ("simulate", "fit", "opeval", "montecarlo", "benchmarks", "block")
VARIANTS = ("dyndml", "snmm", "rlearner", "sparse", "block")
EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 2, 3

# keys of a config file that are not DGP fields
_RUN_KEYS = {"command", "data", "variant", "reps", "alpha", "seed", "workers", "out", "dgp", "learner",
             "featurizer", "blip", "policy", "policies", "mode", "radius", "folds", "sparse", "feature_map",
             "block_length", "n_blocks", "pipeline"}


@dataclass
class RunConfig:
    """Everything one invocation needs; flags override config-file fields."""

    command: str
    data: Optional[str] = None
    variant: str = "dyndml"
    reps: int = 100
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1
    out: Optional[str] = None
    dgp: Optional[dict] = None
    learner: dict = field(default_factory=dict)
    featurizer: Optional[str] = None
    blip: object = "linear"
    policy: object = "zero"
    policies: object = None
    mode: str = "linear_system"
    radius: Optional[float] = None
    folds: int = 2
    sparse: dict = field(default_factory=dict)
    feature_map: dict = field(default_factory=dict)
    block_length: Optional[int] = None
    n_blocks: int = 200

    def validate(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.alpha < 1:
            raise ValidationError("--alpha must lie in (0, 1)")
        if self.reps < 1:
            raise ValidationError("--reps must be >= 1")
        if self.workers < 1:
            raise ValidationError("--workers must be >= 1")
        if self.command in ("fit", "opeval") and not self.data:
            raise ValidationError(f"{self.command} needs --data")
        if self.data and not Path(self.data).is_file():
            raise ValidationError(f"data file {self.data!r} does not exist")
        if self.command == "simulate" and not self.out:
            raise ValidationError("simulate needs --out")
        return self

    def to_dict(self):
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyndml", description="Dynamic treatment effect estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (DGP, learner, pipeline fields)")
        p.add_argument("--data", help="panel CSV/JSON, or series CSV for the block command")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--reps", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="Monte Carlo processes (default: $DYNDML_WORKERS or 1)")
        p.add_argument("--out", help="output path; a CSV is written next to JSON outputs")
    return parser


def _read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file {path!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path!r} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ValidationError("config file must contain a JSON object")
    return payload


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    payload = _read_config(args.config) if args.config else {}
    payload = dict(payload)
    pipeline = payload.pop("pipeline", None) or {}
    for key, val in pipeline.items():
        payload.setdefault(key, val)
    dgp_fields = {k: payload.pop(k) for k in list(payload) if k not in _RUN_KEYS}
    if dgp_fields:
        if payload.get("dgp"):
            raise ValidationError(f"unknown config field(s): {sorted(dgp_fields)}")
        payload["dgp"] = dgp_fields
    payload.pop("command", None)
    cfg = RunConfig(command=args.command, **payload)
    for key in ("data", "variant", "reps", "alpha", "seed", "out"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.workers is not None:
        cfg.workers = args.workers
    elif "workers" not in payload and environ.get("DYNDML_WORKERS"):
        try:
            cfg.workers = int(environ["DYNDML_WORKERS"])
        except ValueError:
            raise ValidationError(f"DYNDML_WORKERS={environ['DYNDML_WORKERS']!r} is not an integer") from None
    return cfg.validate()


# ---------------------------------------------------------------------------
# Commands


def _dgp(cfg: RunConfig, default="paper"):
    from .simulate import DGPConfig

    spec = cfg.dgp or {"instance": default}
    return DGPConfig.from_dict(spec)


def _learner(cfg):
    from .regression import LearnerSpec

    return LearnerSpec.from_dict(cfg.learner)


def _load_panel(path):
    from .data import load_panel_csv, load_panel_json

    return load_panel_json(path) if str(path).lower().endswith(".json") else load_panel_csv(path)


def _estimate_rows(est, alpha):
    ci = est.intervals(alpha)
    se = est.stderr()
    return [{"period": t + 1, "coord": c, "estimate": float(est.psi[t, c]), "stderr": float(se[t, c]),
             "ci_lo": float(ci[t, c, 0]), "ci_hi": float(ci[t, c, 1])}
            for t in range(est.m) for c in range(est.r)]


def _fit_panel(cfg, panel):
    """Returns (result dict, csv rows, estimate or None)."""
    from .data import split as make_split
    from .residualize import HistoryFeaturizer, residualize_markov

    learner = _learner(cfg)
    sp = make_split(panel, cfg.seed, cfg.folds)
    if cfg.variant == "dyndml":
        from .gestimate import fit_dyndml

        est = fit_dyndml(panel, learner, sp, HistoryFeaturizer(cfg.featurizer or "markov"), cfg.mode, cfg.radius)
        return est.to_dict(cfg.alpha), _estimate_rows(est, cfg.alpha), est
    if cfg.variant == "snmm":
        from .snmm import gestimate_snmm, make_blip, make_policy

        est = gestimate_snmm(panel, make_blip(cfg.blip, panel.d, panel.k), make_policy(cfg.policy), learner, sp,
                             HistoryFeaturizer(cfg.featurizer or "full_history"), cfg.mode, cfg.radius)
        return est.to_dict(cfg.alpha), _estimate_rows(est, cfg.alpha), est
    if cfg.variant == "rlearner":
        from .rlearner import FeatureMap, fit_dynamic_rlearner

        if panel.exo_features is None:
            raise ValidationError("the rlearner variant needs exogenous feature columns (x0_*)")
        res = residualize_markov(panel, learner, sp, HistoryFeaturizer(cfg.featurizer or "markov_exo"))
        model = fit_dynamic_rlearner(res, panel.exo_features, FeatureMap(**cfg.feature_map))
        rows = [{"period": t + 1, "feature": f, "coord": c, "theta": float(model.theta[t, f, c])}
                for t in range(model.m) for f in range(model.theta.shape[1]) for c in range(model.theta.shape[2])]
        return {"method": "rlearner", **model.to_dict()}, rows, None
    if cfg.variant == "sparse":
        from .sparse import SparseOptions, fit_sparse

        res = residualize_markov(panel, learner, sp, HistoryFeaturizer(cfg.featurizer or "markov"))
        opts = dict(cfg.sparse)
        if opts.get("radius") is None:
            opts.pop("radius", None)
        est = fit_sparse(res, SparseOptions(**opts))
        rows = [{"period": t + 1, "coord": int(c), "estimate": float(est.psi[t, c]), "kappa": float(est.kappas[t])}
                for t in range(est.m) for c in est.supports[t]]
        return est.to_dict(), rows, None
    raise ValidationError("use the block command for the block variant")


def _write_csv(rows, path):
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _emit(cfg, result, rows=None, timing=None):
    doc = {"command": cfg.command, "config": cfg.to_dict(), "result": _jsonable(result)}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if not cfg.out:
        sys.stdout.write(text + "\n")
        return
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n", encoding="utf-8")
    if rows is not None:
        _write_csv(rows, out.with_suffix(".csv"))
    if timing is not None:
        # kept apart so the main output is byte-identical across runs
        out.with_name(out.stem + ".timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")


def cmd_simulate(cfg):
    from .data import write_panel_csv, write_panel_json
    from .simulate import generate

    dgp = _dgp(cfg)
    panel = generate(dgp, seed=cfg.seed)
    if cfg.out.lower().endswith(".json"):
        write_panel_json(panel, cfg.out)
    else:
        write_panel_csv(panel, cfg.out)
    meta = Path(cfg.out).with_name(Path(cfg.out).stem + ".config.json")
    doc = {"command": "simulate", "config": cfg.to_dict(), "dgp": dgp.to_dict()}
    meta.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d units x %d periods to %s", panel.n, panel.m, cfg.out)


def cmd_fit(cfg):
    if cfg.variant == "block":
        return cmd_block(cfg)
    panel = _load_panel(cfg.data)
    result, rows, _ = _fit_panel(cfg, panel)
    _emit(cfg, result, rows)


def cmd_opeval(cfg):
    from .data import split as make_split
    from .residualize import HistoryFeaturizer
    from .snmm import build_Q, gestimate_snmm, make_blip, make_policy, off_policy_value

    if cfg.variant not in ("dyndml", "snmm"):
        raise ValidationError("opeval supports the dyndml and snmm variants")
    panel = _load_panel(cfg.data)
    blip = make_blip(cfg.blip if cfg.variant == "snmm" else "linear", panel.d, panel.k)
    feat = HistoryFeaturizer(cfg.featurizer or ("full_history" if cfg.variant == "snmm" else "markov"))
    est = gestimate_snmm(panel, blip, make_policy("zero"), _learner(cfg), make_split(panel, cfg.seed, cfg.folds),
                         feat, cfg.mode, cfg.radius)
    descriptors = cfg.policies or ["zero", "replay"]
    rows, values = [], {}
    for desc in descriptors:
        pol = make_policy(desc)
        opv = off_policy_value(panel, est, build_Q(panel, blip, pol), cfg.alpha)
        values[pol.name] = opv.to_dict()
        rows.append({"policy": pol.name, "value": opv.value, "stderr": opv.stderr, "ci_lo": opv.lo, "ci_hi": opv.hi})
    _emit(cfg, {"estimate": est.to_dict(cfg.alpha), "policies": values}, rows)


def _pipeline(cfg):
    pipe = {"variant": cfg.variant, "learner": cfg.learner, "folds": cfg.folds, "mode": cfg.mode}
    if cfg.featurizer:
        pipe["featurizer"] = cfg.featurizer
    if cfg.radius is not None:
        pipe["radius"] = cfg.radius
    if cfg.variant == "snmm":
        pipe["blip"], pipe["policy"] = cfg.blip, cfg.policy
    return pipe


def cmd_montecarlo(cfg):
    from .simulate import monte_carlo

    if cfg.variant not in ("dyndml", "snmm"):
        raise ValidationError("montecarlo supports the dyndml and snmm variants")
    dgp = _dgp(cfg)
    report = monte_carlo(dgp, cfg.reps, _pipeline(cfg), cfg.alpha, cfg.seed, cfg.workers, cfg.policies)
    _emit(cfg, report.to_dict(include_timing=False), report.summary_rows(), {"runtime_seconds": report.runtime})
    if cfg.out:
        out = Path(cfg.out)
        report.write_plot_data(out.with_name(out.stem + "_plot.csv"))


def cmd_benchmarks(cfg):
    from .simulate import benchmarks

    dgp = _dgp(cfg, default="benchmark")
    report = benchmarks(dgp, cfg.reps, cfg.seed, _learner(cfg), cfg.workers)
    _emit(cfg, report.to_dict(include_timing=False), report.rows(), {"runtime_seconds": report.runtime})


def cmd_block(cfg):
    from .block import fit_block
    from .data import load_series_csv
    from .residualize import HistoryFeaturizer
    from .simulate import generate_series

    if cfg.data:
        if not cfg.block_length:
            raise ValidationError("block estimation from a file needs block_length in the config")
        series = load_series_csv(cfg.data, int(cfg.block_length))
    else:
        series = generate_series(_dgp(cfg), cfg.n_blocks, seed=cfg.seed)
    est = fit_block(series, _learner(cfg), HistoryFeaturizer(cfg.featurizer or "markov"), cfg.seed)
    _emit(cfg, est.to_dict(cfg.alpha), _estimate_rows(est.estimate, cfg.alpha))


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "opeval": cmd_opeval, "montecarlo": cmd_montecarlo,
            "benchmarks": cmd_benchmarks, "block": cmd_block}


def _report_error(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("stage", "min_eigenvalue", "last_change"):
        val = getattr(exc, attr, None)
        if val is not None:
            doc[attr] = _jsonable(val)
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValidationError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        return _report_error(exc, EXIT_VALIDATION)
    start = time.perf_counter()
    try:
        HANDLERS[cfg.command](cfg)
    except EstimationError as exc:
        return _report_error(exc, EXIT_ESTIMATION)
    except (ValidationError, TypeError, KeyError) as exc:
        return _report_error(exc, EXIT_VALIDATION)
    except DynDMLError as exc:
        return _report_error(exc, EXIT_ESTIMATION)
    log.info("%s finished in %.2fs", cfg.command, time.perf_counter() - start)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
