"""Command-line entry point: ``pvgpr <command> --config FILE --out DIR``.

Exit codes: 0 success, 1 data failed validation, 2 runtime error.
Log verbosity comes from the PVGPR_LOG_LEVEL environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from pvgpr import __version__, pipeline
from pvgpr.data import write_csv
from pvgpr.errors import PvGprError
from pvgpr.synthetic import SYNTHETIC_SITE, synthetic_dataset

log = logging.getLogger("pvgpr")

EXIT_OK, EXIT_INVALID, EXIT_ERROR = 0, 1, 2
LOG_ENV = "PVGPR_LOG_LEVEL"


def _k_range(text: str) -> list[int]:
    """'1-8' or '1,2,4'."""
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def _levels(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _abs(path: str) -> str:
    return str(Path(path).resolve())


# flag dest -> (config key, converter)
OVERRIDES: dict[str, tuple[str, Any]] = {
    "data": ("data.path", _abs),
    "out": ("out_dir", _abs),
    "k": ("clustering.k", int),
    "cluster_seed": ("clustering.seed", int),
    "holdout_days": ("holdout.n_days", int),
    "holdout_seed": ("holdout.seed", int),
    "cv_k": ("cv.k", int),
    "cv_seed": ("cv.seed", int),
    "n_starts": ("gpr.n_starts", int),
    "max_evals": ("gpr.max_evals", int),
    "max_opt_points": ("gpr.max_opt_points", int),
    "gpr_seed": ("gpr.seed", int),
    "threshold": ("features.threshold", float),
    "ci_levels": ("ci_levels", _levels),
    "k_range": ("sensitivity.k_range", _k_range),
    "repeats": ("evaluate.repeats", int),
    "norm_base": ("evaluate.norm_base", str),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline configuration")
    p.add_argument("--out", help="output directory (config: out_dir)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, e.g. --set gpr.ard=true")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV (config: data.path)")
    p.add_argument("--k", type=str, help="number of clusters (clustering.k)")
    p.add_argument("--cluster-seed", type=str, help="clustering.seed")
    p.add_argument("--holdout-days", type=str, help="holdout.n_days")
    p.add_argument("--holdout-seed", type=str, help="holdout.seed")
    p.add_argument("--cv-k", type=str, help="cv.k")
    p.add_argument("--cv-seed", type=str, help="cv.seed")
    p.add_argument("--n-starts", type=str, help="gpr.n_starts")
    p.add_argument("--max-evals", type=str, help="gpr.max_evals")
    p.add_argument("--max-opt-points", type=str, help="gpr.max_opt_points")
    p.add_argument("--gpr-seed", type=str, help="gpr.seed")
    p.add_argument("--threshold", type=str, help="features.threshold")
    p.add_argument("--ci-levels", type=str, help="comma list, e.g. 0.9,0.95 (ci_levels)")
    p.add_argument("--norm-base", choices=pipeline.NORM_BASES,
                   help="divisor for percent metrics (evaluate.norm_base)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvgpr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pvgpr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a CSV against the schema and physical ranges")
    _add_common(p)
    p.add_argument("--data", help="input CSV (config: data.path)")

    p = sub.add_parser("train", help="cluster, select features, fit one GPR per cluster")
    _add_common(p)
    _add_training_flags(p)

    p = sub.add_parser("predict", help="forecast query hours with a trained run")
    _add_common(p)
    p.add_argument("--manifest", help="manifest.json of a trained run (default: <out>/manifest.json)")
    p.add_argument("--horizon", required=True, help="CSV with timestamp and feature columns")
    p.add_argument("--output", help="forecast CSV path (default: <out>/forecast.csv)")

    p = sub.add_parser("evaluate", help="score the hold-out partition of a trained run")
    _add_common(p)
    p.add_argument("--manifest", help="manifest.json of a trained run (default: <out>/manifest.json)")
    p.add_argument("--holdout", help="hold-out CSV (default: the one recorded in the manifest)")
    p.add_argument("--repeats", type=str, help="retrain on this many resampled hold-outs (evaluate.repeats)")

    p = sub.add_parser("sensitivity", help="train and cross-validate for a range of cluster counts")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--k-range", type=str, help="'1-8' or '1,4' (sensitivity.k_range)")

    p = sub.add_parser("synthetic", help="write the bundled synthetic year and a config for it")
    p.add_argument("--out", required=True, help="directory for synthetic.csv and config.json")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    overrides: dict[str, Any] = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=JSON, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    for dest, (key, conv) in OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = conv(val)
    return pipeline.load_config(args.config, overrides)


def _run_dir(args: argparse.Namespace) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.out:
        return Path(args.out)
    if args.config:
        return _config(args).out
    raise ValueError("give --manifest, --out or --config to locate the trained run")


def _dispatch(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "synthetic":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(synthetic_dataset(args.seed), out / "synthetic.csv")
        doc = {"data": {"path": "synthetic.csv"}, "site": SYNTHETIC_SITE.to_dict(), "out_dir": "run"}
        (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        print(out / "config.json")
        return EXIT_OK
    if cmd == "validate":
        status, report = pipeline.cmd_validate(_config(args))
        print(json.dumps({"row_count": report["row_count"], **report["counts"]}))
        return EXIT_INVALID if status else EXIT_OK
    if cmd == "train":
        cfg = _config(args)
        manifest = pipeline.cmd_train(cfg)
        print(json.dumps({"manifest": str(cfg.out / pipeline.MANIFEST),
                          "cv_rmse_pct": manifest["cv"]["pooled"]["rmse_pct"]}))
        return EXIT_OK
    if cmd == "predict":
        run = _run_dir(args)
        root = run if run.is_dir() else run.parent
        output = Path(args.output) if args.output else root / "forecast.csv"
        fc = pipeline.cmd_predict(run, args.horizon, output)
        print(json.dumps({"forecast": str(output), "rows": len(fc)}))
        return EXIT_OK
    if cmd == "evaluate":
        run = _run_dir(args)
        repeats = int(args.repeats) if args.repeats is not None else None
        report = pipeline.cmd_evaluate(run, args.holdout, None, repeats)
        print(json.dumps({"rmse_pct": report["pooled"]["rmse_pct"],
                          "holdout_to_cv_rmse_ratio": report["holdout_to_cv_rmse_ratio"]}))
        return EXIT_OK
    if cmd == "sensitivity":
        cfg = _config(args)
        rows = pipeline.cmd_sensitivity(cfg)
        for row in rows:
            print(json.dumps({k: row[k] for k in ("k", "status", "rmse_pct")}))
        return EXIT_OK
    raise AssertionError(cmd)


def main(argv: Sequence[str] | None = None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (PvGprError, ValueError, OSError, KeyError) as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
