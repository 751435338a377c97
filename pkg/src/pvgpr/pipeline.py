"""Batch orchestration: validate, train, predict, evaluate and the cluster-count study.

Every command reads a :class:`PipelineConfig` and writes plain JSON/CSV files
into the configured output directory.
"""
from __future__ import annotations

import contextlib
import copy
import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from pvgpr import __version__, gpr
from pvgpr.clustering import ClusterConfig, ClusterModel, assign_forecast, fit_kmeans
from pvgpr.data import (
    TARGET,
    TIMESTAMP_FORMAT,
    CleanPolicy,
    Dataset,
    SiteMeta,
    clean,
    load_csv,
    split_holdout,
    validate_dataset,
    write_csv,
)
from pvgpr.errors import (
    ArtifactCorruptError,
    PvGprError,
    SchemaMismatchError,
    StageError,
    TooFewPointsError,
)
from pvgpr.evaluation import (
    CvResult,
    MetricSet,
    confidence_interval,
    cross_validate,
    fit_normal,
    metrics,
    z_star,
)
from pvgpr.features import (
    CorrelationReport,
    FeatureSelection,
    SelectionPolicy,
    correlation_report,
    select_features,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
NORM_BASES = ("capacity", "max_observed")
# fields of the manifest that legitimately differ between identical runs
VOLATILE_FIELDS = ("timings", "created_at")
# cheaper than the library defaults: a full year must train in minutes
PIPELINE_GPR_DEFAULTS = {"n_starts": 3, "max_evals": 600, "max_opt_points": 400,
                         "constant_columns": "drop"}


# ---------------------------------------------------------------- configuration
@dataclass(frozen=True)
class PipelineConfig:
    site: SiteMeta
    data_path: str | None = None
    columns: dict = field(default_factory=dict)
    clean: CleanPolicy = field(default_factory=CleanPolicy)
    holdout_days: int = 30
    holdout_seed: int = 0
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    features: SelectionPolicy = field(default_factory=SelectionPolicy)
    gpr: gpr.FitOptions = field(default_factory=lambda: gpr.FitOptions(**PIPELINE_GPR_DEFAULTS))
    cv_k: int = 5
    cv_seed: int = 0
    ci_levels: tuple[float, ...] = (0.90, 0.95, 0.99)
    out_dir: str = "pvgpr_out"
    k_range: tuple[int, ...] = tuple(range(1, 9))
    repeats: int = 1
    # percent metrics divide by nameplate capacity or the largest training output
    norm_base: str = "capacity"

    def __post_init__(self):
        if self.norm_base not in NORM_BASES:
            raise ValueError(f"evaluate.norm_base must be one of {NORM_BASES}")
        if self.holdout_days < 1:
            raise ValueError("holdout.n_days must be >= 1")
        if self.cv_k < 2:
            raise ValueError("cv.k must be >= 2")
        if self.repeats < 1:
            raise ValueError("evaluate.repeats must be >= 1")
        for lvl in self.ci_levels:
            z_star(lvl)
        if not self.k_range or min(self.k_range) < 1:
            raise ValueError("sensitivity.k_range must hold positive cluster counts")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return {
            "data": {"path": self.data_path, "columns": dict(self.columns)},
            "site": self.site.to_dict(),
            "clean": self.clean.to_dict(),
            "holdout": {"n_days": self.holdout_days, "seed": self.holdout_seed},
            "clustering": self.clustering.to_dict(),
            "features": self.features.to_dict(),
            "gpr": self.gpr.to_dict(),
            "cv": {"k": self.cv_k, "seed": self.cv_seed},
            "ci_levels": list(self.ci_levels),
            "out_dir": self.out_dir,
            "sensitivity": {"k_range": list(self.k_range)},
            "evaluate": {"repeats": self.repeats, "norm_base": self.norm_base},
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "PipelineConfig":
        """Build from the nested JSON layout; relative paths resolve against base_dir."""
        d = dict(d)
        data = dict(d.get("data") or {})
        path = _resolve(data.get("path"), base_dir)
        gpr_opts = dict(PIPELINE_GPR_DEFAULTS)
        gpr_opts.update(d.get("gpr") or {})
        hold = d.get("holdout") or {}
        cv = d.get("cv") or {}
        kr = (d.get("sensitivity") or {}).get("k_range", list(range(1, 9)))
        if isinstance(kr, Mapping):
            kr = list(range(int(kr["min"]), int(kr["max"]) + 1))
        return cls(
            site=SiteMeta.from_dict(d["site"]),
            data_path=path,
            columns=dict(data.get("columns") or {}),
            clean=CleanPolicy.from_dict(d.get("clean")),
            holdout_days=int(hold.get("n_days", 30)),
            holdout_seed=int(hold.get("seed", 0)),
            clustering=ClusterConfig.from_dict(d.get("clustering")),
            features=SelectionPolicy.from_dict(d.get("features")),
            gpr=gpr.FitOptions.from_dict(gpr_opts),
            cv_k=int(cv.get("k", 5)),
            cv_seed=int(cv.get("seed", 0)),
            ci_levels=tuple(float(x) for x in d.get("ci_levels", (0.90, 0.95, 0.99))),
            out_dir=_resolve(str(d.get("out_dir", "pvgpr_out")), base_dir),
            k_range=tuple(int(k) for k in kr),
            repeats=int((d.get("evaluate") or {}).get("repeats", 1)),
            norm_base=str((d.get("evaluate") or {}).get("norm_base", "capacity")),
        )


def _resolve(path: str | None, base_dir: str | Path | None) -> str | None:
    if path and base_dir is not None and not os.path.isabs(path):
        return str(Path(base_dir) / path)
    return path


def set_path(doc: dict, dotted: str, value: Any) -> None:
    """Assign doc["a"]["b"] = value for dotted key "a.b", creating levels."""
    keys = dotted.split(".")
    cur = doc
    for key in keys[:-1]:
        cur = cur.setdefault(key, {})
        if not isinstance(cur, dict):
            raise ValueError(f"config key {dotted!r} crosses a non-object value")
    cur[keys[-1]] = value


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    doc: dict = {}
    base = None
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        base = Path(path).resolve().parent
    for key, value in (overrides or {}).items():
        set_path(doc, key, value)
    if "site" not in doc:
        raise ValueError("config needs a 'site' object with at least capacity_mw")
    return PipelineConfig.from_dict(doc, base_dir=base)


# ---------------------------------------------------------------- helpers
@contextlib.contextmanager
def stage(name: str, timings: dict | None = None) -> Iterator[None]:
    """Time a pipeline step and tag any library error with the step name.

    The original exception class is kept where possible so callers can still
    catch, say, TooFewPointsError.
    """
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except (PvGprError, ValueError) as exc:
        try:
            tagged = type(exc)(f"[{name}] {exc}")
        except TypeError:
            tagged = StageError(name, exc)
        tagged.stage = name
        raise tagged from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load_data(cfg: PipelineConfig) -> Dataset:
    if not cfg.data_path:
        raise ValueError("config has no data.path")
    return load_csv(cfg.data_path, cfg.site, cfg.columns or None)


def _cluster_points(d: Dataset) -> np.ndarray:
    return np.column_stack([d.hour_of_day, d.column(TARGET)])


# ---------------------------------------------------------------- validate
def norm_base_mw(cfg: PipelineConfig, train_power: np.ndarray) -> float:
    if cfg.norm_base == "capacity":
        return cfg.site.capacity_mw
    peak = float(np.max(train_power))
    if not peak > 0:
        raise ValueError("max_observed normalisation needs a positive training output")
    return peak


def cmd_validate(cfg: PipelineConfig) -> tuple[int, dict]:
    """Exit status 0 when the data is clean, 1 when it has violations."""
    d = _load_data(cfg)
    report = validate_dataset(d).to_dict()
    _write_json(cfg.out / "validation.json", report)
    status = 1 if report["missing_cells"] or report["range_violations"] else 0
    return status, report


# ---------------------------------------------------------------- train
@dataclass
class TrainResult:
    """In-memory outcome of a training run (also what gets persisted)."""
    train: Dataset
    holdout: Dataset
    clusters: ClusterModel
    correlation: CorrelationReport
    selection: FeatureSelection
    models: dict[int, gpr.TrainedGpr]
    cv: dict[int, CvResult]
    cv_pooled: MetricSet
    base_mw: float
    timings: dict[str, float]


def train_core(cfg: PipelineConfig, data: Dataset | None = None) -> TrainResult:
    """clean -> hold-out split -> k-means -> correlation -> selection -> per-cluster GPR + CV.

    Only the training partition reaches any fitting step.
    """
    timings: dict[str, float] = {}
    with stage("load", timings):
        d = data if data is not None else _load_data(cfg)
    with stage("clean", timings):
        d = clean(d, cfg.clean)
    with stage("split_holdout", timings):
        train, holdout = split_holdout(d, cfg.holdout_days, cfg.holdout_seed)
    with stage("fit_kmeans", timings):
        clusters = fit_kmeans(_cluster_points(train), cfg.clustering, day_of_year=train.day_of_year)
    with stage("correlation_report", timings):
        report = correlation_report(train)
    with stage("select_features", timings):
        selection = select_features(report, cfg.features)

    X = train.matrix(selection.selected)
    y = train.column(TARGET)
    base = norm_base_mw(cfg, y)
    models: dict[int, gpr.TrainedGpr] = {}
    cvs: dict[int, CvResult] = {}
    oof = np.empty(len(y))
    for c in range(1, cfg.clustering.k + 1):
        mask = clusters.assignments == c
        n = int(mask.sum())
        need = 5 * cfg.cv_k
        if n < need:
            raise TooFewPointsError(
                f"[gpr_fit] cluster {c} has {n} training points; need at least {need} (5 x cv.k)")
        with stage(f"gpr_fit[cluster {c}]", timings):
            models[c] = gpr.fit(X[mask], y[mask], cfg.gpr)
        with stage(f"cross_validate[cluster {c}]", timings):
            cvs[c] = cross_validate(X[mask], y[mask], cfg.gpr, cfg.cv_k, cfg.cv_seed, base)
        oof[mask] = cvs[c].predictions
        log.info("cluster %d: n=%d cv rmse %.3f%%", c, n, cvs[c].mean.rmse_pct)
    pooled = metrics(y, oof, base)
    return TrainResult(train, holdout, clusters, report, selection, models, cvs, pooled, base, timings)


def cmd_train(cfg: PipelineConfig, data: Dataset | None = None) -> dict:
    """Train and persist; returns the manifest that was written."""
    t0 = time.perf_counter()
    res = train_core(cfg, data)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    t_write = time.perf_counter()

    artifacts = {}
    for c, model in res.models.items():
        rel = f"models/cluster_{c}.json"
        _write_json(out / rel, {"cluster": c, "features": list(res.selection.selected),
                                "model": model.to_dict()})
        artifacts[str(c)] = rel
    _write_json(out / "clusters.json", res.clusters.to_dict())
    _write_json(out / "correlation.json", res.correlation.to_dict())
    (out / "correlation.csv").write_text(res.correlation.to_csv_text(), encoding="utf-8")
    write_csv(res.train, out / "train.csv")
    write_csv(res.holdout, out / "holdout.csv")
    _write_json(out / "cv.json", {
        str(c): {**r.to_dict(), "folds": [f.tolist() for f in r.fold_assignments]}
        for c, r in res.cv.items()
    })

    holdout_days = sorted({str(day) for day in res.holdout.days})
    manifest = {
        "tool": "pvgpr",
        "version": __version__,
        "created_at": pd.Timestamp.now(tz="UTC").strftime("%Y-%m-%dT%H:%M:%SZ"),
        "config": cfg.to_dict(),
        "fingerprints": {"train": res.train.fingerprint(), "holdout": res.holdout.fingerprint()},
        "partition": {"train_rows": len(res.train), "holdout_rows": len(res.holdout),
                      "holdout_days": holdout_days},
        "features": res.selection.to_dict(),
        "clusters": {"path": "clusters.json", "sizes": res.clusters.cluster_sizes().tolist(),
                     "inertia_standard": res.clusters.inertia_standard,
                     "inertia_weighted": res.clusters.inertia_weighted},
        "artifacts": artifacts,
        "files": {"train": "train.csv", "holdout": "holdout.csv", "cv": "cv.json",
                  "correlation_json": "correlation.json", "correlation_csv": "correlation.csv"},
        "models": {str(c): {"n_train": m.n_train, "hyperparams": m.hp.to_dict(), "beta": m.beta,
                            "lml": m.lml, "jitter": m.jitter} for c, m in res.models.items()},
        "norm_base_mw": res.base_mw,
        "cv": {"pooled": res.cv_pooled.to_dict(),
               "per_cluster": {str(c): r.mean.to_dict() for c, r in res.cv.items()}},
    }
    timings = dict(res.timings)
    timings["write"] = time.perf_counter() - t_write
    timings["total"] = time.perf_counter() - t0
    manifest["timings"] = timings
    for rel in list(artifacts.values()) + list(manifest["files"].values()) + ["clusters.json"]:
        assert (out / rel).exists(), rel
    _write_json(out / MANIFEST, manifest)
    return manifest


# ---------------------------------------------------------------- loading a run
@dataclass
class LoadedRun:
    root: Path
    manifest: dict
    config: PipelineConfig
    clusters: ClusterModel
    features: tuple[str, ...]
    models: dict[int, gpr.TrainedGpr]


def load_run(manifest_path: str | Path) -> LoadedRun:
    """Read a manifest and every artifact it references, verifying each model."""
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / MANIFEST
    root = mpath.parent
    try:
        manifest = _read_json(mpath)
        cfg = PipelineConfig.from_dict(manifest["config"])
        clusters = ClusterModel.from_dict(_read_json(root / manifest["clusters"]["path"]))
        features = tuple(manifest["features"]["selected"])
        models = {}
        for key, rel in manifest["artifacts"].items():
            doc = _read_json(root / rel)
            if tuple(doc["features"]) != features:
                raise ArtifactCorruptError(f"{rel}: feature list disagrees with manifest")
            models[int(key)] = gpr.TrainedGpr.from_dict(doc["model"])
    except ArtifactCorruptError:
        raise
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ArtifactCorruptError(f"unreadable run at {root}: {exc}") from exc
    if set(models) != set(range(1, clusters.config.k + 1)):
        raise ArtifactCorruptError("manifest does not hold one model per cluster")
    return LoadedRun(root, manifest, cfg, clusters, features, models)


# ---------------------------------------------------------------- predict
def _ci_cols(level: float) -> tuple[str, str]:
    tag = f"{round(level * 100):d}"
    return f"ci{tag}_lo_mw", f"ci{tag}_hi_mw"


def read_horizon(path: str | Path, features: Sequence[str]) -> pd.DataFrame:
    """Read query rows: a timestamp column plus every selected feature."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("timestamp", *features) if c not in frame.columns]
    if missing:
        raise SchemaMismatchError(f"horizon file lacks columns {missing}")
    out = pd.DataFrame({"timestamp": pd.to_datetime(frame["timestamp"], format=TIMESTAMP_FORMAT)})
    for c in features:
        out[c] = frame[c].astype(float)
    if TARGET in frame.columns:
        out[TARGET] = pd.to_numeric(frame[TARGET], errors="coerce")
    return out


def forecast(run: LoadedRun, horizon: pd.DataFrame, levels: Sequence[float] | None = None) -> pd.DataFrame:
    """Route each hour to a cluster by (hour, day-of-year) and predict there."""
    levels = tuple(levels if levels is not None else run.config.ci_levels)
    n = len(horizon)
    ts = pd.DatetimeIndex(horizon["timestamp"])
    X = horizon[list(run.features)].to_numpy(dtype=float).reshape(n, len(run.features))
    route = np.array([assign_forecast(run.clusters, h, d) for h, d in zip(ts.hour, ts.dayofyear)],
                     dtype=int)
    mean = np.zeros(n)
    var = np.zeros(n)
    for c in np.unique(route):
        sel = route == c
        p = gpr.predict(run.models[int(c)], X[sel], include_noise=True)
        mean[sel] = p.mean
        var[sel] = p.variance
    out = pd.DataFrame({"timestamp": ts.strftime(TIMESTAMP_FORMAT), "cluster": route,
                        "mean_mw": mean, "variance_mw2": var})
    sd = np.sqrt(np.maximum(var, 0.0))
    for lvl in levels:
        lo, hi = _ci_cols(lvl)
        z = z_star(lvl)
        out[lo] = mean - z * sd
        out[hi] = mean + z * sd
    return out


def _csv_text(frame: pd.DataFrame) -> str:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue()


def cmd_predict(manifest_path: str | Path, horizon_path: str | Path, out_path: str | Path) -> pd.DataFrame:
    run = load_run(manifest_path)
    horizon = read_horizon(horizon_path, run.features)
    fc = forecast(run, horizon)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(_csv_text(fc), encoding="utf-8")
    return fc


# ---------------------------------------------------------------- evaluate
def evaluate_run(run: LoadedRun, holdout: pd.DataFrame) -> tuple[dict, pd.DataFrame]:
    cfg = run.config
    base = float(run.manifest["norm_base_mw"])
    fc = forecast(run, holdout)
    actual = holdout[TARGET].to_numpy(dtype=float)
    pred = fc["mean_mw"].to_numpy()
    err = actual - pred
    per_cluster = {}
    for c in sorted(run.models):
        sel = fc["cluster"].to_numpy() == c
        per_cluster[str(c)] = metrics(actual[sel], pred[sel], base).to_dict() if sel.any() else None
    dist = fit_normal(err)
    pooled = metrics(actual, pred, base)
    cv_rmse = run.manifest["cv"]["pooled"]["rmse_pct"]
    report = {
        "pooled": pooled.to_dict(),
        "per_cluster": per_cluster,
        "error_distribution": dist.to_dict(),
        "confidence_intervals": [confidence_interval(dist, lvl).to_dict() for lvl in cfg.ci_levels],
        "cv_pooled_rmse_pct": cv_rmse,
        "holdout_to_cv_rmse_ratio": pooled.rmse_pct / cv_rmse if cv_rmse > 0 else None,
    }
    plot_level = 0.95 if any(abs(x - 0.95) < 1e-9 for x in cfg.ci_levels) else cfg.ci_levels[0]
    lo, hi = _ci_cols(plot_level)
    plot = pd.DataFrame({
        "timestamp": fc["timestamp"],
        "actual_mw": actual,
        "predicted_mw": pred,
        "variance_mw2": fc["variance_mw2"],
        "ci_lo": fc[lo],
        "ci_hi": fc[hi],
        "cluster": fc["cluster"],
    })
    return report, plot


def cmd_evaluate(manifest_path: str | Path, holdout_path: str | Path | None = None,
                 out_dir: str | Path | None = None, repeats: int | None = None) -> dict:
    """Score the hold-out partition; with repeats > 1 also retrain on resampled hold-outs."""
    run = load_run(manifest_path)
    hpath = Path(holdout_path) if holdout_path else run.root / run.manifest["files"]["holdout"]
    holdout = read_horizon(hpath, run.features)
    if TARGET not in holdout or holdout[TARGET].isna().any():
        raise SchemaMismatchError(f"hold-out file {hpath} needs a complete {TARGET} column")
    out = Path(out_dir) if out_dir else run.root
    report, plot = evaluate_run(run, holdout)
    repeats = run.config.repeats if repeats is None else repeats
    if repeats > 1:
        report["repeats"] = _repeat_protocol(run.config, repeats, out)
    _write_json(out / "metrics.json", report)
    (out / "plot_data.csv").write_text(_csv_text(plot), encoding="utf-8")
    return report


def _repeat_protocol(cfg: PipelineConfig, repeats: int, out: Path) -> dict:
    """Retrain with a fresh hold-out draw per repeat and summarise the spread."""
    rows = []
    for r in range(repeats):
        rcfg = replace(cfg, holdout_seed=cfg.holdout_seed + r, out_dir=str(out / "repeats" / f"r{r:03d}"))
        cmd_train(rcfg)
        run = load_run(rcfg.out)
        rep, _ = evaluate_run(run, read_horizon(rcfg.out / "holdout.csv", run.features))
        rows.append({"repeat": r, "holdout_seed": rcfg.holdout_seed, "rmse_pct": rep["pooled"]["rmse_pct"],
                     "mae_pct": rep["pooled"]["mae_pct"], "cv_rmse_pct": rep["cv_pooled_rmse_pct"]})
    vals = np.array([row["rmse_pct"] for row in rows])
    return {"runs": rows, "rmse_pct_mean": float(vals.mean()),
            "rmse_pct_std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}


# ---------------------------------------------------------------- sensitivity
SENSITIVITY_COLUMNS = ("k", "status", "rmse_pct", "mae_pct", "mse_pct", "rmse_mw", "mae_mw",
                       "mse_mw2", "error")


def cmd_sensitivity(cfg: PipelineConfig, k_range: Sequence[int] | None = None,
                    data: Dataset | None = None) -> list[dict]:
    """Train + CV for each cluster count; failures are recorded, not raised.

    Every k shares the same hold-out split because the hold-out seed is fixed.
    """
    ks = list(k_range if k_range is not None else cfg.k_range)
    base_data = data if data is not None else _load_data(cfg)
    rows = []
    for k in ks:
        row: dict[str, Any] = {c: "" for c in SENSITIVITY_COLUMNS}
        row["k"] = k
        try:
            kcfg = replace(cfg, clustering=replace(cfg.clustering, k=k))
            res = train_core(kcfg, base_data)
            m = res.cv_pooled
            row.update(status="ok", rmse_pct=m.rmse_pct, mae_pct=m.mae_pct, mse_pct=m.mse_pct,
                       rmse_mw=m.rmse_mw, mae_mw=m.mae_mw, mse_mw2=m.mse_mw2)
        except (PvGprError, ValueError) as exc:
            log.warning("sensitivity k=%d failed: %s", k, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "sensitivity.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SENSITIVITY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(cfg.out / "sensitivity.json", rows)
    return rows


def strip_volatile(manifest: Mapping) -> dict:
    """Manifest without timing fields, for run-to-run comparison."""
    doc = copy.deepcopy(dict(manifest))
    for key in VOLATILE_FIELDS:
        doc.pop(key, None)
    return doc
