"""Error metrics, k-fold cross-validation and confidence intervals on forecast errors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from pvgpr import gpr
from pvgpr.errors import (
    EmptyInputError,
    LengthMismatchError,
    PvGprError,
    TooFewPointsError,
    UnsupportedLevelError,
)

Z_TABLE: dict[float, float] = {0.90: 1.645, 0.95: 1.960, 0.99: 2.576}


@dataclass(frozen=True)
class MetricSet:
    rmse_mw: float
    mae_mw: float
    mse_mw2: float
    rmse_pct: float
    mae_pct: float
    # MSE normalised by base^2, in percent
    mse_pct: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricSet":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    @classmethod
    def average(cls, items: Sequence["MetricSet"]) -> "MetricSet":
        """Arithmetic mean of each metric; n_points is the total."""
        if not items:
            raise EmptyInputError("no metric sets to average")
        names = [f for f in cls.__dataclass_fields__ if f != "n_points"]
        vals = {f: float(np.mean([getattr(m, f) for m in items])) for f in names}
        return cls(**vals, n_points=sum(m.n_points for m in items))


def metrics(actual, predicted, base_mw: float) -> MetricSet:
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if len(a) != len(p):
        raise LengthMismatchError(f"{len(a)} actual vs {len(p)} predicted")
    if len(a) == 0:
        raise EmptyInputError("metrics need at least one point")
    if not base_mw > 0:
        raise ValueError("normalisation base must be > 0")
    err = a - p
    mse = float(np.mean(err * err))
    rmse = math.sqrt(mse)
    mae = float(np.mean(np.abs(err)))
    return MetricSet(rmse, mae, mse, 100.0 * rmse / base_mw, 100.0 * mae / base_mw,
                     100.0 * mse / base_mw ** 2, len(a))


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle 0..n-1 and cut into k contiguous folds, larger folds first."""
    if k < 2 or n < k:
        raise TooFewPointsError(f"cannot split {n} points into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass(frozen=True, eq=False)
class CvResult:
    per_fold: list[MetricSet]
    mean: MetricSet
    fold_assignments: list[np.ndarray]
    # out-of-fold predictions aligned with the input order
    predictions: np.ndarray = field(repr=False)
    variances: np.ndarray = field(repr=False)
    hyperparams: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.per_fold)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "per_fold": [m.to_dict() for m in self.per_fold],
            "mean": self.mean.to_dict(),
            "fold_sizes": [len(f) for f in self.fold_assignments],
            "hyperparams": self.hyperparams,
        }


def cross_validate(X, y, gpr_opts: gpr.FitOptions | None = None, k: int = 5, seed: int = 0,
                   base_mw: float = 1.0) -> CvResult:
    """Fit on k-1 folds, score the held-out fold, for every fold.

    Errors raised while fitting a fold are re-raised with the fold number in
    the message.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y):
        raise LengthMismatchError(f"{len(X)} inputs vs {len(y)} outputs")
    folds = kfold_split(len(y), k, seed)
    pred = np.empty(len(y))
    var = np.empty(len(y))
    per_fold = []
    hps = []
    for i, test in enumerate(folds):
        train = np.ones(len(y), dtype=bool)
        train[test] = False
        try:
            model = gpr.fit(X[train], y[train], gpr_opts)
        except PvGprError as exc:
            raise type(exc)(f"fold {i + 1}/{k}: {exc}") from exc
        p = gpr.predict(model, X[test])
        pred[test] = p.mean
        var[test] = p.variance
        per_fold.append(metrics(y[test], p.mean, base_mw))
        hps.append(model.hp.to_dict())
    return CvResult(per_fold, MetricSet.average(per_fold), folds, pred, var, hps)


@dataclass(frozen=True)
class ErrorDistribution:
    eps_bar: float
    sigma_eps: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_normal(errors) -> ErrorDistribution:
    e = np.asarray(errors, dtype=float).ravel()
    if len(e) < 2:
        raise TooFewPointsError("need at least two errors to fit a normal")
    return ErrorDistribution(float(e.mean()), float(e.std(ddof=1)), len(e))


def z_star(level: float) -> float:
    for lvl, z in Z_TABLE.items():
        if abs(level - lvl) < 1e-9:
            return z
    raise UnsupportedLevelError(f"confidence level {level} not in {sorted(Z_TABLE)}")


@dataclass(frozen=True)
class ConfidenceInterval:
    level: float
    z_star: float
    # interval for the mean error (standard error of the mean)
    lo_mw: float
    hi_mw: float
    # population spread: where individual errors fall
    spread_lo_mw: float
    spread_hi_mw: float

    def to_dict(self) -> dict:
        return asdict(self)


def confidence_interval(dist: ErrorDistribution, level: float = 0.95) -> ConfidenceInterval:
    if dist.n < 2:
        raise TooFewPointsError("interval needs n >= 2")
    z = z_star(level)
    half = z * dist.sigma_eps / math.sqrt(dist.n)
    spread = z * dist.sigma_eps
    return ConfidenceInterval(level, z, dist.eps_bar - half, dist.eps_bar + half,
                              dist.eps_bar - spread, dist.eps_bar + spread)
