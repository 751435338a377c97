"""Gaussian-process regression with a Matérn 5/2 kernel and constant mean.

Hyperparameters live on a log10 scale: length scale ``10**theta_l``, signal
amplitude ``10**theta_f`` and noise variance ``sigma2``. The constant-mean
coefficient ``beta`` is profiled out of the likelihood in closed form, so the
optimizer only sees the kernel and noise parameters.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform

from pvgpr.errors import (
    ArtifactCorruptError,
    ConstantColumnError,
    DimensionMismatchError,
    OptimizerFailureError,
    SingularKernelError,
    TooFewPointsError,
)

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)
NOISE_FLOOR = 1e-8
# tolerance on Cholesky reconstruction and solve residual
SOLVE_TOL = 1e-8
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
MIN_TRAIN_POINTS = 5
# search box (standardised units) for log10 length scale, log10 amplitude, log10 noise
THETA_L_BOUNDS = (-3.0, 3.0)
THETA_F_BOUNDS = (-3.0, 1.0)
LOG_NOISE_BOUNDS = (-8.0, 1.0)
_PREDICT_CHUNK = 2048


@dataclass(frozen=True)
class KernelHyperparams:
    theta_l: float | tuple[float, ...]
    theta_f: float
    sigma2: float

    def __post_init__(self):
        if isinstance(self.theta_l, (list, tuple, np.ndarray)):
            object.__setattr__(self, "theta_l", tuple(float(t) for t in self.theta_l))
        else:
            object.__setattr__(self, "theta_l", float(self.theta_l))
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        object.__setattr__(self, "sigma2", max(float(self.sigma2), NOISE_FLOOR))
        object.__setattr__(self, "theta_f", float(self.theta_f))

    @property
    def ard(self) -> bool:
        return isinstance(self.theta_l, tuple)

    @property
    def length_scale(self) -> float | np.ndarray:
        if self.ard:
            return 10.0 ** np.asarray(self.theta_l)
        return 10.0 ** self.theta_l

    @property
    def signal_var(self) -> float:
        return 10.0 ** (2.0 * self.theta_f)

    def to_vector(self) -> np.ndarray:
        tl = list(self.theta_l) if self.ard else [self.theta_l]
        return np.array(tl + [self.theta_f, math.log10(self.sigma2)])

    @classmethod
    def from_vector(cls, p, ard: bool) -> "KernelHyperparams":
        p = np.asarray(p, dtype=float)
        tl = tuple(p[:-2]) if ard else float(p[0])
        return cls(tl, float(p[-2]), max(10.0 ** float(p[-1]), NOISE_FLOOR))

    def to_dict(self) -> dict:
        return {"theta_l": list(self.theta_l) if self.ard else self.theta_l,
                "theta_f": self.theta_f, "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KernelHyperparams":
        return cls(d["theta_l"], d["theta_f"], d["sigma2"])


def _matern_from_r(r: np.ndarray, signal_var: float) -> np.ndarray:
    s = SQRT5 * r
    return signal_var * (1.0 + s + (5.0 / 3.0) * r * r) * np.exp(-s)


def _scale(X: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    ls = hp.length_scale
    if hp.ard and len(ls) != X.shape[1]:
        raise DimensionMismatchError(f"{len(ls)} length scales for {X.shape[1]} features")
    return X / ls


def matern52(u, v, hp: KernelHyperparams) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape:
        raise DimensionMismatchError(f"point shapes differ: {u.shape} vs {v.shape}")
    diff = _scale((u - v)[None, :], hp)[0]
    return float(_matern_from_r(np.sqrt(np.dot(diff, diff)), hp.signal_var))


def build_kernel_matrix(X, hp: KernelHyperparams) -> np.ndarray:
    """Symmetric T x T Matérn matrix; the upper triangle is mirrored exactly."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(X)
    if n == 1:
        return np.array([[hp.signal_var]])
    K = squareform(_matern_from_r(pdist(_scale(X, hp)), hp.signal_var))
    np.fill_diagonal(K, hp.signal_var)
    return K


def cross_kernel(X1, X2, hp: KernelHyperparams) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1]:
        raise DimensionMismatchError(f"{X1.shape[1]} vs {X2.shape[1]} features")
    return _matern_from_r(cdist(_scale(X1, hp), _scale(X2, hp)), hp.signal_var)


def jittered_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, escalating diagonal jitter on failure.

    Returns the factor and the jitter that was finally added.
    """
    for jitter in JITTER_LADDER:
        M = A if jitter == 0.0 else A + jitter * np.eye(len(A))
        try:
            return cholesky(M, lower=True, check_finite=False), jitter
        except LinAlgError:
            continue
    raise SingularKernelError(f"Cholesky failed with jitter up to {JITTER_LADDER[-1]:g}")


@dataclass(frozen=True)
class _Solved:
    L: np.ndarray
    jitter: float
    beta: float
    alpha: np.ndarray
    lml: float


def _solve(X: np.ndarray, y: np.ndarray, hp: KernelHyperparams,
           dist: np.ndarray | None = None) -> _Solved:
    if dist is not None and not hp.ard:
        # cached condensed distances of the isotropic case
        K = squareform(_matern_from_r(dist / hp.length_scale, hp.signal_var))
        np.fill_diagonal(K, hp.signal_var)
    else:
        K = build_kernel_matrix(X, hp)
    K[np.diag_indices_from(K)] += hp.sigma2
    if not np.all(np.isfinite(K)):
        raise SingularKernelError("kernel matrix has non-finite entries")
    L, jitter = jittered_cholesky(K)
    t = len(y)
    z1 = solve_triangular(L, np.ones(t), lower=True, check_finite=False)
    zy = solve_triangular(L, y, lower=True, check_finite=False)
    beta = float(np.dot(z1, zy) / np.dot(z1, z1))
    zr = zy - beta * z1
    alpha = solve_triangular(L.T, zr, lower=False, check_finite=False)
    lml = -0.5 * float(np.dot(zr, zr)) - 0.5 * t * LOG_2PI - float(np.sum(np.log(np.diag(L))))
    return _Solved(L, jitter, beta, alpha, lml)


def concentrated_beta(X, y, hp: KernelHyperparams) -> float:
    """Generalised-least-squares constant mean for fixed kernel parameters."""
    return _solve(np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(y, dtype=float), hp).beta


def log_marginal_likelihood(X, y, hp: KernelHyperparams) -> float:
    """Log marginal likelihood with beta replaced by its profiled optimum."""
    return _solve(np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(y, dtype=float), hp).lml


@dataclass(frozen=True)
class Standardizer:
    """z-scores for inputs and output. Inactive (constant) input columns are dropped."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    active: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, constant_columns: str = "raise") -> "Standardizer":
        x_mean = X.mean(axis=0)
        x_std = X.std(axis=0, ddof=1)
        active = x_std > 0
        if not active.all():
            if constant_columns == "raise":
                raise ConstantColumnError(f"constant feature columns: {np.flatnonzero(~active).tolist()}")
            if not active.any():
                raise ConstantColumnError("every feature column is constant")
        x_std = np.where(active, x_std, 1.0)
        y_mean = float(y.mean())
        y_std = float(y.std(ddof=1))
        if not y_std > 0:
            # constant output: the model reduces to beta = y_mean
            y_std = 1.0
        return cls(x_mean, x_std, y_mean, y_std, active)

    @property
    def n_features(self) -> int:
        return len(self.x_mean)

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DimensionMismatchError(f"expected {self.n_features} features, got {X.shape[1]}")
        return ((X - self.x_mean) / self.x_std)[:, self.active]

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std, "active": self.active.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(np.asarray(d["x_mean"], dtype=float), np.asarray(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]), np.asarray(d["active"], dtype=bool))


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 8
    max_evals: int = 2000
    ard: bool = False
    seed: int = 0
    xatol: float = 1e-6
    # hyperparameters are tuned on a random subset of at most this many points
    # (None = all); the posterior always conditions on every point
    max_opt_points: int | None = None
    # "raise" or "drop"
    constant_columns: str = "raise"

    def __post_init__(self):
        if self.n_starts < 1 or self.max_evals < 1:
            raise ValueError("n_starts and max_evals must be >= 1")
        if self.constant_columns not in ("raise", "drop"):
            raise ValueError("constant_columns must be 'raise' or 'drop'")
        if self.max_opt_points is not None and self.max_opt_points < MIN_TRAIN_POINTS:
            raise ValueError(f"max_opt_points must be >= {MIN_TRAIN_POINTS}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "FitOptions":
        d = dict(d or {})
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class TrainedGpr:
    standardizer: Standardizer
    X: np.ndarray
    y: np.ndarray
    hp: KernelHyperparams
    beta: float
    chol_L: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float
    fit_report: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.y)

    def to_dict(self) -> dict:
        payload = {
            "standardizer": self.standardizer.to_dict(),
            "hyperparams": self.hp.to_dict(),
            "beta": self.beta,
            "lml": self.lml,
            "jitter": self.jitter,
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "fit_report": self.fit_report,
        }
        payload["checksum"] = _checksum(payload)
        return payload

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainedGpr":
        """Rebuild a model, recomputing and verifying its Cholesky factor."""
        try:
            body = {k: v for k, v in d.items() if k != "checksum"}
            if d.get("checksum") != _checksum(body):
                raise ArtifactCorruptError("checksum mismatch")
            std = Standardizer.from_dict(d["standardizer"])
            hp = KernelHyperparams.from_dict(d["hyperparams"])
            X = np.asarray(d["X"], dtype=float).reshape(len(d["y"]), -1)
            y = np.asarray(d["y"], dtype=float)
        except ArtifactCorruptError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactCorruptError(f"malformed model artifact: {exc}") from exc
        if X.shape[1] != int(std.active.sum()):
            raise ArtifactCorruptError("training inputs disagree with standardizer")
        s = _solve(X, y, hp)
        _verify(X, y, hp, s)
        if not (math.isclose(s.beta, float(d["beta"]), rel_tol=1e-9, abs_tol=1e-12)
                and math.isclose(s.lml, float(d["lml"]), rel_tol=1e-9, abs_tol=1e-9)):
            raise ArtifactCorruptError("recomputed beta/likelihood disagree with stored values")
        return cls(std, X, y, hp, s.beta, s.L, s.alpha, s.jitter, s.lml, dict(d.get("fit_report", {})))


def _checksum(payload: Mapping) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _system(X: np.ndarray, hp: KernelHyperparams, jitter: float) -> np.ndarray:
    A = build_kernel_matrix(X, hp)
    A[np.diag_indices_from(A)] += hp.sigma2 + jitter
    return A


def _residual(A: np.ndarray, y: np.ndarray, s: _Solved) -> float:
    """Solve residual relative to max(|y|, 1)."""
    return float(np.linalg.norm(A @ s.alpha - (y - s.beta)) / max(np.linalg.norm(y), 1.0))


def _verify(X: np.ndarray, y: np.ndarray, hp: KernelHyperparams, s: _Solved) -> None:
    A = _system(X, hp, s.jitter)
    rec = np.linalg.norm(s.L @ s.L.T - A) / np.linalg.norm(A)
    res = _residual(A, y, s)
    if rec > SOLVE_TOL:
        raise ArtifactCorruptError(f"Cholesky reconstruction error {rec:.2e}")
    if res > SOLVE_TOL:
        raise ArtifactCorruptError(f"alpha residual {res:.2e} (relative to |y|)")


def _median_distance(X: np.ndarray, rng: np.random.Generator, cap: int = 1000) -> float:
    if len(X) > cap:
        X = X[rng.choice(len(X), size=cap, replace=False)]
    d = pdist(X)
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def _optimize(X: np.ndarray, y: np.ndarray, opts: FitOptions, rng: np.random.Generator):
    q = X.shape[1]
    n_l = q if opts.ard else 1
    med = _median_distance(X, rng)
    lo, hi = math.log10(0.1 * med), math.log10(10.0 * med)
    dist = None if opts.ard else pdist(X)

    def negll(p):
        try:
            hp = KernelHyperparams.from_vector(p, opts.ard)
            val = _solve(X, y, hp, dist).lml
        except (SingularKernelError, ValueError, FloatingPointError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    bounds = [THETA_L_BOUNDS] * n_l + [THETA_F_BOUNDS, LOG_NOISE_BOUNDS]
    lo, hi = np.clip([lo, hi], *THETA_L_BOUNDS)
    starts = []
    best = None
    for i in range(opts.n_starts):
        theta_l = rng.uniform(lo, hi, size=n_l)
        x0 = np.concatenate([theta_l, [0.0, math.log10(0.01)]])
        # step inward from x0 so every vertex starts inside the box
        steps = np.where(x0 + 0.5 <= np.array([b[1] for b in bounds]), 0.5, -0.5)
        simplex = np.vstack([x0, x0 + np.diag(steps)])
        with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
            res = minimize(negll, x0, method="Nelder-Mead", bounds=bounds,
                           options={"maxfev": opts.max_evals, "xatol": opts.xatol,
                                    "fatol": 1e-10, "initial_simplex": simplex})
        lml = -float(res.fun)
        starts.append({"start": x0.tolist(), "params": res.x.tolist(), "lml": lml,
                       "nfev": int(res.nfev), "converged": bool(res.success)})
        if np.isfinite(lml) and (best is None or lml > best[1]):
            best = (res.x.copy(), lml, i)
    if best is None:
        raise OptimizerFailureError("no optimizer start reached a finite likelihood")
    return best, starts


def _conditioned_solve(X: np.ndarray, y: np.ndarray, hp: KernelHyperparams):
    """Solve, lifting sigma^2 a decade at a time while the residual misses SOLVE_TOL.

    A near-zero noise on many points can leave the system too ill-conditioned
    for the tolerance. Returns the (possibly raised) hyperparameters, the solve
    and the number of decades added.
    """
    s = _solve(X, y, hp)
    raised = 0
    while _residual(_system(X, hp, s.jitter), y, s) > SOLVE_TOL:
        if hp.sigma2 >= 10.0 ** LOG_NOISE_BOUNDS[1]:
            raise SingularKernelError("cannot reach solve tolerance by raising the noise")
        hp = replace(hp, sigma2=hp.sigma2 * 10.0)
        s = _solve(X, y, hp)
        raised += 1
    return hp, s, raised


def fit(X_raw, y_raw, opts: FitOptions | None = None) -> TrainedGpr:
    """Standardise, maximise the profiled likelihood, and condition on the data."""
    opts = opts or FitOptions()
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    y_raw = np.asarray(y_raw, dtype=float).ravel()
    if len(X_raw) != len(y_raw):
        raise DimensionMismatchError(f"{len(X_raw)} inputs vs {len(y_raw)} outputs")
    t = len(y_raw)
    if t < MIN_TRAIN_POINTS:
        raise TooFewPointsError(f"GPR fit needs >= {MIN_TRAIN_POINTS} points, got {t}")
    std = Standardizer.fit(X_raw, y_raw, opts.constant_columns)
    X = std.transform(X_raw)
    y = std.transform_y(y_raw)
    rng = np.random.default_rng(opts.seed)

    if np.all(y == y[0]):
        # flat output: the profiled likelihood grows without bound as the
        # signal amplitude shrinks, so skip the search and pin the floors
        hp = KernelHyperparams(0.0, -4.0, NOISE_FLOOR)
        report = {"starts": [], "best_start": None, "n_opt_points": 0, "constant_output": True}
    else:
        if opts.max_opt_points is not None and t > opts.max_opt_points:
            idx = np.sort(rng.choice(t, size=opts.max_opt_points, replace=False))
            Xo, yo = X[idx], y[idx]
        else:
            Xo, yo = X, y
        (p, lml_opt, i_best), starts = _optimize(Xo, yo, opts, rng)
        hp = KernelHyperparams.from_vector(p, opts.ard)
        report = {"starts": starts, "best_start": i_best, "n_opt_points": len(yo),
                  "lml_opt": lml_opt, "constant_output": False}

    hp, s, raised = _conditioned_solve(X, y, hp)
    report["noise_decades_raised"] = raised
    report["jitter"] = s.jitter
    log.debug("gpr fit T=%d q=%d hp=%s lml=%.4f", t, X.shape[1], hp, s.lml)
    return TrainedGpr(std, X, y, hp, s.beta, s.L, s.alpha, s.jitter, s.lml, report)


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    includes_noise: bool

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def predict(m: TrainedGpr, Xq_raw, include_noise: bool = False) -> Prediction:
    Xq = m.standardizer.transform(Xq_raw)
    means = []
    variances = []
    for start in range(0, len(Xq), _PREDICT_CHUNK):
        chunk = Xq[start:start + _PREDICT_CHUNK]
        Ks = cross_kernel(m.X, chunk, m.hp)
        means.append(m.beta + Ks.T @ m.alpha)
        v = solve_triangular(m.chol_L, Ks, lower=True, check_finite=False)
        var = m.hp.signal_var - np.einsum("ij,ij->j", v, v)
        if include_noise:
            var = var + m.hp.sigma2
        variances.append(np.maximum(var, 0.0))
    mean_s = np.concatenate(means) if means else np.zeros(0)
    var_s = np.concatenate(variances) if variances else np.zeros(0)
    return Prediction(m.standardizer.inverse_y(mean_s), var_s * m.standardizer.y_std ** 2, include_noise)
