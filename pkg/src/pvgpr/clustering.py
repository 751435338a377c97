"""k-means on (hour-of-day, power) and forecast-time cluster routing.

Cluster ids are 1-based everywhere in the public API.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from pvgpr.errors import DegenerateDataError, TooFewPointsError

HOURS = 24
DAYS = 366
SEASON_HALF_WINDOW = 15


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 4
    max_iter: int = 300
    n_restarts: int = 10
    seed: int = 0
    tol: float = 1e-10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")

    def to_dict(self) -> dict:
        return {"k": self.k, "max_iter": self.max_iter, "n_restarts": self.n_restarts,
                "seed": self.seed, "tol": self.tol}

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ClusterConfig":
        d = dict(d or {})
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray  # (K, 2) in normalised space
    norm_min: np.ndarray
    norm_max: np.ndarray
    assignments: np.ndarray  # 1-based ids of the training points
    inertia_standard: float
    inertia_weighted: float
    config: ClusterConfig
    # modal cluster per (hour, day_of_year - 1); 0 marks an empty window
    hour_cluster_table: np.ndarray | None = None
    hour_fallback: np.ndarray | None = None
    inertia_trace: tuple[float, ...] = field(default=())

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def norm_params(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.norm_min, self.norm_max)]

    def normalize(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.norm_min) / _span(self.norm_min, self.norm_max)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k + 1)[1:]

    def to_dict(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "norm_params": self.norm_params,
            "inertia_standard": self.inertia_standard,
            "inertia_weighted": self.inertia_weighted,
            "config": self.config.to_dict(),
            "cluster_sizes": self.cluster_sizes().tolist(),
            "hour_cluster_table": None if self.hour_cluster_table is None
            else self.hour_cluster_table.tolist(),
            "hour_fallback": None if self.hour_fallback is None else self.hour_fallback.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterModel":
        norm = np.asarray(d["norm_params"], dtype=float)
        table = d.get("hour_cluster_table")
        fallback = d.get("hour_fallback")
        return cls(
            centroids=np.asarray(d["centroids"], dtype=float),
            norm_min=norm[:, 0].copy(),
            norm_max=norm[:, 1].copy(),
            assignments=np.zeros(0, dtype=int),
            inertia_standard=float(d["inertia_standard"]),
            inertia_weighted=float(d["inertia_weighted"]),
            config=ClusterConfig.from_dict(d["config"]),
            hour_cluster_table=None if table is None else np.asarray(table, dtype=int),
            hour_fallback=None if fallback is None else np.asarray(fallback, dtype=int),
        )


def _span(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    return np.where(span > 0, span, 1.0)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # explicit differences keep exact ties exact, unlike the |x|^2 - 2x.c + |c|^2 expansion
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(float)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / counts[:, None]


def _repair_empty(labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    own = d2[np.arange(len(labels)), labels]
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        movable = counts[labels] > 1
        idx = int(np.argmax(np.where(movable, own, -np.inf)))
        labels[idx] = j
        own[idx] = 0.0
    return labels


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    k = len(centers)
    prev = None
    trace = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = _repair_empty(np.argmin(d2, axis=1), d2, k)
        if prev is not None and np.array_equal(labels, prev):
            break
        new_centers = _means(x, labels, k)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        prev = labels
        trace.append(float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum()))
        if shift <= tol:
            break
    d2 = _sq_dists(x, centers)
    labels = _repair_empty(np.argmin(d2, axis=1), d2, k)
    centers = _means(x, labels, k)
    return centers, labels, trace


def _hartigan_move(x: np.ndarray, labels: np.ndarray, k: int, max_moves: int = 100_000):
    """Single-point transfers that lower the SSE once centroid shifts are counted.

    Moving x from A (size n_A) to B changes the SSE by
    n_B/(n_B+1)|x-c_B|^2 - n_A/(n_A-1)|x-c_A|^2. Lloyd fixpoints can still admit
    such moves, so this escapes some of them. Returns new labels, or None if no
    move helps.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(float)
    centers = _means(x, labels, k)
    idx = np.arange(len(x))
    moved = False
    for _ in range(max_moves):
        d2 = _sq_dists(x, centers)
        own_n = counts[labels]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(own_n > 1, own_n / (own_n - 1) * d2[idx, labels], -np.inf)
        add = counts / (counts + 1) * d2
        add[idx, labels] = np.inf
        delta = add.min(axis=1) - remove
        i = int(np.argmin(delta))
        # relative margin keeps rounding noise from cycling
        if not delta[i] < -1e-12 * max(remove[i], 1e-300):
            break
        a, b = labels[i], int(np.argmin(add[i]))
        centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1)
        centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1)
        counts[a] -= 1
        counts[b] += 1
        labels[i] = b
        moved = True
    return labels if moved else None


def _local_search(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    """Lloyd to convergence, then alternate Hartigan transfers and Lloyd until stable."""
    k = len(centers)
    centers, labels, trace = _lloyd(x, centers, max_iter, tol)
    while True:
        moved = _hartigan_move(x, labels, k)
        if moved is None:
            return centers, labels, trace
        centers, labels, more = _lloyd(x, _means(x, moved, k), max_iter, tol)
        trace += more


def _inertias(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    d2 = _sq_dists(x, centers)[np.arange(len(x)), labels]
    k = len(centers)
    per_cluster = np.bincount(labels, weights=d2, minlength=k)
    sizes = np.bincount(labels, minlength=k)
    return float(per_cluster.sum()), float((sizes * per_cluster).sum())


def _circular_window(half: int = SEASON_HALF_WINDOW, period: int = DAYS) -> np.ndarray:
    d = np.arange(period)
    dist = np.abs(d[:, None] - d[None, :])
    return np.minimum(dist, period - dist) <= half


def _modal(counts: np.ndarray) -> np.ndarray:
    """1-based argmax over the last axis (lowest id on ties); 0 where all counts are 0."""
    ids = np.argmax(counts, axis=-1) + 1
    return np.where(counts.sum(axis=-1) > 0, ids, 0)


def _hour_tables(hours: np.ndarray, doy: np.ndarray, labels: np.ndarray, k: int):
    counts = np.zeros((HOURS, DAYS, k), dtype=np.int64)
    np.add.at(counts, (hours, doy - 1, labels), 1)
    window = _circular_window().astype(np.int64)
    windowed = np.einsum("de,hek->hdk", window, counts)
    table = _modal(windowed)
    per_hour = counts.sum(axis=1)
    fallback = _modal(per_hour)
    overall = int(_modal(per_hour.sum(axis=0)))
    fallback = np.where(fallback > 0, fallback, overall)
    return table, fallback


def fit_kmeans(points, cfg: ClusterConfig | None = None,
               day_of_year: Sequence[int] | None = None) -> ClusterModel:
    """Cluster (hour, power) points with multi-restart k-means++ / Lloyd.

    Each restart is polished with Hartigan single-point transfers, which only
    ever lower the objective and end at a Lloyd fixpoint.

    Coordinates are min-max scaled to [0, 1]. When ``day_of_year`` is given
    the per-(hour, season) routing table used by :func:`assign_forecast` is
    built from the training assignments.
    """
    cfg = cfg or ClusterConfig()
    raw = np.atleast_2d(np.asarray(points, dtype=float))
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of (hour, power)")
    n = len(raw)
    if n < cfg.k:
        raise TooFewPointsError(f"{n} points cannot form {cfg.k} clusters")
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    x = (raw - lo) / _span(lo, hi)
    if cfg.k > 1 and len(np.unique(x, axis=0)) < cfg.k:
        raise DegenerateDataError(f"fewer than {cfg.k} distinct points")

    best = None
    for stream in np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts):
        rng = np.random.default_rng(stream)
        centers, labels, trace = _local_search(x, _kmeanspp(x, cfg.k, rng), cfg.max_iter, cfg.tol)
        std, _ = _inertias(x, centers, labels)
        if best is None or std < best[0]:
            best = (std, centers, labels, trace)
    _, centers, labels, trace = best

    # canonical ids: sort centroids by (hour, power)
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    relabel = np.empty(cfg.k, dtype=int)
    relabel[order] = np.arange(cfg.k)
    centers = centers[order]
    labels = relabel[labels]
    std, weighted = _inertias(x, centers, labels)

    table = fallback = None
    if day_of_year is not None:
        doy = np.asarray(day_of_year, dtype=int)
        if len(doy) != n:
            raise ValueError("day_of_year must align with points")
        hours = np.mod(np.rint(raw[:, 0]).astype(int), HOURS)
        table, fallback = _hour_tables(hours, doy, labels, cfg.k)

    return ClusterModel(
        centroids=centers, norm_min=lo, norm_max=hi, assignments=labels + 1,
        inertia_standard=std, inertia_weighted=weighted, config=cfg,
        hour_cluster_table=table, hour_fallback=fallback, inertia_trace=tuple(trace),
    )


def assign(model: ClusterModel, point, normalized: bool = False) -> int:
    """Nearest-centroid id for one (hour, power) point; ties go to the lowest id."""
    p = np.atleast_2d(np.asarray(point, dtype=float)) if normalized else model.normalize(point)
    return int(np.argmin(_sq_dists(p, model.centroids)[0])) + 1


def assign_many(model: ClusterModel, points) -> np.ndarray:
    return np.argmin(_sq_dists(model.normalize(points), model.centroids), axis=1) + 1


def assign_forecast(model: ClusterModel, hour: int, day_of_year: int) -> int:
    """Route a forecast hour to a cluster without knowing its power.

    Uses the modal training cluster among records at the same hour within a
    +/-15 day (circular) window; falls back to that hour's modal cluster
    over the whole year.
    """
    if model.hour_cluster_table is None:
        raise ValueError("model was fitted without day_of_year; no routing table")
    h = int(hour) % HOURS
    d = int(day_of_year)
    if not 1 <= d <= DAYS:
        raise ValueError(f"day_of_year out of range: {day_of_year}")
    cid = int(model.hour_cluster_table[h, d - 1])
    return cid if cid > 0 else int(model.hour_fallback[h])


def objective(model: ClusterModel, points) -> tuple[float, float]:
    """(standard, N_k-weighted) squared-distance objectives of ``points``
    assigned to their nearest centroid of ``model``."""
    x = model.normalize(points)
    labels = np.argmin(_sq_dists(x, model.centroids), axis=1)
    return _inertias(x, model.centroids, labels)
