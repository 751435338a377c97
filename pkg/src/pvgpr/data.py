"""Hourly solar dataset model: CSV loading, validation, cleaning and hold-out splits."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from pvgpr.errors import (
    AllRowsDroppedError,
    EmptyDatasetError,
    InsufficientDaysError,
    SchemaMismatchError,
)

log = logging.getLogger(__name__)

FEATURES: tuple[str, ...] = (
    "dni",
    "dhi",
    "ghi",
    "temperature_c",
    "zenith_deg",
    "azimuth_deg",
    "cloud_okta",
    "albedo",
)
TARGET = "power_mw"
NUMERIC_COLUMNS: tuple[str, ...] = FEATURES + (TARGET,)
COLUMNS: tuple[str, ...] = ("timestamp",) + NUMERIC_COLUMNS

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"
ONE_HOUR = pd.Timedelta(hours=1)
# relative slack on the nameplate bound for power
CAPACITY_TOLERANCE = 0.01


@dataclass(frozen=True)
class SiteMeta:
    name: str
    capacity_mw: float
    latitude_deg: float = 0.0
    longitude_deg: float = 0.0

    def __post_init__(self):
        if not self.capacity_mw > 0:
            raise ValueError(f"capacity_mw must be > 0, got {self.capacity_mw}")
        if abs(self.latitude_deg) > 90:
            raise ValueError(f"latitude_deg out of range: {self.latitude_deg}")
        if abs(self.longitude_deg) > 180:
            raise ValueError(f"longitude_deg out of range: {self.longitude_deg}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "capacity_mw": self.capacity_mw,
            "latitude_deg": self.latitude_deg,
            "longitude_deg": self.longitude_deg,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SiteMeta":
        return cls(
            name=str(d.get("name", "site")),
            capacity_mw=float(d["capacity_mw"]),
            latitude_deg=float(d.get("latitude_deg", 0.0)),
            longitude_deg=float(d.get("longitude_deg", 0.0)),
        )


@dataclass(frozen=True)
class SampleRecord:
    timestamp: pd.Timestamp
    dni: float
    dhi: float
    ghi: float
    temperature_c: float
    zenith_deg: float
    azimuth_deg: float
    cloud_okta: float
    albedo: float
    power_mw: float


class Dataset:
    """An ordered, hourly, single-site collection of records.

    The underlying frame is private; accessors hand out copies so a Dataset
    can be shared freely between readers.
    """

    resolution = ONE_HOUR

    def __init__(self, site: SiteMeta, frame: pd.DataFrame):
        missing = [c for c in COLUMNS if c not in frame.columns]
        if missing:
            raise SchemaMismatchError(f"frame lacks columns {missing}")
        frame = frame.loc[:, list(COLUMNS)].reset_index(drop=True).copy()
        frame["timestamp"] = pd.to_datetime(frame["timestamp"])
        for c in NUMERIC_COLUMNS:
            frame[c] = frame[c].astype(float)
        ts = frame["timestamp"]
        if len(ts) > 1 and not (ts.diff().iloc[1:] > pd.Timedelta(0)).all():
            raise ValueError("timestamps must be strictly increasing")
        self._site = site
        self._frame = frame

    @property
    def site(self) -> SiteMeta:
        return self._site

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._site == other._site and self._frame.equals(other._frame)

    def __repr__(self) -> str:
        return f"Dataset(site={self._site.name!r}, n={len(self)})"

    @property
    def records(self) -> list[SampleRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[SampleRecord]:
        for row in self._frame.itertuples(index=False):
            yield SampleRecord(*row)

    def column(self, name: str) -> np.ndarray:
        if name == "timestamp":
            return self._frame["timestamp"].to_numpy().copy()
        return self._frame[name].to_numpy(dtype=float).copy()

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return self._frame.loc[:, list(names)].to_numpy(dtype=float)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self._frame["timestamp"])

    @property
    def hour_of_day(self) -> np.ndarray:
        return self.timestamps.hour.to_numpy()

    @property
    def day_of_year(self) -> np.ndarray:
        return self.timestamps.dayofyear.to_numpy()

    @property
    def days(self) -> np.ndarray:
        """Calendar day of each record (midnight timestamps)."""
        return self.timestamps.normalize().to_numpy()

    def subset(self, mask: np.ndarray) -> "Dataset":
        """Records where the boolean ``mask`` is True, order preserved."""
        return Dataset(self._site, self._frame.loc[np.asarray(mask, dtype=bool)])

    def to_csv_text(self) -> str:
        out = self._frame.copy()
        out["timestamp"] = out["timestamp"].dt.strftime(TIMESTAMP_FORMAT)
        return out.to_csv(index=False, lineterminator="\n")

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CSV serialisation plus site metadata."""
        h = hashlib.sha256()
        h.update(repr(sorted(self._site.to_dict().items())).encode())
        h.update(self.to_csv_text().encode())
        return h.hexdigest()


@dataclass
class ValidationReport:
    row_count: int
    missing_cells: list[tuple[int, str]] = field(default_factory=list)
    range_violations: list[tuple[int, str, float]] = field(default_factory=list)
    gap_list: list[tuple[str, str]] = field(default_factory=list)

    @property
    def has_violations(self) -> bool:
        return bool(self.missing_cells or self.range_violations)

    def to_dict(self) -> dict:
        return {
            "row_count": self.row_count,
            "missing_cells": [list(c) for c in self.missing_cells],
            "range_violations": [list(v) for v in self.range_violations],
            "gap_list": [list(g) for g in self.gap_list],
            "counts": {
                "missing_cells": len(self.missing_cells),
                "range_violations": len(self.range_violations),
                "gap_list": len(self.gap_list),
            },
        }


def _parse_float(cell: str) -> float:
    # pandas' vectorised parser is not round-trip exact; float() is
    try:
        return float(cell)
    except ValueError:
        return math.nan


def load_csv(path: str | Path, site: SiteMeta, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read an hourly CSV into a :class:`Dataset`.

    Args:
        path: CSV file with one header row.
        site: metadata attached to the result.
        schema: logical column name -> header name. Unmapped logical columns
            are looked up under their own name.

    Unparseable numeric cells become NaN (reported later as missing). Rows
    whose timestamp cannot be parsed, or which repeat an earlier timestamp,
    are dropped with a warning since they cannot be placed in time.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV does not exist: {path}")
    mapping = {c: c for c in COLUMNS}
    if schema:
        unknown = set(schema) - set(COLUMNS)
        if unknown:
            raise SchemaMismatchError(f"schema maps unknown logical columns {sorted(unknown)}")
        mapping.update(schema)

    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    absent = [f"{logical} (header {header!r})" for logical, header in mapping.items()
              if header not in raw.columns]
    if absent:
        raise SchemaMismatchError(f"{path}: missing columns {', '.join(absent)}")

    frame = pd.DataFrame({logical: raw[header] for logical, header in mapping.items()})
    frame["timestamp"] = pd.to_datetime(frame["timestamp"].str.strip(), format=TIMESTAMP_FORMAT,
                                        errors="coerce")
    for c in NUMERIC_COLUMNS:
        frame[c] = frame[c].map(_parse_float).astype(float)

    bad_ts = frame["timestamp"].isna()
    if bad_ts.any():
        log.warning("%s: dropping %d rows with unparseable timestamps", path, int(bad_ts.sum()))
        frame = frame.loc[~bad_ts]
    frame = frame.sort_values("timestamp", kind="stable")
    dup = frame["timestamp"].duplicated(keep="first")
    if dup.any():
        log.warning("%s: dropping %d rows with duplicate timestamps", path, int(dup.sum()))
        frame = frame.loc[~dup]
    if frame.empty:
        raise EmptyDatasetError(f"{path}: no valid rows")
    return Dataset(site, frame)


def write_csv(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(d.to_csv_text(), encoding="utf-8")


def _violation_mask(frame: pd.DataFrame, capacity_mw: float) -> pd.DataFrame:
    """Boolean frame, True where a present value breaks a record invariant."""
    v = pd.DataFrame(False, index=frame.index, columns=list(NUMERIC_COLUMNS))
    for c in ("dni", "dhi", "ghi"):
        v[c] = frame[c] < 0
    v["zenith_deg"] = (frame["zenith_deg"] < 0) | (frame["zenith_deg"] > 180)
    v["azimuth_deg"] = (frame["azimuth_deg"] < 0) | (frame["azimuth_deg"] >= 360)
    okta = frame["cloud_okta"]
    v["cloud_okta"] = (okta < 0) | (okta > 9) | (okta != np.round(okta))
    cap = capacity_mw * (1 + CAPACITY_TOLERANCE)
    v[TARGET] = (frame[TARGET] < 0) | (frame[TARGET] > cap)
    # NaN compares False everywhere above, so missing cells never double-count
    return v


def _gaps(ts: pd.Series) -> list[tuple[pd.Timestamp, pd.Timestamp]]:
    out = []
    diffs = ts.diff()
    for i in np.flatnonzero((diffs > ONE_HOUR).to_numpy()):
        out.append((ts.iloc[i - 1] + ONE_HOUR, ts.iloc[i] - ONE_HOUR))
    return out


def validate_dataset(d: Dataset) -> ValidationReport:
    frame = d._frame
    missing = frame[list(NUMERIC_COLUMNS)].isna()
    rows, cols = np.nonzero(missing.to_numpy())
    missing_cells = [(int(r), NUMERIC_COLUMNS[c]) for r, c in zip(rows, cols)]

    viol = _violation_mask(frame, d.site.capacity_mw).to_numpy()
    rows, cols = np.nonzero(viol)
    values = frame[list(NUMERIC_COLUMNS)].to_numpy()
    range_violations = [(int(r), NUMERIC_COLUMNS[c], float(values[r, c])) for r, c in zip(rows, cols)]

    gap_list = [(a.strftime(TIMESTAMP_FORMAT), b.strftime(TIMESTAMP_FORMAT))
                for a, b in _gaps(frame["timestamp"])]
    return ValidationReport(len(frame), missing_cells, range_violations, gap_list)


@dataclass(frozen=True)
class CleanPolicy:
    """``drop`` removes bad rows; ``interpolate`` fills runs of at most
    ``max_gap_h`` hours linearly and drops whatever remains."""

    kind: str = "drop"
    max_gap_h: int = 0

    def __post_init__(self):
        if self.kind not in ("drop", "interpolate"):
            raise ValueError(f"unknown clean policy {self.kind!r}")
        if self.kind == "interpolate" and self.max_gap_h < 1:
            raise ValueError("interpolate policy needs max_gap_h >= 1")

    @classmethod
    def interpolate(cls, max_gap_h: int) -> "CleanPolicy":
        return cls("interpolate", int(max_gap_h))

    @classmethod
    def from_dict(cls, d: Mapping | str | None) -> "CleanPolicy":
        if d is None:
            return cls()
        if isinstance(d, str):
            return cls(d)
        return cls(d.get("kind", "drop"), int(d.get("max_gap_h", 0)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "max_gap_h": self.max_gap_h}


def _fillable_runs(isnan: np.ndarray, max_len: int) -> np.ndarray:
    """Mask of NaN positions lying in interior runs of length <= max_len."""
    fill = np.zeros_like(isnan)
    n = len(isnan)
    i = 0
    while i < n:
        if not isnan[i]:
            i += 1
            continue
        j = i
        while j < n and isnan[j]:
            j += 1
        if i > 0 and j < n and j - i <= max_len:
            fill[i:j] = True
        i = j
    return fill


def clean(d: Dataset, policy: CleanPolicy | None = None) -> Dataset:
    policy = policy or CleanPolicy()
    frame = d._frame.copy()
    bad = _violation_mask(frame, d.site.capacity_mw)
    for c in NUMERIC_COLUMNS:
        frame.loc[bad[c], c] = np.nan

    if policy.kind == "interpolate" and len(frame):
        grid = pd.date_range(frame["timestamp"].iloc[0], frame["timestamp"].iloc[-1], freq="h")
        frame = frame.set_index("timestamp").reindex(grid)
        hours = np.arange(len(grid), dtype=float)
        for c in NUMERIC_COLUMNS:
            col = frame[c].to_numpy(dtype=float)
            isnan = np.isnan(col)
            fill = _fillable_runs(isnan, policy.max_gap_h)
            if not fill.any():
                continue
            known = ~isnan
            if c == "azimuth_deg":
                unwrapped = np.degrees(np.unwrap(np.radians(col[known])))
                col[fill] = np.mod(np.interp(hours[fill], hours[known], unwrapped), 360.0)
            else:
                col[fill] = np.interp(hours[fill], hours[known], col[known])
            if c == "cloud_okta":
                col[fill] = np.round(col[fill])
            frame[c] = col
        frame = frame.rename_axis("timestamp").reset_index()

    keep = ~frame[list(NUMERIC_COLUMNS)].isna().any(axis=1)
    frame = frame.loc[keep]
    if frame.empty:
        raise AllRowsDroppedError("cleaning removed every record")
    return Dataset(d.site, frame)


def split_holdout(d: Dataset, n_days: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``n_days`` whole calendar days chosen uniformly at random."""
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    days = d.days
    unique_days = np.unique(days)
    if len(unique_days) <= n_days:
        raise InsufficientDaysError(
            f"dataset spans {len(unique_days)} days; holding out {n_days} would leave no training data")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(unique_days, size=n_days, replace=False))
    in_holdout = np.isin(days, chosen)
    return d.subset(~in_holdout), d.subset(in_holdout)
