"""Pearson correlation study and input feature selection."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from pvgpr.data import FEATURES, TARGET, Dataset
from pvgpr.errors import (
    EmptySelectionError,
    LengthMismatchError,
    TooFewPointsError,
    ZeroVarianceError,
)


def pearson(a, b) -> float:
    """Sample Pearson correlation with the T-1 normalisation, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) != len(b):
        raise LengthMismatchError(f"lengths differ: {len(a)} vs {len(b)}")
    t = len(a)
    if t < 2:
        raise TooFewPointsError("pearson needs at least two samples")
    sa = a.std(ddof=1)
    sb = b.std(ddof=1)
    if sa == 0 or sb == 0:
        raise ZeroVarianceError("constant input has no correlation")
    za = (a - a.mean()) / sa
    zb = (b - b.mean()) / sb
    rho = float(np.dot(za, zb) / (t - 1))
    return min(1.0, max(-1.0, rho))


@dataclass(frozen=True)
class CorrelationReport:
    # None marks a zero-variance feature
    entries: Mapping[str, float | None]
    sample_count: int

    @property
    def undefined(self) -> list[str]:
        return [f for f, r in self.entries.items() if r is None]

    def to_dict(self) -> dict:
        return {"entries": dict(self.entries), "sample_count": self.sample_count,
                "undefined": self.undefined}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorrelationReport":
        return cls(dict(d["entries"]), int(d["sample_count"]))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "rho"])
        for name, rho in self.entries.items():
            w.writerow([name, "" if rho is None else repr(rho)])
        return buf.getvalue()


def correlation_report(d: Dataset) -> CorrelationReport:
    if len(d) < 2:
        raise TooFewPointsError("correlation study needs at least two records")
    power = d.column(TARGET)
    entries: dict[str, float | None] = {}
    for name in FEATURES:
        try:
            entries[name] = pearson(d.column(name), power)
        except ZeroVarianceError:
            entries[name] = None
    return CorrelationReport(entries, len(d))


@dataclass(frozen=True)
class SelectionPolicy:
    threshold: float = 0.10
    force_include: tuple[str, ...] = ("cloud_okta",)
    force_exclude: tuple[str, ...] = ("albedo",)

    def __post_init__(self):
        object.__setattr__(self, "force_include", tuple(self.force_include))
        object.__setattr__(self, "force_exclude", tuple(self.force_exclude))
        unknown = (set(self.force_include) | set(self.force_exclude)) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown features in policy: {sorted(unknown)}")
        clash = set(self.force_include) & set(self.force_exclude)
        if clash:
            raise ValueError(f"features both forced in and out: {sorted(clash)}")

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "force_include": list(self.force_include),
                "force_exclude": list(self.force_exclude)}

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SelectionPolicy":
        d = dict(d or {})
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class FeatureSelection:
    selected: tuple[str, ...]
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)

    @property
    def q(self) -> int:
        return len(self.selected)

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "policy": self.policy.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSelection":
        return cls(tuple(d["selected"]), SelectionPolicy.from_dict(d.get("policy")))


def select_features(report: CorrelationReport | Mapping[str, float | None],
                    policy: SelectionPolicy | None = None) -> FeatureSelection:
    """Keep features with |rho| >= threshold, then apply the forced lists.

    The result follows the canonical feature order regardless of policy.
    """
    policy = policy or SelectionPolicy()
    entries = report.entries if isinstance(report, CorrelationReport) else report
    keep = set(policy.force_include)
    for name, rho in entries.items():
        if rho is not None and not math.isnan(rho) and abs(rho) >= policy.threshold:
            keep.add(name)
    keep -= set(policy.force_exclude)
    selected = tuple(f for f in FEATURES if f in keep)
    if not selected:
        raise EmptySelectionError(f"no feature passes |rho| >= {policy.threshold}")
    return FeatureSelection(selected, policy)

