from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from pvgpr.data import COLUMNS, Dataset, SiteMeta, TIMESTAMP_FORMAT

SITE = SiteMeta("test-site", capacity_mw=30.0, latitude_deg=39.86, longitude_deg=-104.67)


def make_frame(n_hours: int, start: str = "2021-01-01T00:00", seed: int = 0) -> pd.DataFrame:
    """A clean, valid hourly frame with plausible values."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range(start, periods=n_hours, freq="h")
    hour = ts.hour.to_numpy()
    sun = np.clip(np.sin((hour - 6) / 12 * np.pi), 0, None)
    ghi = 900 * sun * rng.uniform(0.6, 1.0, n_hours)
    return pd.DataFrame({
        "timestamp": ts,
        "dni": 0.8 * ghi,
        "dhi": 0.2 * ghi + 5 * sun,
        "ghi": ghi,
        "temperature_c": 10 + 8 * sun + rng.normal(0, 1, n_hours),
        "zenith_deg": 90 - 60 * sun + 30 * (sun == 0),
        "azimuth_deg": (hour * 15.0) % 360,
        "cloud_okta": rng.integers(0, 9, n_hours).astype(float),
        "albedo": rng.uniform(0.15, 0.25, n_hours),
        "power_mw": 0.03 * ghi,
    })[list(COLUMNS)]


def make_dataset(n_hours: int = 48, **kw) -> Dataset:
    return Dataset(SITE, make_frame(n_hours, **kw))


def write_frame(frame: pd.DataFrame, path) -> None:
    out = frame.copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime(TIMESTAMP_FORMAT)
    out.to_csv(path, index=False)


@pytest.fixture
def site() -> SiteMeta:
    return SITE


# ---------------------------------------------------------------- acceptance report
ACCEPTANCE_RESULTS: list[str] = []


def record(criterion: int, title: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance line; printed now and again in the terminal summary."""
    line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'} {title}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
