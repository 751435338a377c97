"""A reproducible synthetic plant-year used for demos and end-to-end checks.

The plant has four operating regimes that differ in how power responds to
weather: night (no output), low-sun ramps with incidence-angle losses, open
daytime running into inverter clipping, and a scheduled export cap on
warm-season afternoons.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from pvgpr.data import COLUMNS, Dataset, SiteMeta

SYNTHETIC_SITE = SiteMeta("synthetic", capacity_mw=30.0, latitude_deg=39.74, longitude_deg=-105.18)
HOURS_PER_YEAR = 8760
# fraction of capacity at which the inverters clip
CLIP_FRACTION = 0.80
CURTAIL_FRACTION = 0.35
CURTAIL_HOURS = (12, 16)
CURTAIL_DAYS = (121, 273)


def _solar_position(doy: np.ndarray, hour: np.ndarray, lat_deg: float):
    """Zenith and azimuth (degrees from north) at the middle of each hour."""
    decl = np.radians(23.45) * np.sin(2 * np.pi * (284 + doy) / 365.0)
    omega = np.radians(15.0 * (hour + 0.5 - 12.0))
    lat = np.radians(lat_deg)
    cos_z = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(omega)
    zen = np.arccos(np.clip(cos_z, -1.0, 1.0))
    sin_z = np.maximum(np.sin(zen), 1e-9)
    cos_az = (np.sin(decl) - np.sin(lat) * cos_z) / (np.cos(lat) * sin_z)
    az = np.degrees(np.arccos(np.clip(cos_az, -1.0, 1.0)))
    az = np.where(omega > 0, 360.0 - az, az) % 360.0
    return np.degrees(zen), az, np.clip(cos_z, 0.0, None)


def synthetic_frame(seed: int = 0, year: int = 2021, site: SiteMeta = SYNTHETIC_SITE) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    ts = pd.date_range(f"{year}-01-01T00:00", periods=HOURS_PER_YEAR, freq="h")
    doy = ts.dayofyear.to_numpy()
    hour = ts.hour.to_numpy()
    zen, az, cos_z = _solar_position(doy, hour, site.latitude_deg)
    up = cos_z > 0.0

    # Haurwitz clear-sky irradiance
    ghi_clear = np.where(up, 1098.0 * cos_z * np.exp(-0.057 / np.maximum(cos_z, 1e-3)), 0.0)
    # mostly clear skies with a slowly varying daily index and mild hourly jitter
    n_days = HOURS_PER_YEAR // 24
    daily = 0.93 + 0.05 * np.tanh(np.cumsum(rng.normal(0, 0.4, n_days)) / 4.0)
    kt = np.clip(np.repeat(daily, 24) + rng.normal(0, 0.02, HOURS_PER_YEAR), 0.7, 1.0)
    ghi = ghi_clear * kt
    diffuse_frac = np.clip(0.12 + 0.9 * (1.0 - kt), 0.1, 0.6)
    dhi = ghi * diffuse_frac
    dni = np.where(cos_z > 0.05, (ghi - dhi) / np.maximum(cos_z, 0.05), 0.0)
    okta = np.clip(np.round((1.0 - kt) * 25 + rng.normal(0, 0.5, HOURS_PER_YEAR)), 0, 8)

    season = np.sin(2 * np.pi * (doy - 105) / 365.0)
    diurnal = np.sin(2 * np.pi * (hour - 9) / 24.0)
    temp = 10.0 + 13.0 * season + 6.0 * diurnal + rng.normal(0, 1.0, HOURS_PER_YEAR)

    # plane-of-array proxy: tilted array gains on low winter sun
    poa = ghi * (1.0 + 0.35 * np.clip(-season, 0, None)) + 0.1 * dhi
    cell_t = temp + 0.03 * poa
    dc = site.capacity_mw * (poa / 1000.0) * (1.0 - 0.004 * (cell_t - 25.0))
    # ramp regime: reflection losses at high zenith
    iam = np.clip(1.0 - 0.6 * np.clip((zen - 65.0) / 25.0, 0.0, 1.0) ** 2, 0.0, 1.0)
    dc *= iam
    # clipping regime: soft knee into the inverter limit
    limit = CLIP_FRACTION * site.capacity_mw
    ac = limit * np.tanh(dc / limit)
    # curtailment regime: export cap on warm-season afternoons
    curtailed = (hour >= CURTAIL_HOURS[0]) & (hour <= CURTAIL_HOURS[1]) \
        & (doy >= CURTAIL_DAYS[0]) & (doy <= CURTAIL_DAYS[1])
    cap = CURTAIL_FRACTION * site.capacity_mw
    ac = np.where(curtailed, np.minimum(ac, cap), ac)
    # dispatch noise is larger while the plant is held at a setpoint
    sd = np.where(curtailed, 0.6, 0.01 * ac + 0.05)
    power = np.where(up, np.clip(ac + rng.normal(0, 1.0, HOURS_PER_YEAR) * sd, 0.0, site.capacity_mw), 0.0)

    return pd.DataFrame({
        "timestamp": ts,
        "dni": np.maximum(dni, 0.0),
        "dhi": np.maximum(dhi, 0.0),
        "ghi": np.maximum(ghi, 0.0),
        "temperature_c": temp,
        "zenith_deg": zen,
        "azimuth_deg": az,
        "cloud_okta": okta,
        "albedo": np.full(HOURS_PER_YEAR, 0.2),
        "power_mw": power,
    })[list(COLUMNS)]


def synthetic_dataset(seed: int = 0) -> Dataset:
    return Dataset(SYNTHETIC_SITE, synthetic_frame(seed))
