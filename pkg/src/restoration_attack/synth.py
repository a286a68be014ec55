"""Synthetic hourly load/weather profiles standing in for building datasets."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import ConfigError
from .forecast import write_dataset_csv


@dataclass(frozen=True)
class ProfileSpec:
    name: str
    load_type: str
    base_kw: float
    daily_amp: float  # fraction of base
    peak_hour: float
    weekend_factor: float
    temp_coef: float  # fraction of base per degC at the previous hour
    humidity_coef: float  # fraction of base per % humidity at the previous hour
    wind_coef: float  # fraction of base per m/s at the previous hour
    noise: float  # fraction of base


PROFILES = {
    p.name: p
    for p in (
        ProfileSpec("FullSrvcRestaurant", "commercial", 120.0, 0.55, 18.5, 1.15, 0.030, 0.004, -0.010, 0.010),
        ProfileSpec("MidriseApartment", "commercial", 90.0, 0.35, 19.5, 1.05, 0.022, 0.003, -0.006, 0.010),
        ProfileSpec("QuickSrvcRestaurant", "commercial", 70.0, 0.45, 12.5, 1.10, 0.025, 0.003, -0.008, 0.010),
        ProfileSpec("SmallHotel", "commercial", 100.0, 0.30, 20.0, 1.08, 0.028, 0.004, -0.009, 0.010),
        ProfileSpec("BASE", "residential", 3.0, 0.40, 19.0, 1.05, 0.020, 0.002, -0.006, 0.012),
        ProfileSpec("HIGH", "residential", 4.5, 0.45, 19.0, 1.08, 0.026, 0.003, -0.008, 0.012),
        ProfileSpec("LOW", "residential", 2.0, 0.35, 19.0, 1.03, 0.016, 0.002, -0.005, 0.012),
    )
}

START = datetime(2024, 7, 1, tzinfo=timezone.utc)


def _ar1(rng, n, phi, sigma):
    out = np.zeros(n)
    e = rng.normal(0.0, sigma, n)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + e[i]
    return out


def synth_series(seed: int, days: int, profile_kind: str, start: datetime = START):
    """Hourly rows ``(timestamp, load_kw, temp_c, humidity_pct, wind_mps, wind_deg)``.

    Load has daily and weekly shape plus a component driven by the previous
    hour's weather, so lagged weather carries real signal.
    """
    if days < 30:
        raise ConfigError("synthetic datasets need at least 30 days")
    if profile_kind not in PROFILES:
        raise ConfigError(f"unknown profile {profile_kind!r}")
    spec = PROFILES[profile_kind]
    rng = np.random.default_rng(seed)
    n = days * 24
    hours = np.arange(n)
    hod = hours % 24
    seasonal = 26.0 + 3.0 * np.sin(2 * np.pi * hours / (24 * 365))
    temp = seasonal + 5.0 * np.sin(2 * np.pi * (hod - 9) / 24) + _ar1(rng, n, 0.6, 1.6)
    humidity = np.clip(62.0 - 2.0 * (temp - seasonal) + _ar1(rng, n, 0.6, 4.0), 5.0, 100.0)
    wind = np.abs(3.5 + 1.0 * np.sin(2 * np.pi * (hod - 14) / 24) + _ar1(rng, n, 0.5, 1.2))
    wind_dir = np.mod(200.0 + np.cumsum(rng.normal(0.0, 12.0, n)), 360.0)

    weekday = ((hours // 24) + START.weekday()) % 7
    shape = 1.0 + spec.daily_amp * np.cos(2 * np.pi * (hod - spec.peak_hour) / 24)
    shape = np.where(weekday >= 5, shape * spec.weekend_factor, shape)
    lag = lambda v: np.concatenate([[v[0]], v[:-1]])  # noqa: E731
    weather = (
        spec.temp_coef * (lag(temp) - 26.0)
        + spec.humidity_coef * (lag(humidity) - 62.0)
        + spec.wind_coef * (lag(wind) - 3.5)
    )
    load = spec.base_kw * (shape + weather + rng.normal(0.0, spec.noise, n))
    load = np.maximum(load, 0.05 * spec.base_kw)
    stamps = [start + timedelta(hours=int(h)) for h in hours]
    return list(zip(stamps, load, temp, humidity, wind, wind_dir))


def synth_dataset(seed: int, days: int, profile_kind: str, path) -> str:
    series = synth_series(seed, days, profile_kind)
    write_dataset_csv(path, series)
    return str(path)
