"""Cold load pickup: exponential demand overshoot after re-energization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import IndexOutOfRange, RestorationAttackError, TimeBeforePickup

LOAD_TYPES = ("residential", "commercial")
TIMES_OF_DAY = ("morning", "afternoon", "evening", "night")

# (overshoot, decay minutes) per load type and restoration time of day
CLPU_TABLE = {
    ("residential", "morning"): (1.33, 11.5),
    ("residential", "afternoon"): (1.03, 34.0),
    ("residential", "evening"): (0.62, 9.8),
    ("residential", "night"): (0.96, 10.3),
    ("commercial", "morning"): (0.62, 144.1),
    ("commercial", "afternoon"): (0.51, 31.4),
    ("commercial", "evening"): (0.24, 20.8),
    ("commercial", "night"): (0.70, 9.4),
}


@dataclass(frozen=True)
class ClpuParams:
    overshoot: float
    decay_minutes: float
    pickup_time: float = 0.0  # minutes on the caller's clock

    def __post_init__(self):
        if self.overshoot < 0 or self.decay_minutes <= 0:
            raise RestorationAttackError("CLPU needs overshoot >= 0 and decay > 0")


def lookup_params(load_type: str, restoration_time: str) -> tuple[float, float]:
    try:
        return CLPU_TABLE[(load_type, restoration_time)]
    except KeyError:
        raise RestorationAttackError(
            f"no CLPU entry for ({load_type!r}, {restoration_time!r})"
        ) from None


def time_of_day(hour: int | float | datetime) -> str:
    """Bucket a clock hour: night 00-06, morning 06-12, afternoon 12-18, evening 18-24."""
    if isinstance(hour, datetime):
        hour = hour.hour + hour.minute / 60
    h = float(hour) % 24
    if h < 6:
        return "night"
    if h < 12:
        return "morning"
    if h < 18:
        return "afternoon"
    return "evening"


def clpu_power(p0: float, params: ClpuParams, t: float) -> float:
    """Demand at time ``t`` (minutes) for steady-state demand ``p0``."""
    dt = t - params.pickup_time
    if dt < 0:
        raise TimeBeforePickup(f"t={t} precedes pickup at {params.pickup_time}")
    return p0 * (1.0 + params.overshoot * math.exp(-dt / params.decay_minutes))


def clpu_multiplier(overshoot: float, decay_minutes: float, elapsed_minutes: float) -> float:
    return 1.0 + overshoot * math.exp(-elapsed_minutes / decay_minutes)


def apply_clpu(series, pickup_hour: int, params: ClpuParams, step_minutes: float = 60.0):
    """Zero the series before pickup and inflate it afterwards.

    Each bucket uses the value at its start, so bucket ``pickup_hour`` gets
    the full ``1 + overshoot`` factor.
    """
    series = np.asarray(series, dtype=float)
    if not 0 <= pickup_hour < len(series):
        raise IndexOutOfRange(f"pickup hour {pickup_hour} outside series of {len(series)}")
    out = np.zeros_like(series)
    k = np.arange(len(series) - pickup_hour)
    factor = 1.0 + params.overshoot * np.exp(-step_minutes * k / params.decay_minutes)
    out[pickup_hour:] = series[pickup_hour:] * factor
    return out
