import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import CLPU_REFERENCE
from restoration_attack.clpu import (
    CLPU_TABLE,
    ClpuParams,
    apply_clpu,
    clpu_power,
    lookup_params,
    time_of_day,
)
from restoration_attack.errors import IndexOutOfRange, RestorationAttackError, TimeBeforePickup


@pytest.mark.parametrize(
    "key, expected",
    [
        (("residential", "morning"), (1.33, 11.5)),
        (("commercial", "night"), (0.70, 9.4)),
        (("residential", "evening"), (0.62, 9.8)),
    ],
)
def test_lookup_matches_parameter_table(key, expected):
    assert lookup_params(*key) == expected


def test_full_table():
    assert CLPU_TABLE == CLPU_REFERENCE


def test_unknown_entry():
    with pytest.raises(RestorationAttackError):
        lookup_params("industrial", "morning")


def test_power_at_pickup_instant():
    assert clpu_power(100.0, ClpuParams(1.33, 11.5), 0.0) == pytest.approx(233.0, abs=1e-9)


def test_power_decays_to_steady_state():
    assert clpu_power(100.0, ClpuParams(1.33, 11.5), 1e5) == pytest.approx(100.0, abs=1e-9)


def test_power_after_one_time_constant():
    assert clpu_power(100.0, ClpuParams(1.33, 11.5, pickup_time=5.0), 16.5) == pytest.approx(
        100.0 * (1 + 1.33 * math.exp(-1)), abs=1e-12
    )


def test_time_before_pickup():
    with pytest.raises(TimeBeforePickup):
        clpu_power(100.0, ClpuParams(1.33, 11.5, pickup_time=10.0), 9.0)


def test_apply_to_flat_forecast():
    out = apply_clpu(np.full(4, 100.0), 0, ClpuParams(1.33, 11.5))
    assert out[0] == pytest.approx(233.0)
    assert out[1] == pytest.approx(100 * (1 + 1.33 * math.exp(-60 / 11.5)))


def test_apply_zeroes_before_pickup_and_passes_through_without_overshoot():
    series = np.array([5.0, 6.0, 7.0, 8.0])
    out = apply_clpu(series, 2, ClpuParams(0.0, 10.0))
    assert out.tolist() == [0.0, 0.0, 7.0, 8.0]


def test_apply_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        apply_clpu(np.ones(3), 3, ClpuParams(1.0, 10.0))


@pytest.mark.parametrize("hour, bucket", [(0, "night"), (5.99, "night"), (6, "morning"), (12, "afternoon"),
                                          (17.5, "afternoon"), (18, "evening"), (23, "evening"), (30, "morning")])
def test_time_of_day_buckets(hour, bucket):
    assert time_of_day(hour) == bucket


@given(
    st.sampled_from(sorted(CLPU_REFERENCE)),
    st.floats(0.0, 1000.0),
    st.floats(0.0, 500.0),
    st.floats(0.0, 500.0),
)
def test_demand_is_bounded_and_non_increasing(key, p0, t1, t2):
    a, tau = CLPU_REFERENCE[key]
    params = ClpuParams(a, tau)
    lo, hi = sorted((t1, t2))
    p_lo, p_hi = clpu_power(p0, params, lo), clpu_power(p0, params, hi)
    assert p0 - 1e-9 <= p_hi <= p_lo + 1e-9 <= (1 + a) * p0 + 2e-9
