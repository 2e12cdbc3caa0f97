import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fastretrain.errors import ConfigError
from fastretrain.scheduler import RateSchedule, active_count, no_conv_plan, plan_epoch, rate_at

TRANSFER = "0:1.0,0.25:0.8,0.5:0.6,0.75:0.4"


def test_transfer_schedule_start_and_end():
    s = RateSchedule.parse(TRANSFER, 8)
    assert rate_at(s, 0) == 1.0
    assert rate_at(s, 6) == 0.4


def test_transfer_schedule_full_sequence():
    s = RateSchedule.parse(TRANSFER, 8)
    assert [rate_at(s, e) for e in range(8)] == [1.0, 1.0, 0.8, 0.8, 0.6, 0.6, 0.4, 0.4]


def test_scratch_schedule_step_points():
    s = RateSchedule.parse("0:1.0,0.5:0.9,0.75:0.6", 90)
    assert rate_at(s, 44) == 1.0 and rate_at(s, 45) == 0.9
    assert rate_at(s, 67) == 0.9 and rate_at(s, 68) == 0.6


def test_constant_schedule():
    s = RateSchedule.parse("0:1.0", 5)
    assert all(rate_at(s, e) == 1.0 for e in range(5))


def test_fraction_product_rounding():
    # 0.3 * 10 is 3.0000000000000004 in binary floating point
    s = RateSchedule.parse("0:1.0,0.3:0.5", 10)
    assert rate_at(s, 3) == 0.5 and rate_at(s, 2) == 1.0


def test_rate_at_out_of_range():
    s = RateSchedule.parse("0:1", 4)
    with pytest.raises(IndexError):
        rate_at(s, 4)
    with pytest.raises(IndexError):
        rate_at(s, -1)


@pytest.mark.parametrize(
    "text",
    ["", "0.1:1.0", "0:1,0.5:0.8,0.5:0.6", "0:1.2", "0:1,1.5:0.5", "0:-0.1", "0;1", "a:b"],
)
def test_invalid_schedules(text):
    with pytest.raises(ConfigError):
        RateSchedule.parse(text, 8)


def test_schedule_format_roundtrip():
    s = RateSchedule.parse(TRANSFER, 8)
    assert RateSchedule.parse(s.format(), 8) == s


def test_plan_full_rate():
    p = plan_epoch(10, 1.0, 0, 0)
    assert p.active_layers == frozenset(range(10)) and p.l_i == 0


def test_plan_rate_04():
    p = plan_epoch(10, 0.4, 0, 3)
    assert (p.l_a, p.l_i) == (4, 6) and len(p.active_layers) == 4


def test_plan_zero_rate():
    p = plan_epoch(5, 0.0, 0, 0)
    assert p.active_layers == frozenset() and p.l_i == 5


def test_plan_is_deterministic():
    a = plan_epoch(7, 0.6, 1234, 5)
    assert a == plan_epoch(7, 0.6, 1234, 5)
    assert a.l_a == 4


def test_plan_varies_with_epoch():
    sets = {plan_epoch(7, 0.6, 1234, e).active_layers for e in range(30)}
    assert len(sets) > 1


def test_plan_marginals_uniform():
    trials = 10_000
    counts = np.zeros(7)
    for seed in range(trials):
        for i in plan_epoch(7, 0.6, seed, 0).active_layers:
            counts[i] += 1
    p = 4 / 7
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma)
    assert stats.chisquare(counts).pvalue > 0.01


def test_round_half_up():
    assert active_count(0.5, 1) == 1
    assert active_count(0.25, 2) == 1
    assert active_count(0.75, 2) == 2
    assert active_count(0.6, 7) == 4
    assert active_count(0.0, 9) == 0 and active_count(1.0, 9) == 9


def test_plan_preconditions():
    with pytest.raises(ValueError):
        plan_epoch(0, 0.5, 0, 0)
    with pytest.raises(ValueError):
        plan_epoch(3, 1.5, 0, 0)


def test_no_conv_plan():
    p = no_conv_plan(2)
    assert p.l_a == p.l_i == 0 and p.l_c == 0


@given(st.integers(1, 64), st.floats(0, 1), st.integers(0, 2**31), st.integers(0, 1000))
def test_counting_identity(l_c, rate, seed, epoch):
    p = plan_epoch(l_c, rate, seed, epoch)
    assert p.l_a + p.l_i == l_c
    assert p.l_a == len(p.active_layers)
    assert all(0 <= i < l_c for i in p.active_layers)
    assert abs(p.l_a - rate * l_c) <= 0.5 + 1e-9


def test_expected_workload_monotone():
    s = RateSchedule.parse(TRANSFER, 12)
    expected = [active_count(rate_at(s, e), 5) for e in range(12)]
    assert all(b <= a for a, b in zip(expected, expected[1:]))
