import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavckm.channel import (SPEED_OF_LIGHT, LinkBudgetParams, dbm_to_mw,
                            expected_gain_los_model, free_space_loss_db,
                            los_probability, mw_to_dbm, rate_bps, true_gain)
from uavckm.geometry import segment_blocked

from conftest import box, make_world

PARAMS = LinkBudgetParams()


def fsl_oracle(d):
    # independent of the library helper on purpose
    return 20.0 * math.log10(4.0 * math.pi * 2e9 * d / 299792458.0)


def test_true_gain_los_100m():
    world = make_world([])
    gain = true_gain((0, 0, 250), (0, 0, 150), world, PARAMS)
    assert gain == pytest.approx(-(fsl_oracle(100.0) + 1.0), abs=1e-9)
    assert gain == pytest.approx(-79.4687, abs=1e-3)


def test_nlos_is_exactly_excess_loss_lower():
    wall = make_world([box((490, 0, 0), (510, 1000, 250))], bounds=(1000, 1000, 300))
    uav = (100.0, 500.0, 100.0)
    gu = (900.0, 500.0, 50.0)
    assert segment_blocked(uav, gu, wall)
    blocked_gain = true_gain(uav, gu, wall, PARAMS)
    open_world = make_world([], bounds=(1000, 1000, 300))
    clear_gain = true_gain(uav, gu, open_world, PARAMS)
    assert blocked_gain == pytest.approx(clear_gain - 19.0, abs=1e-12)


def test_doubling_distance_costs_6dB():
    world = make_world([])
    g1 = true_gain((0, 0, 250), (0, 0, 150), world, PARAMS)
    g2 = true_gain((0, 0, 350), (0, 0, 150), world, PARAMS)
    assert g1 - g2 == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)


def test_distance_guard():
    world = make_world([])
    with pytest.raises(ValueError, match="guard"):
        true_gain((0, 0, 250), (0, 0, 249.5), world, PARAMS)


def test_gain_strictly_decreasing_in_distance():
    world = make_world([])
    ds = np.linspace(10, 700, 50)
    gains = [true_gain((0, 0, 250 + d), (0, 0, 250), world,
                       LinkBudgetParams()) for d in ds]
    assert all(a > b for a, b in zip(gains, gains[1:]))


def test_los_probability_zenith_value():
    # directly overhead: elevation pi/2
    p = los_probability((0, 0, 500), (0, 0, 100), a=9.61, b=0.16)
    expected = 1.0 / (1.0 + 9.61 * math.exp(-0.16 * (math.pi / 2 - 9.61)))
    assert p == pytest.approx(expected, rel=1e-12)


def test_los_probability_degenerate_b0():
    for geom in [((0, 0, 500), (100, 200, 0)), ((5, 5, 300), (400, 0, 50))]:
        assert los_probability(*geom, a=4.0, b=0.0) == pytest.approx(0.2)


def test_los_probability_monotone_in_elevation():
    gu = (0.0, 0.0, 0.0)
    heights = np.linspace(50, 700, 40)
    ps = [los_probability((100, 0, h), gu) for h in heights]
    assert all(b >= a for a, b in zip(ps, ps[1:]))


def test_expected_gain_mixture():
    # a=1, b=0 pins the LoS probability at 0.5 everywhere
    gain = expected_gain_los_model((0, 0, 250), (0, 0, 150), PARAMS, a=1.0, b=0.0)
    assert gain == pytest.approx(-(fsl_oracle(100.0) + 10.5), abs=1e-9)


def test_expected_gain_matches_manual_mixture():
    rng = np.random.default_rng(2)
    for _ in range(100):
        uav = rng.uniform((0, 0, 250), (1000, 1000, 750))
        gu = rng.uniform((0, 0, 0), (1000, 1000, 250))
        d = np.linalg.norm(uav - gu)
        if d < 1:
            continue
        p = los_probability(uav, gu)
        manual = -(p * (fsl_oracle(d) + 1.0) + (1 - p) * (fsl_oracle(d) + 20.0))
        assert expected_gain_los_model(uav, gu, PARAMS) == pytest.approx(manual, abs=1e-9)


def test_rate_at_38dB_snr():
    # received -66 dBm over sigma2 -104 dBm
    rate = rate_bps(gain_db=-92.0, p_t_dbm=26.0, params=PARAMS)
    assert rate == pytest.approx(1e6 * math.log2(1.0 + 10.0 ** 3.8), rel=1e-12)
    assert rate == pytest.approx(12.62e6, rel=1e-3)


def test_rate_zero_power():
    assert rate_bps(-80.0, float("-inf"), PARAMS) == 0.0
    assert rate_bps(-80.0, mw_to_dbm(0.0), PARAMS) == 0.0


def test_rate_at_snr_one():
    # received power equal to the noise floor
    rate = rate_bps(gain_db=PARAMS.sigma2_dbm - 26.0, p_t_dbm=26.0, params=PARAMS)
    assert rate == pytest.approx(PARAMS.bandwidth_hz, rel=1e-12)


def test_rate_increasing_in_received_power():
    rates = [rate_bps(g, 26.0, PARAMS) for g in np.linspace(-140, -40, 60)]
    assert all(r >= 0 for r in rates)
    assert all(b > a for a, b in zip(rates, rates[1:]))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-12.0, max_value=6.0))
def test_db_round_trip(exp10):
    mw = 10.0 ** exp10
    back = dbm_to_mw(mw_to_dbm(mw))
    assert abs(back - mw) / mw <= 1e-9


def test_wall_bisected_world_grid():
    # full-height wall: every cross-wall pair is NLoS, same-side pairs LoS
    wall = make_world([box((495, 0, 0), (505, 1000, 200))],
                      bounds=(1000, 1000, 200), uav_min_height=100)
    xs_left = np.linspace(50, 450, 5)
    xs_right = np.linspace(550, 950, 5)
    ys = np.linspace(100, 900, 5)
    for xl in xs_left:
        for xr in xs_right:
            for y in ys:
                assert segment_blocked((xl, y, 150), (xr, y, 50), wall)
    for x1 in xs_left:
        for x2 in xs_left:
            for y in ys:
                assert not segment_blocked((x1, y, 150), (x2, y, 50), wall)


def test_params_validation():
    with pytest.raises(ValueError):
        LinkBudgetParams(eps_los_db=5.0, eps_nlos_db=3.0)


def test_speed_of_light_constant():
    assert SPEED_OF_LIGHT == 299792458.0
    assert free_space_loss_db(100.0, 2e9) == pytest.approx(fsl_oracle(100.0), abs=1e-12)
