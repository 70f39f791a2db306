"""
Delay engine: capacity, mean interference, the truncated-Poisson load factor
and the coupled delay fixed point.
"""
import math
from types import SimpleNamespace

import numpy as np
import pytest

from analytic import (AnalyticError, DelaySolution, SlotState, capacity, mean_interference, palm_user_factor,
                      solve_delays, solve_single_tier, truncated_poisson_factor, utilization)
from numerics import FixedPointSettings
from scenario import RadioParams, load_scenario


def _validation_state(s):
    cfg = s.configuration
    return SlotState(s.regions[0].user_density_per_slot[0], cfg.mbs_density[0, 0], cfg.sbs_density[0],
                     cfg.wps_weight_phi[0, 0])


def test_truncated_poisson_factor():
    y = np.array([0.0, 1e-10, 1e-3, 0.5, 3.0, 50.0])
    tp = truncated_poisson_factor(y)
    assert tp[0] == 1.0
    assert np.all(tp >= np.maximum(1.0, y))
    assert np.all(np.diff(tp) > 0)
    assert truncated_poisson_factor(1e-3) == pytest.approx(1e-3 / -math.expm1(-1e-3), rel=1e-12)
    assert truncated_poisson_factor(50.0) == pytest.approx(50.0, rel=1e-12)


def test_capacity(radio):
    r = np.array([1.0, 10.0, 100.0])
    rate = capacity(r, radio.power_static_w, 0.0, radio)
    assert np.all(np.diff(rate) < 0)
    snr = radio.power_static_w * 10.0 ** -radio.path_loss_alpha / radio.noise_power_w
    assert rate[1] == pytest.approx(radio.channel_bandwidth_hz * math.log2(1.0 + snr))
    with pytest.raises(AnalyticError):
        capacity(0.0, radio.power_static_w, 0.0, radio)


def test_capacity_decreases_with_interference(radio):
    assert capacity(20.0, 10.0, 1e-12, radio) < capacity(20.0, 10.0, 0.0, radio)


def test_mean_interference_scaling(radio):
    st = SlotState(1e-2, 1e-4, 2e-4)
    base = mean_interference(10.0, 1e-4, 2e-4, st, radio)
    # r^(2 - alpha) with alpha = 3
    assert mean_interference(20.0, 1e-4, 2e-4, st, radio) == pytest.approx(base / 2.0)
    assert mean_interference(10.0, 2e-4, 4e-4, st, radio) == pytest.approx(2.0 * base)
    assert mean_interference(10.0, 0.0, 0.0, st, radio) == 0.0


def test_mean_interference_closed_form(radio):
    st = SlotState(1e-2, 1e-4, 2e-4)
    r, tau_m, tau_s = 15.0, 3e-4, 5e-4
    expected = (2.0 * math.pi * r ** -1.0 / (3 * 1.0 * 1e-3)
                * (10.0 * tau_m * 1e-4 + 10.0 * tau_s * 2e-4))
    assert mean_interference(r, tau_m, tau_s, st, radio) == pytest.approx(expected, rel=1e-12)


def test_mean_interference_diverges_for_alpha_two():
    radio = SimpleNamespace(path_loss_alpha=2.0, reuse_factor_k=3, target_delay_tau0_s=1e-3,
                            power_mobile_w=1.0, power_static_w=1.0, reference_gain=1.0)
    with pytest.raises(AnalyticError, match="diverges"):
        mean_interference(10.0, 1e-4, 1e-4, SlotState(1e-2, 1e-4, 1e-4), radio)


@pytest.mark.parametrize("kwargs", [
    {"lambda_u": 0.0, "lambda_m": 1e-4, "lambda_s": 1e-4},
    {"lambda_u": 1e-2, "lambda_m": 1e-4, "lambda_s": 0.0},
    {"lambda_u": 1e-2, "lambda_m": 0.0, "lambda_s": 0.0},
    {"lambda_u": 1e-2, "lambda_m": 1e-4, "lambda_s": 1e-4, "phi": 0.0},
    {"lambda_u": math.nan, "lambda_m": 1e-4, "lambda_s": 1e-4},
])
def test_slot_state_validation(kwargs):
    with pytest.raises(AnalyticError):
        SlotState(**kwargs)


def test_validation_fixed_point_converges(validation):
    st = _validation_state(validation)
    solution = solve_delays(st, validation.radio)
    assert solution.converged
    assert solution.residual <= FixedPointSettings().rel_tol
    assert solution.tau_bar_m > 0 and solution.tau_bar_s > 0
    assert solution.util_s == pytest.approx(utilization(solution.tau_bar_s, validation.radio))
    assert solution.residual_history[-1] == solution.residual


def test_delays_grow_with_user_density(radio):
    low = solve_delays(SlotState(1e-3, 1e-4, 2e-4), radio)
    high = solve_delays(SlotState(1e-2, 1e-4, 2e-4), radio)
    assert high.tau_bar_s > low.tau_bar_s
    assert high.tau_bar_m > low.tau_bar_m


def test_static_delay_falls_with_static_density(radio):
    delays = [solve_delays(SlotState(1e-2, 0.0, lam), radio).tau_bar_s for lam in (1e-4, 3e-4, 1e-3)]
    assert delays[0] > delays[1] > delays[2]


def test_backhaul_load_raises_static_delay(radio):
    without = solve_delays(SlotState(1e-2, 1e-4, 3e-4, phi=1e6), radio)
    with_bh = solve_delays(SlotState(1e-2, 1e-4, 3e-4, phi=0.1), radio)
    assert with_bh.tau_bar_s > without.tau_bar_s


def test_single_tier_matches_two_tier_solver(radio):
    single = solve_single_tier(1e-2, 3e-4, radio)
    double = solve_delays(SlotState(1e-2, 0.0, 3e-4), radio)
    assert single.converged
    assert math.isnan(single.tau_bar_m) and math.isnan(single.util_m)
    assert single.tau_bar_s == pytest.approx(double.tau_bar_s, rel=1e-6)


def test_sparse_users_warn(radio, caplog):
    with caplog.at_level("WARNING"):
        solve_delays(SlotState(1e-4, 1e-4, 2e-4), radio)
    assert "one-user-per-cell" in caplog.text


def test_non_converged_solve_is_reported(radio):
    solution = solve_delays(SlotState(1e-2, 1e-4, 2e-4), radio, FixedPointSettings(max_iters=1))
    assert not solution.converged
    assert solution.iterations == 1


def test_feasible_ignores_absent_tier():
    assert DelaySolution(math.nan, 1e-4, math.nan, 0.9, True, 0.0, 3).feasible
    assert not DelaySolution(1e-4, 2e-4, 0.5, 1.2, True, 0.0, 3).feasible


@pytest.mark.parametrize("lambda_s", [2e-5, 5e-5])
def test_runaway_delays_are_reported_not_raised(lambda_s):
    # At tau0 = 10 us these static densities cannot carry the load: the
    # interference feedback drives the iterate to overflow.
    radio = RadioParams(target_delay_tau0_s=1e-5)
    two_tier = solve_delays(SlotState(0.01818, 0.0, lambda_s), radio)
    single = solve_single_tier(0.01818, lambda_s, radio)
    assert not two_tier.converged
    assert not single.converged


# Per-bit delays (us) the calibrated validation setups are tuned against: static, moving.
REFERENCE_DELAYS_US = {1: (334.0, 437.0), 2: (150.0, 403.0), 3: (274.0, 350.0)}


@pytest.mark.parametrize("setup", [1, 2, 3])
def test_validation_delays_near_reference(setup, fixtures_dir):
    s = load_scenario(fixtures_dir / f"validation_setup{setup}.json")
    solution = solve_delays(_validation_state(s), s.radio)
    static_us, moving_us = REFERENCE_DELAYS_US[setup]
    assert solution.converged
    assert solution.tau_bar_m * 1e6 == pytest.approx(moving_us, rel=0.2)
    # With equal powers both tiers see the same cells and the static tier also
    # carries backhaul, so the static reference is reachable only when both
    # tolerance bands overlap.
    assert solution.tau_bar_s >= solution.tau_bar_m
    if 1.2 * static_us >= 0.8 * moving_us:
        assert solution.tau_bar_s * 1e6 == pytest.approx(static_us, rel=0.2)


def test_palm_user_count_adds_the_typical_user(validation):
    st = _validation_state(validation)
    truncated = solve_delays(st, validation.radio)
    palm = solve_delays(st, validation.radio, user_count="palm")
    assert palm.converged
    assert truncated.tau_bar_m < palm.tau_bar_m < 1.2 * truncated.tau_bar_m
    assert truncated.tau_bar_s < palm.tau_bar_s
    assert palm_user_factor(np.array([0.0, 2.0])) == pytest.approx([1.0, 3.0])
    with pytest.raises(AnalyticError, match="user count"):
        solve_delays(st, validation.radio, user_count="uniform")


@pytest.mark.parametrize("lambda_u", [1e-3, 1e-2, 1e-1])
@pytest.mark.parametrize("total_density", [1.79e-4, 6.78e-4, 1.2e-3])
def test_fixed_point_contracts(lambda_u, total_density, radio):
    solution = solve_delays(SlotState(lambda_u, 0.5 * total_density, 0.5 * total_density), radio)
    assert solution.converged
    assert solution.residual <= 1e-9
    tail = np.asarray(solution.residual_history[5:])
    assert np.all(tail[1:] <= tail[:-1])
