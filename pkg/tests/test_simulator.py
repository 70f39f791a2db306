"""
Poisson drops on the torus, association, the replication loop and the
Monte-Carlo oracles for the analytic model.
"""
import math

import numpy as np
import pytest
from scipy import stats

from analytic import SlotState, solve_delays
from backhaul import AREA_VARIANCE_FACTOR, BackhaulContext, bh_delay_cdf, bh_delay_g
from geometry import TierDensities, serving_distance_cdf
from simulator import (SimSettings, SimulationError, associate, measure_slot, run_campaign, sample_ppp,
                       tier_cell_areas_mc, toroidal_distance, voronoi_cell_areas_mc)


def _small(**kwargs):
    values = dict(window_side_m=400.0, replications=3, rng_seed=7, min_expected_bs=1)
    values.update(kwargs)
    return SimSettings(**values)


def test_sample_ppp_shape_and_window():
    points = sample_ppp(1e-3, 500.0, np.random.default_rng(0))
    assert points.ndim == 2 and points.shape[1] == 2
    assert np.all((points >= 0.0) & (points < 500.0))
    assert sample_ppp(0.0, 500.0, np.random.default_rng(0)).shape == (0, 2)
    with pytest.raises(ValueError):
        sample_ppp(-1.0, 500.0, np.random.default_rng(0))


def test_sample_ppp_count_is_poisson():
    rng = np.random.default_rng(1)
    counts = [len(sample_ppp(1e-3, 300.0, rng)) for _ in range(400)]
    assert np.mean(counts) == pytest.approx(90.0, rel=0.05)
    assert np.var(counts) == pytest.approx(90.0, rel=0.25)


def test_toroidal_distance_wraps():
    assert toroidal_distance([1.0, 1.0], [999.0, 1.0], 1000.0) == pytest.approx(2.0)
    assert toroidal_distance([1.0, 1.0], [999.0, 999.0], 1000.0) == pytest.approx(math.hypot(2.0, 2.0))
    assert toroidal_distance([100.0, 100.0], [400.0, 100.0], 1000.0) == pytest.approx(300.0)


def test_associate_uses_power_scaled_distance(unequal_radio):
    # rho_ms = 3^(-1/3) ~ 0.693, so a moving station 6 m away beats a static one 10 m away, 8 m does not.
    users = np.array([[500.0, 500.0]])
    sbs = np.array([[510.0, 500.0]])
    near = associate(users, sbs, np.array([[506.0, 500.0]]), unequal_radio, 1000.0)
    far = associate(users, sbs, np.array([[508.0, 500.0]]), unequal_radio, 1000.0)
    assert near.tier[0] == 1 and near.distance[0] == pytest.approx(6.0)
    assert far.tier[0] == 0 and far.distance[0] == pytest.approx(10.0)


def test_associate_without_stations(radio):
    with pytest.raises(SimulationError):
        associate(np.zeros((3, 2)), np.empty((0, 2)), np.empty((0, 2)), radio, 100.0)


def test_settings_validation():
    with pytest.raises(ValueError):
        SimSettings(replications=0)
    with pytest.raises(ValueError):
        SimSettings(interference_mode="exact")
    with pytest.raises(ValueError, match="unknown"):
        SimSettings.from_dict({"replication": 5})


def test_measure_slot_is_reproducible(radio):
    st = SlotState(3e-3, 2e-4, 4e-4)
    first = measure_slot(st, radio, _small())
    second = measure_slot(st, radio, _small())
    assert first.mean_delay_s == second.mean_delay_s
    assert first.empirical_violation == second.empirical_violation
    other = measure_slot(st, radio, _small(rng_seed=8))
    assert other.mean_delay_s["s"] != first.mean_delay_s["s"]


def test_measure_slot_report(radio):
    st = SlotState(3e-3, 2e-4, 4e-4)
    report = measure_slot(st, radio, _small(keep_samples=True), setup="demo")
    assert report.setup == "demo"
    assert set(report.mean_delay_s) == {"s", "m"}
    for name in ("s", "m"):
        lo, hi = report.ci95[name]
        assert lo <= report.mean_delay_s[name] <= hi
        assert len(report.per_replication[name]) == 3
    assert 0.0 <= report.empirical_violation <= 1.0
    assert len(report.serving_distances) > 0
    assert np.all(report.serving_distances > 0)


def test_static_only_slot_has_no_violation_estimate(radio):
    report = measure_slot(SlotState(3e-3, 0.0, 4e-4), radio, _small())
    assert set(report.mean_delay_s) == {"s"}
    assert math.isnan(report.empirical_violation)
    assert report.samples["mbs_with_users"] == 0


def test_single_replication_has_no_interval(radio, caplog):
    with caplog.at_level("WARNING"):
        report = measure_slot(SlotState(3e-3, 0.0, 4e-4), radio, _small(replications=1))
    assert all(math.isnan(v) for v in report.ci95["s"])
    assert "no confidence interval" in caplog.text


def test_small_window_warns(radio, caplog):
    with caplog.at_level("WARNING"):
        measure_slot(SlotState(3e-3, 0.0, 4e-4), radio, _small(replications=1, min_expected_bs=200))
    assert "edge bias" in caplog.text


def test_voronoi_areas_tile_the_window():
    rng = np.random.default_rng(2)
    points = sample_ppp(1e-3, 300.0, rng)
    areas = voronoi_cell_areas_mc(points, 300.0, rng, samples_per_cell=50)
    assert areas.shape == (len(points),)
    assert np.sum(areas) == pytest.approx(300.0 ** 2)
    with pytest.raises(SimulationError):
        voronoi_cell_areas_mc(np.empty((0, 2)), 300.0, rng)


def test_tier_cell_areas_static_only(radio):
    rng = np.random.default_rng(4)
    sbs = sample_ppp(1e-3, 300.0, rng)
    areas = tier_cell_areas_mc(sbs, np.empty((0, 2)), radio, 300.0, rng, samples=10_000)
    assert areas == {"s": pytest.approx(300.0 ** 2 / len(sbs))}


def test_run_campaign_needs_setups(radio):
    with pytest.raises(ValueError):
        run_campaign([], radio, _small())


def test_run_campaign_rows(radio):
    st = SlotState(3e-3, 2e-4, 4e-4)
    rows = run_campaign([("a", st), ("b", st)], radio, _small(replications=2))
    assert [row.setup for row in rows] == ["a", "b"]
    # Same setup, same replication seeds.
    assert rows[0].simulation.mean_delay_s == rows[1].simulation.mean_delay_s
    assert rows[0].analytic.converged
    assert 0.0 <= rows[0].analytic_violation <= 1.0
    assert set(rows[0].in_ci) == {"s", "m"}


@pytest.mark.slow
def test_serving_distances_follow_analytic_law(radio):
    st = SlotState(1e-3, 3e-4, 3e-4)
    report = measure_slot(st, radio, SimSettings(window_side_m=2000.0, replications=1, keep_samples=True))
    d = TierDensities.from_radio(st.lambda_s, st.lambda_m, radio)
    assert stats.kstest(report.serving_distances, lambda r: serving_distance_cdf(r, d)).pvalue > 0.01


@pytest.mark.slow
def test_cell_area_spread_matches_gamma_approximation():
    rng = np.random.default_rng(12)
    points = sample_ppp(2e-4, 2000.0, rng)
    areas = voronoi_cell_areas_mc(points, 2000.0, rng)
    normalised = areas / areas.mean()
    assert np.var(normalised, ddof=1) == pytest.approx(AREA_VARIANCE_FACTOR, abs=0.06)


@pytest.mark.slow
def test_validation_analytic_delays_inside_simulated_interval(validation):
    cfg = validation.configuration
    st = SlotState(validation.regions[0].user_density_per_slot[0], cfg.mbs_density[0, 0], cfg.sbs_density[0],
                   cfg.wps_weight_phi[0, 0])
    sim = SimSettings.from_dict(validation.settings_block("simulation"))
    assert sim.replications >= 30 and sim.window_side_m >= 2000.0
    row = run_campaign([(validation.name, st)], validation.radio, sim, user_count="palm")[0]
    assert row.in_ci == {"s": True, "m": True}
    assert abs(row.analytic_violation - row.simulation.empirical_violation) <= 0.02

    # The non-empty-cell count leaves out the typical user itself, so it sits below the
    # user-averaged simulation by at most one user per cell.
    truncated = solve_delays(st, validation.radio)
    for name, value in (("s", truncated.tau_bar_s), ("m", truncated.tau_bar_m)):
        lo, hi = row.simulation.ci95[name]
        assert value <= hi
        assert value >= 0.85 * lo


@pytest.mark.slow
def test_backhaul_delay_law_matches_simulated_moving_stations(validation_setup2):
    s = validation_setup2
    cfg = s.configuration
    st = SlotState(s.regions[0].user_density_per_slot[0], cfg.mbs_density[0, 0], cfg.sbs_density[0],
                   cfg.wps_weight_phi[0, 0])
    ctx = BackhaulContext(st, s.radio, solve_delays(st, s.radio))
    sim = SimSettings(window_side_m=2000.0, replications=9, rng_seed=17, keep_samples=True)
    report = measure_slot(st, s.radio, sim)
    distances = report.backhaul_distances
    assert len(distances) >= 10_000
    assert len(report.backhaul_delays) == len(distances)

    ideal = bh_delay_g(distances, ctx)
    assert stats.kstest(ideal, lambda t: bh_delay_cdf(t, ctx)).statistic < 0.05
