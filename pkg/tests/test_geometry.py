"""
Exclusion area, the conditional mean cell integrals and the serving-distance law.
"""
import math

import numpy as np
import pytest
from scipy import stats

from geometry import (GeometryError, TierDensities, clear_cache, disk_overlap, exclusion_area,
                      mean_cell_integral_bh, mean_cell_integral_m, mean_cell_integral_s, sample_serving_distance,
                      serving_distance_cdf, serving_distance_pdf)
from numerics import integrate_1d
from simulator import associate, sample_ppp

# Mean area of the Poisson-Voronoi cell that covers a fixed point, in units of 1 / lambda.
COVERING_CELL_MEAN_AREA = 1.2802


def test_disk_overlap_cases():
    assert disk_overlap(1.0, 1.0, 3.0) == 0.0
    assert disk_overlap(2.0, 1.0, 0.5) == pytest.approx(math.pi)
    assert disk_overlap(1.0, 2.0, 0.5) == pytest.approx(math.pi)
    # Two unit disks one radius apart overlap in 2*pi/3 - sqrt(3)/2.
    assert disk_overlap(1.0, 1.0, 1.0) == pytest.approx(2.0 * math.pi / 3.0 - math.sqrt(3.0) / 2.0)


def test_exclusion_area_limits():
    theta = np.linspace(0.0, 2.0 * np.pi, 17)
    assert np.allclose(exclusion_area(0.0, 2.0, theta), 4.0 * np.pi)
    assert np.allclose(exclusion_area(3.0, 0.0, theta), 0.0)


def test_exclusion_area_bounds():
    rng = np.random.default_rng(3)
    r = rng.uniform(0.0, 5.0, 2000)
    x = rng.uniform(0.0, 5.0, 2000)
    theta = rng.uniform(0.0, 2.0 * np.pi, 2000)
    area = exclusion_area(r, x, theta)
    assert np.all(area >= np.maximum(0.0, np.pi * x ** 2 - np.pi * r ** 2) - 1e-9)
    assert np.all(area <= np.pi * x ** 2)


def test_exclusion_area_near_tangency_stays_below_disk_area():
    # Rounding in the lens formula used to push this case just above pi * x^2.
    x = 1.3895
    theta = np.linspace(np.pi / 2.0 - 1e-6, np.pi / 2.0 + 1e-6, 201)
    area = exclusion_area(3.720, x, theta)
    assert np.all(area <= np.pi * x ** 2)
    assert np.all(area >= 0.0)


def test_exclusion_area_inside_user_disk_is_zero():
    # The point (x, -pi/2) with x <= r sees a disk contained in the user's empty disk.
    assert exclusion_area(2.0, 1.0, -np.pi / 2.0) == pytest.approx(0.0, abs=1e-12)


def test_exclusion_area_rejects_bad_input():
    with pytest.raises(GeometryError):
        exclusion_area(math.nan, 1.0, 0.0)
    with pytest.raises(GeometryError):
        exclusion_area(1.0, -1.0, 0.0)


def test_tier_densities_validation():
    with pytest.raises(GeometryError):
        TierDensities(-1e-4, 1e-4)
    with pytest.raises(GeometryError):
        TierDensities(0.0, 0.0)
    d = TierDensities(2e-4, 1e-4, 0.5)
    assert d.effective_density == pytest.approx(2e-4 + 0.25e-4)
    assert d.mbs_fraction == pytest.approx(1.0 / 3.0)


@pytest.mark.parametrize("lambda_s", [1e-5, 3.39e-4, 1e-2])
def test_h_bh_at_zero_is_mean_cell_area(lambda_s):
    assert mean_cell_integral_bh(0.0, lambda_s) == pytest.approx(1.0 / lambda_s, rel=1e-12)


def test_h_bh_increases_with_distance():
    lambda_s = 1e-4
    r = np.linspace(0.0, 2.0, 40) / math.sqrt(lambda_s)
    h = mean_cell_integral_bh(r, lambda_s)
    assert np.all(np.diff(h) > 0)


def test_h_bh_scale_invariance():
    r = np.array([1.0, 10.0, 50.0])
    small, large = 1e-4, 4e-4
    # h(r; lambda) = hhat(r sqrt(lambda)) / lambda
    assert mean_cell_integral_bh(r, small) * small == pytest.approx(
        mean_cell_integral_bh(r / 2.0, large) * large, rel=1e-10)


def test_covering_cell_mean_area(quad):
    # Averaging h_BH over the nearest-station distance gives the cell covering the origin.
    lambda_s = 1e-3

    def integrand(r):
        return mean_cell_integral_bh(r, lambda_s) * 2.0 * math.pi * lambda_s * r * math.exp(-math.pi * lambda_s * r * r)

    mean_area = integrate_1d(integrand, 0.0, 6.0 / math.sqrt(math.pi * lambda_s), quad)
    assert mean_area * lambda_s == pytest.approx(COVERING_CELL_MEAN_AREA, rel=0.02)


def test_h_s_without_moving_tier_equals_h_bh(unequal_radio):
    d = TierDensities.from_radio(3e-4, 0.0, unequal_radio)
    r = np.array([0.0, 5.0, 20.0, 80.0])
    assert np.array_equal(mean_cell_integral_s(r, d), mean_cell_integral_bh(r, 3e-4))


def test_interpolated_matches_exact(quad):
    d = TierDensities(2e-4, 1.3e-4, (1.0 / 3.0) ** (1.0 / 3.0))
    r = np.array([2.0, 15.0, 40.0, 90.0])
    for h in (mean_cell_integral_m, mean_cell_integral_s):
        assert h(r, d) == pytest.approx(h(r, d, exact=True), rel=2e-3)


def test_h_values_at_zero_distance():
    # At r = 0 the integrals reduce to the per-tier mean cell areas of the strongest-power tessellation.
    rho = 0.5
    d = TierDensities(1e-4, 1e-4, rho)
    assert mean_cell_integral_s(0.0, d) == pytest.approx(1.0 / (1e-4 + rho ** 2 * 1e-4), rel=1e-12)
    assert mean_cell_integral_m(0.0, d) == pytest.approx(1.0 / (1e-4 / rho ** 2 + 1e-4), rel=1e-12)


def test_clear_cache_rebuilds_identically():
    before = mean_cell_integral_bh(np.array([3.0, 30.0]), 5e-4)
    clear_cache()
    assert np.allclose(mean_cell_integral_bh(np.array([3.0, 30.0]), 5e-4), before, rtol=1e-12)


def test_mean_cell_integral_rejects_negative_distance():
    with pytest.raises(GeometryError):
        mean_cell_integral_bh(-1.0, 1e-4)


def test_serving_distance_law(quad):
    d = TierDensities(1e-4, 2e-4, 0.7)
    assert integrate_1d(lambda r: serving_distance_pdf(r, d), 0.0, np.inf, quad) == pytest.approx(1.0, rel=1e-9)
    r = 35.0
    assert serving_distance_cdf(r, d) == pytest.approx(
        integrate_1d(lambda t: serving_distance_pdf(t, d), 0.0, r, quad), rel=1e-9)


def test_sample_serving_distance_matches_cdf():
    d = TierDensities(1e-4, 3e-4, 0.6)
    samples = sample_serving_distance(20_000, d, np.random.default_rng(11))
    assert stats.kstest(samples, lambda r: serving_distance_cdf(r, d)).pvalue > 0.01


def test_doubling_both_densities_halves_h():
    d, doubled = TierDensities(1e-4, 2e-4, 0.7), TierDensities(2e-4, 4e-4, 0.7)
    r = np.array([0.0, 10.0, 40.0])
    for h in (mean_cell_integral_m, mean_cell_integral_s):
        assert h(r / math.sqrt(2.0), doubled) == pytest.approx(0.5 * h(r, d), rel=0.02)


def _association_cell_areas(sbs, mbs, radio, side, rng, samples_per_m2=100.0, chunk=1_000_000):
    """Per-tier strongest-power cell areas from uniform sample counts, in chunks."""
    counts = [np.zeros(len(sbs)), np.zeros(len(mbs))]
    total = remaining = int(samples_per_m2 * side ** 2)
    while remaining > 0:
        size = min(remaining, chunk)
        owner = associate(rng.uniform(0.0, side, size=(size, 2)), sbs, mbs, radio, side)
        for code in (0, 1):
            counts[code] += np.bincount(owner.index[owner.tier == code], minlength=len(counts[code]))
        remaining -= size
    return [c * side ** 2 / total for c in counts]


@pytest.mark.slow
@pytest.mark.parametrize("tier", ["s", "m", "bh"])
def test_mean_cell_integrals_match_voronoi_monte_carlo(tier, unequal_radio):
    # About 1e5 cells at unit density; users are binned by serving distance and
    # the mean area of the cell that serves them is compared with h at those distances.
    rng = np.random.default_rng({"s": 31, "m": 32, "bh": 33}[tier])
    side, lambda_s = 320.0, 0.5
    lambda_m = 0.0 if tier == "bh" else 0.5
    sbs, mbs = sample_ppp(lambda_s, side, rng), sample_ppp(lambda_m, side, rng)
    areas = _association_cell_areas(sbs, mbs, unequal_radio, side, rng)
    users = associate(rng.uniform(0.0, side, size=(2_000_000, 2)), sbs, mbs, unequal_radio, side)

    d = TierDensities.from_radio(lambda_s, lambda_m, unequal_radio)
    h = {"s": lambda r: mean_cell_integral_s(r, d),
         "m": lambda r: mean_cell_integral_m(r, d),
         "bh": lambda r: mean_cell_integral_bh(r, lambda_s)}[tier]
    code = 1 if tier == "m" else 0
    for r in (0.1, 0.25, 0.4, 0.6, 0.8):
        band = (users.tier == code) & (np.abs(users.distance - r) <= 0.1 * r)
        assert np.count_nonzero(band) > 2000
        simulated = areas[code][users.index[band]].mean()
        assert simulated == pytest.approx(np.mean(h(users.distance[band])), rel=0.02)
