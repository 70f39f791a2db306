# Stochastic-geometry primitives for the two-tier network: the exclusion area
# A(r, x, theta), the conditional mean cell integrals h_m, h_s and h_BH, and
# the law of the distance between a typical user and its serving station.
#
# The h-integrals are scale invariant: with total density L = lambda_s + lambda_m
# and f = lambda_m / L,
#     h(r; lambda_s, lambda_m) = hhat(r * sqrt(L); f) / L
# so one table over (f, r') per tier and power ratio serves every density.
from collections import OrderedDict
from dataclasses import dataclass
import logging
import math
import threading

import numpy as np
from scipy.interpolate import CubicSpline

from numerics import QuadratureSettings, integrate_2d_polar

logger = logging.getLogger(__name__)

_F_NODES = 13
_R_NODES = 64
_R_MIN_SCALED = 1e-3
# Tables reach the serving range of the sparser tier down to this share of L.
_MIN_TIER_SHARE = 0.05
_MAX_INTERPOLANTS = 4096

_TABLE_LOCK = threading.Lock()
_TABLES = {}
_INTERPOLANTS = OrderedDict()


class GeometryError(ValueError):
    """Invalid geometric input (NaN, negative distances or densities)."""


@dataclass(frozen=True)
class TierDensities:
    lambda_s: float
    lambda_m: float
    rho_ms: float = 1.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_m", "rho_ms"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise GeometryError(f"{name} must be finite")
        if self.lambda_s < 0 or self.lambda_m < 0:
            raise GeometryError("densities must be nonnegative")
        if self.lambda_s + self.lambda_m <= 0:
            raise GeometryError("lambda_s + lambda_m must be positive")
        if not 0.0 < self.rho_ms <= 1.0:
            raise GeometryError("rho_ms must lie in (0, 1]")

    @classmethod
    def from_radio(cls, lambda_s: float, lambda_m: float, radio):
        return cls(lambda_s, lambda_m, radio.rho_ms)

    @property
    def total(self) -> float:
        return self.lambda_s + self.lambda_m

    @property
    def mbs_fraction(self) -> float:
        return self.lambda_m / self.total

    @property
    def effective_density(self) -> float:
        """Intensity of the serving-distance law, lambda_s + rho^2 * lambda_m."""
        return self.lambda_s + self.rho_ms ** 2 * self.lambda_m


def _as_checked_array(name, value):
    array = np.asarray(value, dtype=float)
    if np.any(np.isnan(array)):
        raise GeometryError(f"{name} must not be NaN")
    return array


def disk_overlap(a, b, d):
    """Intersection area of two disks with radii a, b whose centres are d apart."""
    a, b, d = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                                  np.asarray(d, dtype=float))
    overlap = np.zeros(a.shape)
    disjoint = d >= a + b
    a_contains_b = ~disjoint & (d <= a - b)
    b_contains_a = ~disjoint & ~a_contains_b & (d <= b - a)
    lens = ~(disjoint | a_contains_b | b_contains_a)

    overlap[a_contains_b] = np.pi * b[a_contains_b] ** 2
    overlap[b_contains_a] = np.pi * a[b_contains_a] ** 2
    if np.any(lens):
        al, bl, dl = a[lens], b[lens], d[lens]
        cos_b = np.clip((dl ** 2 + bl ** 2 - al ** 2) / (2.0 * dl * bl), -1.0, 1.0)
        cos_a = np.clip((dl ** 2 + al ** 2 - bl ** 2) / (2.0 * dl * al), -1.0, 1.0)
        kite = (-dl + al + bl) * (dl + al - bl) * (dl - al + bl) * (dl + al + bl)
        overlap[lens] = (bl ** 2 * np.arccos(cos_b) + al ** 2 * np.arccos(cos_a)
                         - 0.5 * np.sqrt(np.maximum(kite, 0.0)))
    return overlap


def exclusion_area(r, x, theta):
    """
    Area of the disk of radius x centred at the polar point (x, theta) that is
    not covered by the disk of radius r centred at (0, -r). Vectorised over
    broadcastable inputs.
    """
    r = _as_checked_array("r", r)
    x = _as_checked_array("x", x)
    theta = _as_checked_array("theta", theta)
    if np.any(r < 0) or np.any(x < 0):
        raise GeometryError("r and x must be nonnegative")
    d = np.sqrt(np.maximum(x ** 2 + r ** 2 + 2.0 * x * r * np.sin(theta), 0.0))
    area = np.pi * x ** 2 - disk_overlap(x, r, d)
    area = np.clip(area, 0.0, np.pi * x ** 2)
    return float(area) if area.ndim == 0 else area


def _decay(tier: str, f: float, rho: float) -> float:
    if tier == "m":
        return (1.0 - f) / rho ** 2 + f
    return (1.0 - f) + f * rho ** 2


def _scaled_h(tier: str, r_scaled, f: float, rho: float, q: QuadratureSettings) -> np.ndarray:
    """hhat for total density 1, evaluated at every entry of r_scaled."""
    r_col = np.atleast_1d(np.asarray(r_scaled, dtype=float))[:, None]
    decay = _decay(tier, f, rho)
    shift = float(r_col.max()) / math.sqrt(decay)
    own, other = 1.0 - f, f

    def integrand(x, theta):
        if tier == "m":
            exponent = -own * exclusion_area(r_col, x / rho, theta) - other * exclusion_area(r_col, x, theta)
        else:
            exponent = -own * exclusion_area(r_col, x, theta) - other * exclusion_area(r_col, x * rho, theta)
        return np.exp(exponent)

    return np.atleast_1d(integrate_2d_polar(integrand, q, decay, shift))


class _MasterTable(object):
    """log hhat on a Chebyshev grid in f and a log grid in r' for one tier and power ratio."""
    def __init__(self, tier: str, rho: float, q: QuadratureSettings):
        self.tier = tier
        self.rho = rho
        r_max = q.tail_cutoff_sigma / math.sqrt(math.pi * _MIN_TIER_SHARE)
        self.r_grid = np.geomspace(_R_MIN_SCALED, r_max, _R_NODES)
        self.log_r_grid = np.log(self.r_grid)
        self.f_grid = 0.5 * (1.0 - np.cos(np.pi * np.arange(_F_NODES) / (_F_NODES - 1)))
        self.f_grid[0], self.f_grid[-1] = 0.0, 1.0
        values = np.array([_scaled_h(tier, self.r_grid, f, rho, q) for f in self.f_grid])
        self._spline = CubicSpline(self.f_grid, np.log(values), axis=0)
        logger.info("Geometry: Built h_%s table for rho=%.4g (%d x %d nodes)", tier, rho, _F_NODES, _R_NODES)

    def column(self, f: float) -> np.ndarray:
        return self._spline(f)


class _RadialInterpolant(object):
    def __init__(self, table: _MasterTable, f: float, total: float):
        self.total = total
        self.sqrt_total = math.sqrt(total)
        self.h_zero = 1.0 / _decay(table.tier, f, table.rho)
        log_h = table.column(f)
        self.log_r_lo = table.log_r_grid[0]
        self.log_r_hi = table.log_r_grid[-1]
        self.r_lo = table.r_grid[0]
        self.spline = CubicSpline(table.log_r_grid, log_h)
        self.h_lo = math.exp(log_h[0])
        self.log_h_hi = log_h[-1]
        self.slope_hi = float(self.spline(self.log_r_hi, 1))

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r_scaled = r * self.sqrt_total
        out = np.empty(r_scaled.shape)
        low = r_scaled < self.r_lo
        high = r_scaled > math.exp(self.log_r_hi)
        mid = ~(low | high)
        # hhat(0) = 1 / decay exactly; join it linearly to the first table node.
        out[low] = self.h_zero + (self.h_lo - self.h_zero) * r_scaled[low] / self.r_lo
        out[mid] = np.exp(self.spline(np.log(r_scaled[mid])))
        out[high] = np.exp(self.log_h_hi + self.slope_hi * (np.log(r_scaled[high]) - self.log_r_hi))
        return out / self.total


def _master_table(tier: str, rho: float, q: QuadratureSettings) -> _MasterTable:
    key = (tier, rho, q)
    table = _TABLES.get(key)
    if table is None:
        with _TABLE_LOCK:
            table = _TABLES.get(key)
            if table is None:
                table = _MasterTable(tier, rho, q)
                _TABLES[key] = table
    return table


def _interpolant(tier: str, lambda_s: float, lambda_m: float, rho: float, q: QuadratureSettings):
    total = lambda_s + lambda_m
    f = lambda_m / total
    # A single-tier integrand does not depend on the power ratio.
    if (tier == "s" and lambda_m == 0.0) or (tier == "m" and lambda_s == 0.0):
        rho = 1.0
    key = (tier, lambda_s, lambda_m, rho, q)
    interpolant = _INTERPOLANTS.get(key)
    if interpolant is not None:
        return interpolant
    table = _master_table(tier, rho, q)
    interpolant = _RadialInterpolant(table, f, total)
    with _TABLE_LOCK:
        _INTERPOLANTS[key] = interpolant
        while len(_INTERPOLANTS) > _MAX_INTERPOLANTS:
            _INTERPOLANTS.popitem(last=False)
    return interpolant


def clear_cache():
    with _TABLE_LOCK:
        _TABLES.clear()
        _INTERPOLANTS.clear()


def _mean_cell_integral(tier, r, lambda_s, lambda_m, rho, q, exact):
    q = q or QuadratureSettings()
    r = _as_checked_array("r", r)
    if np.any(r < 0):
        raise GeometryError("r must be nonnegative")
    flat = np.atleast_1d(r).ravel()
    total = lambda_s + lambda_m
    if exact:
        f = lambda_m / total
        values = _scaled_h(tier, flat * math.sqrt(total), f, rho, q) / total
    else:
        values = _interpolant(tier, lambda_s, lambda_m, rho, q)(flat)
    values = values.reshape(r.shape)
    return float(values) if r.ndim == 0 else values


def mean_cell_integral_m(r, d: TierDensities, q: QuadratureSettings = None, exact: bool = False):
    """h_m(r): mean area served by a moving station whose user sits at distance r."""
    return _mean_cell_integral("m", r, d.lambda_s, d.lambda_m, d.rho_ms, q, exact)


def mean_cell_integral_s(r, d: TierDensities, q: QuadratureSettings = None, exact: bool = False):
    """h_s(r): mean area served by a static station whose user sits at distance r."""
    return _mean_cell_integral("s", r, d.lambda_s, d.lambda_m, d.rho_ms, q, exact)


def mean_cell_integral_bh(r, lambda_s: float, q: QuadratureSettings = None, exact: bool = False):
    """h_BH(r): mean static-tier cell area seen by a moving station backhauled over distance r."""
    if not (math.isfinite(lambda_s) and lambda_s > 0):
        raise GeometryError("lambda_s must be positive for backhaul cells")
    return _mean_cell_integral("s", r, lambda_s, 0.0, 1.0, q, exact)


def serving_distance_pdf(r, d: TierDensities):
    r = _as_checked_array("r", r)
    if np.any(r < 0):
        raise GeometryError("r must be nonnegative")
    c = d.effective_density
    value = 2.0 * np.pi * r * c * np.exp(-np.pi * r ** 2 * c)
    return float(value) if value.ndim == 0 else value


def serving_distance_cdf(r, d: TierDensities):
    r = _as_checked_array("r", r)
    if np.any(r < 0):
        raise GeometryError("r must be nonnegative")
    value = -np.expm1(-np.pi * r ** 2 * d.effective_density)
    return float(value) if value.ndim == 0 else value


def sample_serving_distance(n: int, d: TierDensities, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(n)
    return np.sqrt(-np.log1p(-u) / (np.pi * d.effective_density))
