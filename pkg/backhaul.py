# Backhaul QoS for moving base stations. A moving station is backhauled by its
# nearest static station; the ideal per-bit delay of that link is g(R) with R
# the backhaul distance. Its downlink demand fixes the delay it needs, tau_d,
# whose law follows from the gamma-type approximation of the Poisson-Voronoi
# cell area. A violation is the event tau_M > U_s * tau_d.
from dataclasses import dataclass, field
from functools import cached_property
import logging
import math

import numpy as np
from scipy.special import gammaincc

from analytic import DelaySolution, SlotState, capacity, mean_interference
from geometry import mean_cell_integral_bh, mean_cell_integral_s
from numerics import QuadratureSettings, find_root, integrate_1d, serving_distance_rule

logger = logging.getLogger(__name__)

# Normalised cell area ~ Gamma(shape 7/2, rate 7/2).
AREA_SHAPE = 3.5
AREA_VARIANCE_FACTOR = 2.0 / 7.0
_DEMAND_NORM = (343.0 / 15.0) * math.sqrt(7.0 / (2.0 * math.pi))
G_GRID_POINTS = 256
G_GRID_R_MIN_M = 0.1
_INVERSION_REL_TOL = 1e-10
_MC_CHUNK = 200_000


class BackhaulError(RuntimeError):
    """The backhaul delay map cannot be inverted or the context is unusable."""


@dataclass(eq=False)
class BackhaulContext:
    st: SlotState
    radio: object
    delays: DelaySolution
    q: QuadratureSettings = field(default_factory=QuadratureSettings)

    def __post_init__(self):
        if not self.delays.converged:
            raise BackhaulError("backhaul analysis needs a converged delay solution")
        if self.st.lambda_m <= 0:
            raise BackhaulError("violation probability is only defined when moving stations are deployed")

    @property
    def tiers(self):
        return self.st.tiers(self.radio)

    @property
    def demand_scale(self) -> float:
        """a = tau0 * (rho * lambda_m + lambda_s) / lambda_u."""
        st = self.st
        return self.radio.target_delay_tau0_s * (self.radio.rho_ms * st.lambda_m + st.lambda_s) / st.lambda_u

    @property
    def util_s(self) -> float:
        return self.delays.util_s

    def g(self, r):
        r = np.asarray(r, dtype=float)
        st, radio = self.st, self.radio
        load = (st.lambda_m * mean_cell_integral_bh(r, st.lambda_s, self.q)
                + st.phi * st.lambda_u * mean_cell_integral_s(r, self.tiers, self.q))
        interference = mean_interference(r, self.delays.tau_bar_m, self.delays.tau_bar_s, st, radio)
        value = load / capacity(r, radio.power_static_w, interference, radio)
        return float(value) if np.ndim(value) == 0 else value

    @cached_property
    def r_truncation(self) -> float:
        return max(self.q.tail_cutoff_sigma / math.sqrt(math.pi * self.st.lambda_s), 10.0 * G_GRID_R_MIN_M)

    @cached_property
    def g_table(self):
        r = np.geomspace(G_GRID_R_MIN_M, self.r_truncation, G_GRID_POINTS)
        g = self.g(r)
        steps = np.diff(g)
        if not np.all(steps > 0):
            bad = int(np.argmax(steps <= 0))
            raise BackhaulError(f"backhaul delay g(r) is not increasing near r={r[bad]:.4g} m "
                                f"(g={g[bad]:.4g}, next {g[bad + 1]:.4g}); cannot invert")
        return r, g


def bh_delay_g(r, ctx: BackhaulContext):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise BackhaulError("g(r) needs r > 0")
    return ctx.g(r)


def _cdf_scalar(tau: float, ctx: BackhaulContext) -> float:
    r_grid, g_grid = ctx.g_table
    if tau <= g_grid[0]:
        return 0.0
    if tau >= g_grid[-1]:
        return 1.0
    k = int(np.searchsorted(g_grid, tau))
    r_star = find_root(lambda r: ctx.g(r) - tau, (r_grid[k - 1], r_grid[k]), _INVERSION_REL_TOL)
    return float(-math.expm1(-math.pi * ctx.st.lambda_s * r_star ** 2))


def bh_delay_cdf(tau, ctx: BackhaulContext):
    """P(tau_M <= tau): the backhaul-distance CDF evaluated at g^-1(tau)."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 0:
        return _cdf_scalar(float(tau), ctx)
    return np.array([_cdf_scalar(float(t), ctx) for t in tau.ravel()]).reshape(tau.shape)


def gamma_demand_pdf(tau, a: float):
    """Density of a / Y with Y ~ Gamma(7/2, rate 7/2); mode at 7a/9."""
    tau = np.asarray(tau, dtype=float)
    out = np.zeros(tau.shape)
    positive = tau > 0
    t = tau[positive]
    out[positive] = np.exp(math.log(_DEMAND_NORM) + AREA_SHAPE * math.log(a)
                           - (AREA_SHAPE + 1.0) * np.log(t) - AREA_SHAPE * a / t)
    return float(out) if out.ndim == 0 else out


def demand_delay_pdf(tau, ctx: BackhaulContext):
    return gamma_demand_pdf(tau, ctx.demand_scale)


def violation_from_cdf(a: float, util_s: float, cdf, settings: QuadratureSettings) -> float:
    """
    P(tau_M > util_s * tau_d) = integral of f_tau_d(u) * (1 - cdf(util_s * u)) du,
    integrated in v = u / a so that the density is dimensionless.
    """
    if util_s <= 0:
        return 1.0

    def integrand(v):
        return gamma_demand_pdf(v, 1.0) * (1.0 - cdf(util_s * a * v))

    value = integrate_1d(integrand, 0.0, 1.0, settings) + integrate_1d(integrand, 1.0, np.inf, settings)
    return float(min(max(value, 0.0), 1.0))


def violation_probability(ctx: BackhaulContext, q: QuadratureSettings = None, method: str = "demand",
                          util_s: float = None) -> float:
    """
    Probability that a moving station's backhaul is too slow for its demand.

    method="demand" integrates over the demand-delay density with the inverted
    backhaul CDF. method="distance" integrates over the backhaul distance
    instead, where the demand side has a closed form.
    util_s overrides the static-tier utilization taken from ctx.delays.
    """
    q = q or ctx.q
    util = ctx.util_s if util_s is None else util_s
    a = ctx.demand_scale
    if method == "demand":
        return violation_from_cdf(a, util, lambda tau: _cdf_scalar(tau, ctx), q)
    if method == "distance":
        if util <= 0:
            return 1.0
        r, w = serving_distance_rule(ctx.st.lambda_s, q)
        exceed = gammaincc(AREA_SHAPE, AREA_SHAPE * util * a / ctx.g(r))
        return float(min(max(w @ exceed, 0.0), 1.0))
    raise ValueError(f"unknown violation method '{method}'")


def sample_violation_monte_carlo(ctx: BackhaulContext, n: int, rng: np.random.Generator, util_s: float = None):
    """
    Draws the backhaul distance and the normalised cell area independently and
    counts violations. Returns (estimate, standard error).
    """
    util = ctx.util_s if util_s is None else util_s
    a = ctx.demand_scale
    hits = 0
    remaining = n
    while remaining > 0:
        size = min(remaining, _MC_CHUNK)
        r = np.sqrt(-np.log1p(-rng.random(size)) / (math.pi * ctx.st.lambda_s))
        r = np.maximum(r, 1e-9)
        y = rng.gamma(AREA_SHAPE, 1.0 / AREA_SHAPE, size)
        hits += int(np.count_nonzero(ctx.g(r) > util * a / y))
        remaining -= size
    p = hits / n
    return p, math.sqrt(p * (1.0 - p) / n)


@dataclass(frozen=True)
class VarianceReport:
    mean_area_m2: float
    var_area_m4: float
    var_count_from_users: float
    var_count_from_area: float
    premise_holds: bool

    @property
    def area_dominates(self) -> bool:
        return self.var_count_from_area > self.var_count_from_users


def variance_dominance_check(ctx: BackhaulContext) -> VarianceReport:
    """
    Compares the user-count variance explained by Poisson users in a cell of
    mean size (lambda_u * A) with that explained by the cell-area spread
    (lambda_u^2 * Var(A)). Advisory only.
    """
    st = ctx.st
    mean_area = 1.0 / (ctx.radio.rho_ms * st.lambda_m + st.lambda_s)
    var_area = AREA_VARIANCE_FACTOR * mean_area ** 2
    report = VarianceReport(mean_area, var_area, st.lambda_u * mean_area, st.lambda_u ** 2 * var_area,
                            st.lambda_u < 1.0)
    if not report.premise_holds:
        logger.warning("Backhaul: lambda_u=%.3g >= 1, area-dominance premise does not hold", st.lambda_u)
    return report
