# The delay engine. For one region and time slot it couples the Palm-expected
# ideal per-bit delays of the two tiers through the mean interference they
# generate and solves the resulting fixed point.
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from geometry import (TierDensities, mean_cell_integral_bh, mean_cell_integral_m,
                      mean_cell_integral_s)
from numerics import (FixedPointError, FixedPointSettings, QuadratureSettings,
                      serving_distance_rule, solve_fixed_point)

logger = logging.getLogger(__name__)


class AnalyticError(ValueError):
    """Invalid input to the delay engine."""


@dataclass(frozen=True)
class SlotState:
    lambda_u: float
    lambda_m: float
    lambda_s: float
    phi: float = 1.0

    def __post_init__(self):
        for name in ("lambda_u", "lambda_m", "lambda_s", "phi"):
            if not math.isfinite(getattr(self, name)):
                raise AnalyticError(f"{name} must be finite")
        if self.lambda_u <= 0:
            raise AnalyticError("lambda_u must be positive")
        if self.lambda_m < 0 or self.lambda_s < 0:
            raise AnalyticError("base station densities must be nonnegative")
        if self.lambda_m > 0 and self.lambda_s <= 0:
            raise AnalyticError("lambda_s must be positive when lambda_m > 0 (moving stations need backhaul hosts)")
        if self.lambda_m + self.lambda_s <= 0:
            raise AnalyticError("at least one tier must be deployed")
        if self.phi < 0:
            raise AnalyticError("phi must be nonnegative")
        if self.lambda_m > 0 and self.phi <= 0:
            raise AnalyticError("phi must be positive when lambda_m > 0")

    def tiers(self, radio) -> TierDensities:
        return TierDensities.from_radio(self.lambda_s, self.lambda_m, radio)


@dataclass
class DelaySolution:
    tau_bar_m: float
    tau_bar_s: float
    util_m: float
    util_s: float
    converged: bool
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        """QoS-feasible: both utilizations at most one (an absent tier is ignored)."""
        return all(u <= 1.0 for u in (self.util_m, self.util_s) if not math.isnan(u))


def truncated_poisson_factor(y):
    """
    Mean number of users in a cell known to hold at least one: y / (1 - exp(-y)).
    Tends to 1 as y -> 0 and is never below max(1, y).
    """
    y = np.asarray(y, dtype=float)
    out = np.ones(y.shape)
    small = y < 1e-8
    big = ~small
    out[small] = 1.0 + 0.5 * y[small]
    out[big] = y[big] / -np.expm1(-y[big])
    return float(out) if out.ndim == 0 else out


def palm_user_factor(y):
    """
    Mean number of users in the cell of a typical user, 1 + y: the user itself
    plus a Poisson number of others with mean y.
    """
    y = np.asarray(y, dtype=float)
    out = 1.0 + y
    return float(out) if out.ndim == 0 else out


USER_COUNT_FACTORS = {"truncated": truncated_poisson_factor, "palm": palm_user_factor}


def user_count_factor(model: str):
    try:
        return USER_COUNT_FACTORS[model]
    except KeyError:
        raise AnalyticError(f"unknown user count model {model!r}; expected one of {sorted(USER_COUNT_FACTORS)}")


def capacity(r, p: float, interference, radio):
    """Shannon rate (B/k) log2(1 + G P r^-alpha / (N0 B/k + I)) in bit/s."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise AnalyticError("capacity is singular at r = 0")
    signal = radio.reference_gain * p * r ** (-radio.path_loss_alpha)
    sinr = signal / (radio.noise_power_w + np.asarray(interference, dtype=float))
    rate = radio.channel_bandwidth_hz * np.log2(1.0 + sinr)
    return float(rate) if rate.ndim == 0 else rate


def mean_interference(r, tau_m: float, tau_s: float, st: SlotState, radio):
    """
    Mean interference at distance r from the serving station when every
    station transmits for a fraction tau / tau0 of the time on one of k channels.
    The static density is the time-invariant lambda_s.
    """
    alpha = radio.path_loss_alpha
    if alpha <= 2:
        raise AnalyticError("mean interference diverges for path_loss_alpha <= 2")
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise AnalyticError("mean interference needs r > 0")
    scale = 2.0 * np.pi * r ** (2.0 - alpha) / (radio.reuse_factor_k * (alpha - 2.0) * radio.target_delay_tau0_s)
    load = radio.power_mobile_w * tau_m * st.lambda_m + radio.power_static_w * tau_s * st.lambda_s
    value = radio.reference_gain * scale * load
    return float(value) if value.ndim == 0 else value


def utilization(tau_bar: float, radio) -> float:
    """Mean utilization tau_bar / tau0; values above one are returned unchanged."""
    return tau_bar / radio.target_delay_tau0_s


class _DelayMap(object):
    """
    Right-hand side of the coupled delay equations, evaluated on the nodes of
    the serving-distance rule. Everything except the interference is fixed
    for a slot, so the cell integrals are computed once up front.
    """
    def __init__(self, st: SlotState, radio, q: QuadratureSettings, user_count: str = "truncated"):
        self.st = st
        self.radio = radio
        tiers = st.tiers(radio)
        users = user_count_factor(user_count)
        self.r, self.w = serving_distance_rule(tiers.effective_density, q)
        load_u = st.lambda_u
        self.load_m = users(load_u * mean_cell_integral_m(self.r, tiers, q))
        self.load_s = users(load_u * mean_cell_integral_s(self.r, tiers, q))
        if st.lambda_m > 0:
            self.load_s = self.load_s + st.lambda_m * mean_cell_integral_bh(self.r, st.lambda_s, q) / st.phi
        self.effective_density = tiers.effective_density

    def __call__(self, x):
        tau_m, tau_s = x
        interference = mean_interference(self.r, tau_m, tau_s, self.st, self.radio)
        rate_m = capacity(self.r, self.radio.power_mobile_w, interference, self.radio)
        rate_s = capacity(self.r, self.radio.power_static_w, interference, self.radio)
        return np.array([self.w @ (self.load_m / rate_m), self.w @ (self.load_s / rate_s)])

    def initial_guess(self):
        # Mean load over the zero-interference rate at the mean serving distance.
        r_mean = 0.5 / math.sqrt(self.effective_density)
        rate_m = capacity(r_mean, self.radio.power_mobile_w, 0.0, self.radio)
        rate_s = capacity(r_mean, self.radio.power_static_w, 0.0, self.radio)
        return np.array([self.w @ self.load_m / rate_m, self.w @ self.load_s / rate_s])


def _to_solution(x, residual, iterations, converged, history, radio) -> DelaySolution:
    tau_m, tau_s = float(x[0]), float(x[1])
    return DelaySolution(tau_m, tau_s, utilization(tau_m, radio), utilization(tau_s, radio),
                         converged, residual, iterations, list(history))


def solve_delays(st: SlotState, radio, fp: FixedPointSettings = None, q: QuadratureSettings = None,
                 user_count: str = "truncated") -> DelaySolution:
    """
    Simultaneous fixed point of the moving- and static-tier delay equations.
    A solve that stops early is returned with converged=False.

    user_count selects the users-per-cell factor: "truncated" conditions a
    Poisson count on a non-empty cell, "palm" counts the typical user plus the
    others sharing its cell, which is what a user-averaged simulation measures.
    """
    fp = fp or FixedPointSettings()
    q = q or QuadratureSettings()
    if st.lambda_u < st.lambda_m + st.lambda_s:
        logger.warning("Analytic: lambda_u=%.3g is below the base station density %.3g; "
                       "the one-user-per-cell assumption is weak", st.lambda_u, st.lambda_m + st.lambda_s)
    mapping = _DelayMap(st, radio, q, user_count)
    try:
        result = solve_fixed_point(mapping, mapping.initial_guess(), fp, raise_on_failure=False)
    except FixedPointError as err:
        result = err.result
        logger.warning("Analytic: %s", err)
    solution = _to_solution(result.x, result.residual, result.iterations, result.converged,
                            result.residual_history, radio)
    if not solution.converged:
        logger.warning("Analytic: delay fixed point not converged for %s (residual %.3e)", st, solution.residual)
    else:
        logger.debug("Analytic: converged in %d iterations, tau_m=%.4g tau_s=%.4g",
                     solution.iterations, solution.tau_bar_m, solution.tau_bar_s)
    return solution


def solve_single_tier(lambda_u: float, lambda_s: float, radio, fp: FixedPointSettings = None,
                      q: QuadratureSettings = None, user_count: str = "truncated") -> DelaySolution:
    """
    Static-only network solved as a scalar fixed point. The moving-tier
    entries of the result are NaN since no moving station is deployed.
    """
    fp = fp or FixedPointSettings()
    q = q or QuadratureSettings()
    st = SlotState(lambda_u, 0.0, lambda_s, 1.0)
    r, w = serving_distance_rule(lambda_s, q)
    load = user_count_factor(user_count)(lambda_u * mean_cell_integral_bh(r, lambda_s, q))

    def mapping(x):
        interference = mean_interference(r, 0.0, x[0], st, radio)
        return np.array([w @ (load / capacity(r, radio.power_static_w, interference, radio))])

    r_mean = 0.5 / math.sqrt(lambda_s)
    x0 = np.array([w @ load / capacity(r_mean, radio.power_static_w, 0.0, radio)])
    try:
        result = solve_fixed_point(mapping, x0, fp, raise_on_failure=False)
    except FixedPointError as err:
        result = err.result
    tau_s = float(result.x[0])
    return DelaySolution(math.nan, tau_s, math.nan, utilization(tau_s, radio), result.converged,
                         result.residual, result.iterations, list(result.residual_history))
