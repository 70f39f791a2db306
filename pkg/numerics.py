# Shared numerical kernels: adaptive quadrature on semi-infinite and polar
# domains, bracketed root finding and damped fixed-point iteration. Every
# analytic module funnels its integrals and solves through here so that the
# tolerances live in one place (QuadratureSettings / FixedPointSettings).
from dataclasses import dataclass, field, fields
from functools import lru_cache
import logging
import math

import numpy as np
from scipy import integrate, optimize

logger = logging.getLogger(__name__)

# Breakpoints in the normalised variable t = pi * intensity * r^2. The first
# panels are narrow because delay integrands behave like sqrt(t) near zero.
_SERVING_PANELS = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
_SERVING_NODES_PER_PANEL = 12


class QuadratureError(RuntimeError):
    """Raised when an integral cannot be computed to the requested tolerance."""


class RootFindingError(RuntimeError):
    """Raised when a bracketed root search fails."""


class FixedPointError(RuntimeError):
    """
    Raised when a fixed-point iteration stops without converging. The last
    iterate and the residual history are attached for diagnostics.
    """
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class FixedPointDivergenceError(FixedPointError):
    """Raised when the residual keeps growing even with reduced damping."""


def _from_dict(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"{section}: unknown setting(s) {sorted(unknown)}")
    return cls(**values)


@dataclass(frozen=True)
class QuadratureSettings:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_subdivisions: int = 500
    # Semi-infinite integrals are cut at tail_cutoff_sigma / sqrt(pi * c).
    tail_cutoff_sigma: float = 6.0
    # Fixed Gauss-Legendre rule used for the angular part of polar integrals.
    angular_nodes: int = 96

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if not 0.0 < self.abs_tol < 1.0:
            raise ValueError("abs_tol must lie in (0, 1)")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be positive")
        if self.tail_cutoff_sigma < 3.0:
            raise ValueError("tail_cutoff_sigma must be at least 3")
        if self.angular_nodes < 8:
            raise ValueError("angular_nodes must be at least 8")

    @classmethod
    def from_dict(cls, values: dict):
        return _from_dict(cls, values, "settings.numerics")


@dataclass(frozen=True)
class FixedPointSettings:
    rel_tol: float = 1e-9
    max_iters: int = 500
    damping: float = 1.0

    def __post_init__(self):
        if not self.rel_tol > 0.0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")

    @classmethod
    def from_dict(cls, values: dict):
        return _from_dict(cls, values, "settings.fixed_point")


@dataclass
class FixedPointResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    damping: float
    residual_history: list = field(default_factory=list)


def integrate_1d(f, lo: float, hi: float, settings: QuadratureSettings) -> float:
    """
    Adaptive Gauss-Kronrod quadrature of a scalar function on [lo, hi]; `hi`
    may be np.inf. Raises QuadratureError if the integrand produces NaN or the
    subdivision budget runs out before the tolerance is met.
    """
    if hi == lo:
        return 0.0
    result = integrate.quad(f, lo, hi,
                            epsabs=settings.abs_tol,
                            epsrel=settings.rel_tol,
                            limit=settings.max_subdivisions,
                            full_output=1)
    value, error = result[0], result[1]
    if not math.isfinite(value):
        raise QuadratureError(f"integrand returned a non-finite value on [{lo}, {hi}]")
    if len(result) > 3:
        requested = max(settings.abs_tol, settings.rel_tol * abs(value))
        # quad also reports harmless round-off warnings; only a real miss counts.
        if error > 10.0 * requested:
            raise QuadratureError(f"quadrature did not converge on [{lo}, {hi}]: {result[3].strip()} "
                                  f"(estimated error {error:.3g})")
        logger.debug("Numerics: quad warning ignored, error %.3g within tolerance", error)
    return float(value)


@lru_cache(maxsize=16)
def _angular_rule(n: int):
    u, w = np.polynomial.legendre.leggauss(n)
    theta = np.pi * (u + 1.0)
    weights = np.pi * w
    theta.setflags(write=False)
    weights.setflags(write=False)
    return theta, weights


def integrate_2d_polar(f, settings: QuadratureSettings, decay: float, shift: float = 0.0):
    """
    Integrates f(x, theta) * x over x in [0, inf) and theta in [0, 2*pi).

    `f` receives a scalar x and the full vector of angular nodes and must return
    an array whose last axis matches theta; leading axes are carried through
    so that one call can evaluate a whole family of integrands. The radial
    integral is truncated at shift + tail_cutoff_sigma / sqrt(pi * decay),
    where the caller guarantees f <= exp(-decay * pi * (x^2 - shift^2)).
    """
    if not decay > 0.0:
        raise ValueError("decay must be positive")
    theta, weights = _angular_rule(settings.angular_nodes)
    x_max = shift + settings.tail_cutoff_sigma / math.sqrt(math.pi * decay)

    def radial(x):
        values = np.asarray(f(x, theta), dtype=float)
        return x * (values @ weights)

    value, error, info = integrate.quad_vec(radial, 0.0, x_max,
                                            epsabs=settings.abs_tol,
                                            epsrel=settings.rel_tol,
                                            norm="max",
                                            limit=max(settings.max_subdivisions, 50),
                                            full_output=True)
    if not np.all(np.isfinite(value)):
        raise QuadratureError("polar integrand returned a non-finite value")
    if not info.success:
        raise QuadratureError(f"polar quadrature did not converge (status {info.status}, "
                              f"estimated error {error:.3g})")
    if np.ndim(value) == 0:
        return float(value)
    return value


@lru_cache(maxsize=16)
def _serving_rule_unit(tail_cutoff_sigma: float):
    edges = [e for e in _SERVING_PANELS if e < tail_cutoff_sigma ** 2]
    edges.append(tail_cutoff_sigma ** 2)
    u, w = np.polynomial.legendre.leggauss(_SERVING_NODES_PER_PANEL)
    t_nodes, t_weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        t = a + half * (u + 1.0)
        t_nodes.append(t)
        t_weights.append(half * w * np.exp(-t))
    t_nodes = np.concatenate(t_nodes)
    t_weights = np.concatenate(t_weights)
    t_nodes.setflags(write=False)
    t_weights.setflags(write=False)
    return t_nodes, t_weights


def serving_distance_rule(intensity: float, settings: QuadratureSettings):
    """
    Nodes r and weights w such that sum(w * g(r)) approximates E[g(R)] when R
    has the nearest-point law 2*pi*intensity*r*exp(-pi*intensity*r^2).
    """
    if not intensity > 0.0:
        raise ValueError("intensity must be positive")
    t, w = _serving_rule_unit(float(settings.tail_cutoff_sigma))
    return np.sqrt(t / (math.pi * intensity)), w.copy()


def find_root(f, bracket, rel_tol: float) -> float:
    lo, hi = float(bracket[0]), float(bracket[1])
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if not (math.isfinite(f_lo) and math.isfinite(f_hi)):
        raise RootFindingError(f"function is not finite at the bracket ends ({lo}, {hi})")
    if np.sign(f_lo) == np.sign(f_hi):
        raise RootFindingError(f"no sign change on bracket ({lo}, {hi}): f = ({f_lo:.3g}, {f_hi:.3g})")
    rtol = max(rel_tol, 4.0 * np.finfo(float).eps)
    xtol = 1e-15 * max(abs(lo), abs(hi))
    try:
        root, info = optimize.brentq(f, lo, hi, xtol=xtol, rtol=rtol, maxiter=200, full_output=True)
    except RuntimeError as err:
        raise RootFindingError(str(err)) from err
    if not info.converged:
        raise RootFindingError(f"root search stopped after {info.iterations} iterations: {info.flag}")
    return float(root)


def _relative_residual(x, fx):
    scale = np.maximum(np.abs(x), np.finfo(float).tiny)
    return float(np.max(np.abs(fx - x) / scale))


def solve_fixed_point(mapping, x0, settings: FixedPointSettings, raise_on_failure: bool = True) -> FixedPointResult:
    """
    Damped Picard iteration x <- (1 - damping) * x + damping * mapping(x).

    Convergence is declared when the componentwise relative residual
    max|mapping(x) - x| / |x| drops to settings.rel_tol; the iterate x that
    satisfies this is returned. If the residual grows tenfold above its best
    value the damping is halved once; a second blow-up is a divergence.
    With raise_on_failure=False a map that stops returning finite values ends
    the iteration with converged=False instead of raising.
    """
    x = np.array(x0, dtype=float, copy=True)
    damping = settings.damping
    history = []
    best = math.inf
    residual = math.inf

    for iteration in range(1, settings.max_iters + 1):
        fx = np.asarray(mapping(x), dtype=float)
        if fx.shape != x.shape or not np.all(np.isfinite(fx)):
            result = FixedPointResult(x, residual, iteration, False, damping, history)
            if raise_on_failure:
                raise FixedPointError("fixed-point map returned a non-finite value", result)
            logger.warning("Numerics: fixed-point map returned a non-finite value at iteration %d", iteration)
            return result

        residual = _relative_residual(x, fx)
        history.append(residual)
        logger.debug("Numerics: fixed-point iteration %d residual %.3e", iteration, residual)

        if residual <= settings.rel_tol:
            return FixedPointResult(x, residual, iteration, True, damping, history)

        if residual < best:
            best = residual
        elif residual > 10.0 * best:
            if damping > 0.5:
                logger.warning("Numerics: fixed-point residual grew to %.3e (best %.3e), damping reduced to 0.5",
                               residual, best)
                damping = 0.5
                best = residual
            else:
                result = FixedPointResult(x, residual, iteration, False, damping, history)
                raise FixedPointDivergenceError(
                    f"fixed-point iteration diverged at iteration {iteration} (residual {residual:.3e})", result)

        x = (1.0 - damping) * x + damping * fx

    result = FixedPointResult(x, residual, settings.max_iters, False, damping, history)
    if raise_on_failure:
        raise FixedPointError(f"fixed-point iteration did not converge in {settings.max_iters} iterations "
                              f"(last residual {residual:.3e})", result)
    return result
