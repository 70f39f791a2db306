# Deployment-cost minimisation. The cost of a configuration is
#     mu * M + sum_z lambda_s^z * E_z
# with M the (slot-invariant) size of the moving fleet, subject to the delay
# targets in every region and slot, the backhaul violation target and the
# conservation of the moving fleet across slots. Constraints enter through
# additive penalties; the search is a population metaheuristic driven by a
# three-step reuse heuristic (static bound, per-region mix, coupled refinement).
from dataclasses import dataclass, field, fields, replace
import logging
import math

import numpy as np
from scipy.special import gamma as gamma_fn

from analytic import AnalyticError, DelaySolution, SlotState, solve_delays
from background_runner import BackgroundRunner
from backhaul import BackhaulContext, BackhaulError, violation_probability
from geometry import GeometryError
from numerics import (FixedPointError, FixedPointSettings, QuadratureError, QuadratureSettings,
                      RootFindingError)
from scenario import CONSERVATION_REL_TOL, NetworkConfiguration, Scenario, ScenarioError

logger = logging.getLogger(__name__)

_SOLVE_ERRORS = (AnalyticError, FixedPointError, GeometryError, QuadratureError)
_BACKHAUL_ERRORS = (BackhaulError, QuadratureError, RootFindingError)


class OptimizationError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def _settings_from_dict(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ScenarioError(f"settings.{section}: unknown setting(s) {sorted(unknown)}")
    values = dict(values)
    for name, value in values.items():
        if isinstance(value, list):
            values[name] = tuple(value)
    return cls(**values)


@dataclass(frozen=True)
class PenaltyWeights:
    w_tau_m: float = 150.0
    w_tau_s: float = 100.0
    w_violation: float = 1000.0
    w_conservation: float = 1000.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def from_dict(cls, values: dict):
        return _settings_from_dict(cls, values, "penalties")


@dataclass(frozen=True)
class MetaheuristicSettings:
    population: int = 70
    stall_window: int = 30
    stall_tol: float = 1e-8
    max_iters: int = 300
    rng_seed: int = 0
    algorithm: str = "hippopotamus"
    # Iterations over which the search shifts from exploration to exploitation.
    exploration_horizon: int = 300
    workers: int = 1

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if self.stall_window < 1 or self.max_iters < 1 or self.exploration_horizon < 1:
            raise ValueError("stall_window, max_iters and exploration_horizon must be positive")
        if not self.stall_tol > 0:
            raise ValueError("stall_tol must be positive")
        if self.algorithm not in ("hippopotamus", "genetic"):
            raise ValueError("algorithm must be 'hippopotamus' or 'genetic'")

    @classmethod
    def from_dict(cls, values: dict):
        return _settings_from_dict(cls, values, "metaheuristic")


@dataclass(frozen=True)
class OptimizerSettings:
    # Search range of the static-only bisection (BS/m^2).
    density_floor: float = 1e-7
    density_ceiling: float = 0.1
    bisection_rel_tol: float = 1e-3
    monotonicity_grid: int = 6
    # Relative slack allowed when checking that static delay falls with lambda_s.
    monotonicity_rel_tol: float = 1e-6
    # Per-region box of the mixed search, relative to the static bound.
    min_static_fraction: float = 0.01
    mbs_ceiling_factor: float = 2.0
    phi_log10_bounds: tuple = (-2.0, 3.0)
    violation_method: str = "distance"
    non_converged_penalty: float = 1e6
    # Cost units per unit of penalty. optimize_deployment replaces it with the
    # all-static cost found in step 1 when scale_penalties_to_static_cost is set.
    penalty_scale: float = 1.0
    scale_penalties_to_static_cost: bool = True

    def __post_init__(self):
        if not self.penalty_scale > 0:
            raise ValueError("penalty_scale must be positive")
        if not 0 < self.density_floor < self.density_ceiling:
            raise ValueError("need 0 < density_floor < density_ceiling")
        if not self.monotonicity_rel_tol >= 0:
            raise ValueError("monotonicity_rel_tol must be nonnegative")
        if not 0 < self.min_static_fraction <= 1:
            raise ValueError("min_static_fraction must lie in (0, 1]")
        if len(self.phi_log10_bounds) != 2 or self.phi_log10_bounds[0] > self.phi_log10_bounds[1]:
            raise ValueError("phi_log10_bounds must be an increasing pair")
        if self.violation_method not in ("demand", "distance"):
            raise ValueError("violation_method must be 'demand' or 'distance'")

    @classmethod
    def from_dict(cls, values: dict):
        return _settings_from_dict(cls, values, "optimizer")


@dataclass
class TraceRow:
    step: int
    iteration: int
    best_fitness: float
    feasible_count: int


@dataclass
class OptimizationResult:
    config: NetworkConfiguration
    cost: float
    feasible: bool
    per_slot_solutions: list
    violation_grid: np.ndarray
    reuse_fraction: float
    trace: list
    fitness: float = math.nan
    step_fitness: tuple = ()
    static_bounds: np.ndarray = None
    alt_mbs_reuse_fraction: float = 0.0
    mbs_share: float = 0.0


# ---------------------------------------------------------------------------
# Evaluation and penalties
# ---------------------------------------------------------------------------

@dataclass
class CellEvaluation:
    state: SlotState
    solution: DelaySolution = None
    violation: float = math.nan
    error: str = ""


@dataclass
class FitnessBreakdown:
    objective: float
    penalty: float
    feasible: bool
    mbs_count: float
    cells: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.objective + self.penalty


@dataclass
class _EvalContext:
    radio: object
    weights: PenaltyWeights
    fp: FixedPointSettings
    q: QuadratureSettings
    opt: OptimizerSettings
    runner: BackgroundRunner


def _context(s: Scenario, w=None, fp=None, q=None, opt=None, runner=None, workers=1) -> _EvalContext:
    return _EvalContext(
        s.radio,
        w or PenaltyWeights.from_dict(s.settings_block("penalties")),
        fp or FixedPointSettings.from_dict(s.settings_block("fixed_point")),
        q or QuadratureSettings.from_dict(s.settings_block("numerics")),
        opt or OptimizerSettings.from_dict(s.settings_block("optimizer")),
        runner or BackgroundRunner(workers),
    )


def evaluate_cell(st: SlotState, radio, fp: FixedPointSettings = None, q: QuadratureSettings = None,
                  violation_method: str = "distance") -> CellEvaluation:
    """Delay fixed point plus, when moving stations are present, the backhaul violation probability."""
    q = q or QuadratureSettings()
    try:
        solution = solve_delays(st, radio, fp, q)
    except _SOLVE_ERRORS as err:
        logger.debug("Optimizer: solve failed for %s: %s", st, err)
        return CellEvaluation(st, None, math.nan, str(err))
    cell = CellEvaluation(st, solution)
    if st.lambda_m > 0 and solution.converged:
        try:
            cell.violation = violation_probability(BackhaulContext(st, radio, solution, q), q, violation_method)
        except _BACKHAUL_ERRORS as err:
            logger.debug("Optimizer: violation unavailable for %s: %s", st, err)
            cell.error = str(err)
    return cell


def cell_penalty(cell: CellEvaluation, radio, w: PenaltyWeights, non_converged_penalty: float = 1e6):
    """Penalty of one region/slot cell and whether it meets every target."""
    solution = cell.solution
    if solution is None or not solution.converged:
        return non_converged_penalty, False
    tau0 = radio.target_delay_tau0_s
    penalty = w.w_tau_s * max(0.0, solution.tau_bar_s - tau0) / tau0
    feasible = solution.tau_bar_s <= tau0
    if cell.state.lambda_m > 0:
        penalty += w.w_tau_m * max(0.0, solution.tau_bar_m - tau0) / tau0
        feasible = feasible and solution.tau_bar_m <= tau0
        if math.isnan(cell.violation):
            return penalty + non_converged_penalty, False
        penalty += w.w_violation * max(0.0, cell.violation - radio.violation_target_delta)
        feasible = feasible and cell.violation <= radio.violation_target_delta
    return penalty, feasible


def conservation_spread(cfg: NetworkConfiguration, s: Scenario) -> float:
    """Relative spread (max - min) / mean of the per-slot moving fleet totals."""
    totals = cfg.mbs_totals_per_slot(s)
    mean = float(np.mean(totals))
    if mean <= 0:
        return 0.0
    return float((np.max(totals) - np.min(totals)) / mean)


def deployment_cost(cfg: NetworkConfiguration, s: Scenario):
    """(cost, M) with M the across-slot mean of the moving fleet size."""
    mbs_count = float(np.mean(cfg.mbs_totals_per_slot(s)))
    return s.mbs_relative_cost_mu * mbs_count + cfg.sbs_count(s), mbs_count


def penalty_from_cells(cells: list, cfg: NetworkConfiguration, s: Scenario, w: PenaltyWeights,
                       non_converged_penalty: float = 1e6, penalty_scale: float = 1.0) -> FitnessBreakdown:
    objective, mbs_count = deployment_cost(cfg, s)
    penalty, feasible = 0.0, True
    for cell in cells:
        p, ok = cell_penalty(cell, s.radio, w, non_converged_penalty)
        penalty += p
        feasible = feasible and ok
    spread = conservation_spread(cfg, s)
    if spread > CONSERVATION_REL_TOL:
        penalty += w.w_conservation * spread
        feasible = False
    return FitnessBreakdown(objective, penalty_scale * penalty, feasible, mbs_count, cells)


def evaluate_configuration(cfg: NetworkConfiguration, s: Scenario, fp: FixedPointSettings = None,
                           q: QuadratureSettings = None, violation_method: str = "distance",
                           runner: BackgroundRunner = None) -> list:
    """Evaluates every region/slot cell; returns a flat list in region-major order."""
    cfg.check_dimensions(s)
    states = [SlotState(s.regions[z].user_density_per_slot[j], cfg.mbs_density[z, j], cfg.sbs_density[z],
                        cfg.wps_weight_phi[z, j])
              for z in range(s.num_regions) for j in range(s.num_slots_J)]
    def evaluate(st):
        return evaluate_cell(st, s.radio, fp, q, violation_method)

    if runner is None:
        return [evaluate(st) for st in states]
    return runner.map(evaluate, states)


def fitness_breakdown(cfg: NetworkConfiguration, s: Scenario, w: PenaltyWeights = None,
                      fp: FixedPointSettings = None, q: QuadratureSettings = None,
                      opt: OptimizerSettings = None, runner: BackgroundRunner = None) -> FitnessBreakdown:
    ctx = _context(s, w, fp, q, opt, runner)
    cells = evaluate_configuration(cfg, s, ctx.fp, ctx.q, ctx.opt.violation_method, ctx.runner)
    return penalty_from_cells(cells, cfg, s, ctx.weights, ctx.opt.non_converged_penalty, ctx.opt.penalty_scale)


def penalized_fitness(cfg: NetworkConfiguration, s: Scenario, w: PenaltyWeights = None,
                      fp: FixedPointSettings = None, q: QuadratureSettings = None,
                      opt: OptimizerSettings = None, runner: BackgroundRunner = None) -> float:
    """
    Cost plus constraint penalties. Always finite: a cell whose delays cannot
    be solved adds a large constant instead of infinity.
    """
    return fitness_breakdown(cfg, s, w, fp, q, opt, runner).total


# ---------------------------------------------------------------------------
# Metaheuristics
# ---------------------------------------------------------------------------

@dataclass
class MetaheuristicResult:
    x: np.ndarray
    fitness: float
    iterations: int
    n_evaluations: int
    history: list
    stopped_by: str


class _Box(object):
    """Maps the search box onto [-1, 1]^d; zero-width dimensions stay fixed."""
    def __init__(self, bounds):
        bounds = np.array(bounds, dtype=float, ndmin=2)
        if bounds.ndim != 2 or bounds.shape[1] != 2 or bounds.shape[0] < 1:
            raise ValueError("bounds must be a sequence of (lo, hi) pairs")
        self.lower, self.upper = bounds[:, 0], bounds[:, 1]
        if not (np.all(np.isfinite(bounds)) and np.all(self.lower <= self.upper)):
            raise ValueError("degenerate bounds: need finite lo <= hi in every dimension")
        self.width = self.upper - self.lower
        if np.all(self.width == 0):
            raise ValueError("degenerate bounds: every dimension has zero width")
        self.dim = bounds.shape[0]

    def to_box(self, u):
        return self.lower + 0.5 * (np.clip(u, -1.0, 1.0) + 1.0) * self.width

    def from_box(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        safe = np.where(self.width > 0, self.width, 1.0)
        return np.where(self.width > 0, 2.0 * (x - self.lower) / safe - 1.0, 0.0)


class _Metaheuristic(object):
    def __init__(self, settings: MetaheuristicSettings, runner: BackgroundRunner = None, callback=None):
        self.settings = settings
        self.runner = runner or BackgroundRunner(settings.workers)
        self.callback = callback
        self.n_evaluations = 0

    def _evaluate(self, f, box, population):
        points = [box.to_box(u) for u in population]
        values = self.runner.map(lambda x: float(f(x)), points)
        self.n_evaluations += len(points)
        values = np.array(values, dtype=float)
        # A NaN fitness would stall greedy selection; treat it as the worst value.
        return np.where(np.isnan(values), np.inf, values)

    def _initial_population(self, rng, box, seeds):
        population = rng.uniform(-1.0, 1.0, size=(self.settings.population, box.dim))
        for i, seed in enumerate(list(seeds or [])[:self.settings.population]):
            population[i] = box.from_box(seed)
        return population

    def _stalled(self, history) -> bool:
        window = self.settings.stall_window
        if len(history) <= window:
            return False
        return (history[-window - 1] - history[-1]) / window < self.settings.stall_tol

    def _report(self, iteration, box, population, fitness):
        if self.callback is not None:
            self.callback(iteration, [box.to_box(u) for u in population], fitness)


class HippopotamusOptimizer(_Metaheuristic):
    """
    Population search in three phases per iteration: a position update toward
    the dominant agent and group means, a defence move against a random
    predator with a Levy-flight component, and a shrinking local escape step.
    Each agent keeps a candidate only if it improves its fitness.
    """
    LEVY_BETA = 1.5

    def _levy(self, rng, dim):
        beta = self.LEVY_BETA
        sigma = (gamma_fn(1 + beta) * np.sin(np.pi * beta / 2)
                 / (gamma_fn((1 + beta) / 2) * beta * 2 ** ((beta - 1) / 2))) ** (1 / beta)
        u = rng.normal(0.0, sigma, dim)
        v = rng.normal(0.0, 1.0, dim)
        return u / np.abs(v) ** (1 / beta)

    def minimize(self, f, bounds, seeds=None) -> MetaheuristicResult:
        s = self.settings
        box = _Box(bounds)
        rng = np.random.default_rng(s.rng_seed)
        n, dim = s.population, box.dim
        half = n // 2

        population = self._initial_population(rng, box, seeds)
        fitness = self._evaluate(f, box, population)
        history = [float(np.min(fitness))]
        stopped_by = "max_iters"
        iteration = 0

        def accept(indices, candidates):
            values = self._evaluate(f, box, candidates)
            for i, candidate, value in zip(indices, candidates, values):
                if value < fitness[i]:
                    population[i] = candidate
                    fitness[i] = value

        for iteration in range(1, s.max_iters + 1):
            dominant = population[np.argmin(fitness)].copy()
            temperature = math.exp(-iteration / s.exploration_horizon)

            # Position update in the river: first half of the herd.
            indices, candidates = [], []
            for i in range(half):
                i1, i2 = rng.integers(1, 3, size=2)
                group = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
                group_mean = population[group].mean(axis=0)
                candidates.append(population[i] + rng.random(dim) * (dominant - i1 * population[i]))
                if temperature > 0.6:
                    young = population[i] + rng.random(dim) * (dominant - i2 * group_mean)
                elif rng.random() > 0.5:
                    young = population[i] + rng.random(dim) * (group_mean - dominant)
                else:
                    young = rng.uniform(-1.0, 1.0, dim)
                candidates.append(young)
                indices += [i, i]
            accept(indices, np.clip(candidates, -1.0, 1.0))

            # Defence against predators: second half.
            predators = rng.uniform(-1.0, 1.0, size=(n - half, dim))
            predator_fitness = self._evaluate(f, box, predators)
            candidates = []
            for k, i in enumerate(range(half, n)):
                distance = np.abs(predators[k] - population[i]) + 1e-12
                b, c = rng.uniform(2.0, 4.0), rng.uniform(1.0, 1.5)
                d, g = rng.uniform(2.0, 3.0), rng.uniform(-1.0, 1.0)
                push = b / (c - d * math.cos(2 * math.pi * g))
                levy = 0.05 * self._levy(rng, dim)
                if predator_fitness[k] < fitness[i]:
                    candidates.append(levy * predators[k] + push / distance)
                else:
                    candidates.append(levy * predators[k] + push / (2.0 * distance + rng.random(dim)))
            accept(list(range(half, n)), np.clip(candidates, -1.0, 1.0))

            # Escape: local steps whose radius shrinks as 1 / iteration.
            candidates = []
            for i in range(n):
                choice = rng.integers(3)
                if choice == 0:
                    scale = 2.0 * rng.random(dim) - 1.0
                elif choice == 1:
                    scale = rng.normal()
                else:
                    scale = rng.random()
                candidates.append(population[i] + scale * (2.0 * rng.random(dim) - 1.0) / iteration)
            accept(list(range(n)), np.clip(candidates, -1.0, 1.0))

            history.append(float(np.min(fitness)))
            self._report(iteration, box, population, fitness)
            logger.debug("Optimizer: hippopotamus iteration %d best %.6g", iteration, history[-1])
            if self._stalled(history):
                stopped_by = "stall"
                break

        best = int(np.argmin(fitness))
        return MetaheuristicResult(box.to_box(population[best]), float(fitness[best]), iteration,
                                   self.n_evaluations, history, stopped_by)


class GeneticOptimizer(_Metaheuristic):
    """Tournament selection, one-point (or blend) crossover, Gaussian mutation, single elite."""
    CROSSOVER_RATE = 0.8
    MUTATION_RATE = 0.1

    def minimize(self, f, bounds, seeds=None) -> MetaheuristicResult:
        s = self.settings
        box = _Box(bounds)
        rng = np.random.default_rng(s.rng_seed)
        n, dim = s.population, box.dim

        population = self._initial_population(rng, box, seeds)
        fitness = self._evaluate(f, box, population)
        history = [float(np.min(fitness))]
        stopped_by = "max_iters"
        iteration = 0

        def tournament(k=3):
            picks = rng.choice(n, k, replace=False)
            return population[picks[np.argmin(fitness[picks])]].copy()

        for iteration in range(1, s.max_iters + 1):
            elite = int(np.argmin(fitness))
            children = [population[elite].copy()]
            while len(children) < n:
                p1, p2 = tournament(), tournament()
                if rng.random() < self.CROSSOVER_RATE:
                    if dim > 1:
                        point = rng.integers(1, dim)
                        c1 = np.concatenate([p1[:point], p2[point:]])
                        c2 = np.concatenate([p2[:point], p1[point:]])
                    else:
                        mix = rng.random()
                        c1, c2 = mix * p1 + (1 - mix) * p2, mix * p2 + (1 - mix) * p1
                else:
                    c1, c2 = p1, p2
                for child in (c1, c2):
                    mutate = rng.random(dim) < self.MUTATION_RATE
                    child = child + mutate * rng.normal(0.0, 0.2, dim)
                    if len(children) < n:
                        children.append(np.clip(child, -1.0, 1.0))
            children = np.array(children)
            child_fitness = self._evaluate(f, box, children[1:])
            population = children
            fitness = np.concatenate([[fitness[elite]], child_fitness])

            history.append(float(np.min(fitness)))
            self._report(iteration, box, population, fitness)
            if self._stalled(history):
                stopped_by = "stall"
                break

        best = int(np.argmin(fitness))
        return MetaheuristicResult(box.to_box(population[best]), float(fitness[best]), iteration,
                                   self.n_evaluations, history, stopped_by)


def build_metaheuristic(ms: MetaheuristicSettings, runner: BackgroundRunner = None, callback=None):
    if ms.algorithm == "genetic":
        return GeneticOptimizer(ms, runner, callback)
    return HippopotamusOptimizer(ms, runner, callback)


def metaheuristic_minimize(f, bounds, ms: MetaheuristicSettings, seeds=None, runner: BackgroundRunner = None,
                           callback=None):
    """Best point found inside `bounds` (a sequence of (lo, hi) pairs) and its fitness."""
    result = build_metaheuristic(ms, runner, callback).minimize(f, bounds, seeds)
    return result.x, result.fitness


# ---------------------------------------------------------------------------
# Three-step heuristic
# ---------------------------------------------------------------------------

def _static_slot_states(s: Scenario, z: int, lambda_s: float):
    return [SlotState(lu, 0.0, lambda_s, 1.0) for lu in s.regions[z].user_density_per_slot]


def _worst_static_delay(s: Scenario, z: int, lambda_s: float, ctx: _EvalContext) -> float:
    """Largest static delay over the region's slots; inf when any slot cannot be solved."""
    worst = 0.0
    for st in _static_slot_states(s, z, lambda_s):
        try:
            solution = solve_delays(st, s.radio, ctx.fp, ctx.q)
        except _SOLVE_ERRORS as err:
            logger.debug("Optimizer: static solve failed for %s: %s", st, err)
            return math.inf
        if not solution.converged:
            return math.inf
        worst = max(worst, solution.tau_bar_s)
    return worst


def _static_feasible(s, z, lambda_s, ctx) -> bool:
    return _worst_static_delay(s, z, lambda_s, ctx) <= s.radio.target_delay_tau0_s


def _static_bound(s: Scenario, z: int, ctx: _EvalContext) -> float:
    opt = ctx.opt
    lo, hi = opt.density_floor, opt.density_ceiling
    grid = np.geomspace(lo, hi, max(opt.monotonicity_grid, 2))
    delays = np.array([_worst_static_delay(s, z, lam, ctx) for lam in grid])
    # Unsolvable densities count as infinite delay; they must not follow a solvable one.
    rises = delays[1:] > delays[:-1] * (1.0 + opt.monotonicity_rel_tol)
    if np.any(rises):
        raise OptimizationError(f"region {z}: static delay is not nonincreasing in lambda_s on "
                                f"{np.array2string(grid, precision=3)}; bisection would be unreliable")

    if not _static_feasible(s, z, hi, ctx):
        raise OptimizationError(f"region {z}: no feasible static density below density_ceiling={hi:g}")
    if _static_feasible(s, z, lo, ctx):
        return lo
    while hi / lo - 1.0 > opt.bisection_rel_tol:
        mid = math.sqrt(lo * hi)
        if _static_feasible(s, z, mid, ctx):
            hi = mid
        else:
            lo = mid
    return hi


def step1_static_bounds(s: Scenario, w: PenaltyWeights = None, ms: MetaheuristicSettings = None,
                        opt: OptimizerSettings = None, fp: FixedPointSettings = None,
                        q: QuadratureSettings = None, runner: BackgroundRunner = None) -> np.ndarray:
    """
    Minimal static-only density per region that meets the delay target in
    every slot. With no moving stations the weight phi plays no role and the
    cost is increasing in lambda_s, so a bisection on feasibility is exact.
    """
    ctx = _context(s, w, fp, q, opt, runner)
    bounds = np.array(ctx.runner.map(lambda z: _static_bound(s, z, ctx), range(s.num_regions)))
    logger.info("Optimizer: Step 1 static bounds %s", np.array2string(bounds, precision=4))
    return bounds


def _region_vector_bounds(s: Scenario, static_bound: float, opt: OptimizerSettings):
    J = s.num_slots_J
    phi_lo, phi_hi = opt.phi_log10_bounds
    return ([(opt.min_static_fraction * static_bound, static_bound)]
            + [(0.0, opt.mbs_ceiling_factor * static_bound)] * J
            + [(phi_lo, phi_hi)] * J)


def _split_region_vector(x, J):
    return float(x[0]), np.asarray(x[1:1 + J], dtype=float), 10.0 ** np.asarray(x[1 + J:1 + 2 * J], dtype=float)


def _region_breakdown(s: Scenario, z: int, x, ctx: _EvalContext) -> FitnessBreakdown:
    J = s.num_slots_J
    lambda_s, lambda_m, phi = _split_region_vector(x, J)
    area = s.regions[z].area_m2
    objective = s.mbs_relative_cost_mu * float(np.max(lambda_m)) * area + lambda_s * area
    penalty, feasible, cells = 0.0, True, []
    for j in range(J):
        cell = evaluate_cell(SlotState(s.regions[z].user_density_per_slot[j], lambda_m[j], lambda_s, phi[j]),
                             s.radio, ctx.fp, ctx.q, ctx.opt.violation_method)
        p, ok = cell_penalty(cell, s.radio, ctx.weights, ctx.opt.non_converged_penalty)
        penalty += p
        feasible = feasible and ok
        cells.append(cell)
    return FitnessBreakdown(objective, ctx.opt.penalty_scale * penalty, feasible, float(np.max(lambda_m)) * area,
                            cells)


class _TraceRecorder(object):
    """Collects (iteration, best, feasible count) rows from a metaheuristic run."""
    def __init__(self, step: int, trace: list):
        self.step = step
        self.trace = trace
        self.feasible = {}

    def remember(self, x, feasible: bool):
        self.feasible[np.asarray(x, dtype=float).tobytes()] = feasible

    def __call__(self, iteration, population, fitness):
        keys = [np.asarray(x, dtype=float).tobytes() for x in population]
        count = sum(1 for key in keys if self.feasible.get(key, False))
        self.trace.append(TraceRow(self.step, iteration, float(np.min(fitness)), count))
        # Only the surviving population can be counted again.
        self.feasible = {key: self.feasible[key] for key in keys if key in self.feasible}


def optimize_region(s: Scenario, z: int, static_bound: float, w: PenaltyWeights = None,
                    ms: MetaheuristicSettings = None, opt: OptimizerSettings = None,
                    fp: FixedPointSettings = None, q: QuadratureSettings = None,
                    runner: BackgroundRunner = None, trace: list = None):
    """
    Region-local deployment problem: the region pays for the peak moving fleet
    it uses in any slot, mu * max_j lambda_m_j * E_z, and for its static
    stations, with lambda_s at most the static-only bound. The all-static point
    seeds the search. Returns (lambda_s, lambda_m[J], phi[J], fitness).
    """
    ctx = _context(s, w, fp, q, opt, runner)
    ms = ms or MetaheuristicSettings.from_dict(s.settings_block("metaheuristic"))
    J = s.num_slots_J
    recorder = _TraceRecorder(2, trace if trace is not None else [])

    def fitness(x):
        breakdown = _region_breakdown(s, z, x, ctx)
        recorder.remember(x, breakdown.feasible)
        return breakdown.total

    all_static = np.concatenate([[static_bound], np.zeros(J), np.zeros(J)])
    x, value = metaheuristic_minimize(fitness, _region_vector_bounds(s, static_bound, ctx.opt), ms,
                                      seeds=[all_static], runner=ctx.runner, callback=recorder)
    lambda_s, lambda_m, phi = _split_region_vector(x, J)
    logger.info("Optimizer: Step 2 region %d lambda_s=%.4g max lambda_m=%.4g fitness=%.6g",
                z, lambda_s, float(np.max(lambda_m)), value)
    return lambda_s, lambda_m, phi, value


def step2_per_region(s: Scenario, static_bounds, w: PenaltyWeights = None, ms: MetaheuristicSettings = None,
                     opt: OptimizerSettings = None, fp: FixedPointSettings = None,
                     q: QuadratureSettings = None, runner: BackgroundRunner = None,
                     trace: list = None) -> NetworkConfiguration:
    """
    Solves each region independently with lambda_s^z <= lambda_OnlyStatic^z,
    letting moving stations cover the remainder. The cross-region conservation
    of the moving fleet is not imposed here.
    """
    sbs, mbs, phi = [], [], []
    for z in range(s.num_regions):
        lambda_s, lambda_m, weights, _ = optimize_region(s, z, float(static_bounds[z]), w, ms, opt, fp, q,
                                                         runner, trace)
        sbs.append(lambda_s)
        mbs.append(lambda_m)
        phi.append(weights)
    return NetworkConfiguration(np.array(sbs), np.array(mbs), np.array(phi))


def project_conservation(mbs_density: np.ndarray, areas: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """
    Moves every slot's moving fleet onto one common total while staying in
    [0, upper]. The total is the across-slot mean, capped by the smallest
    fleet any slot can hold inside the box, so every slot reaches it exactly.
    """
    mbs = np.clip(np.array(mbs_density, dtype=float), 0.0, upper)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), mbs.shape)
    areas = np.asarray(areas, dtype=float)
    capacity = areas @ upper
    target = min(float(np.mean(areas @ mbs)), float(np.min(capacity)))
    for j in range(mbs.shape[1]):
        mbs[:, j] = _fill_slot(mbs[:, j], areas, upper[:, j], target)
    return mbs


def _fill_slot(column: np.ndarray, areas: np.ndarray, upper: np.ndarray, target: float) -> np.ndarray:
    # Scales the unsaturated regions; regions that hit their bound are pinned there.
    if target <= 0:
        return np.zeros_like(column)
    out = column.copy()
    free = upper > 0
    for _ in range(len(column) + 1):
        remaining = target - float(areas[~free] @ out[~free])
        current = float(areas[free] @ out[free])
        if current > 0:
            out[free] *= remaining / current
        else:
            out[free] = upper[free] * remaining / float(areas[free] @ upper[free])
        over = free & (out >= upper)
        if not np.any(over):
            break
        out[over] = upper[over]
        free &= ~over
        if not np.any(free):
            break
    return np.clip(out, 0.0, upper)


class _CoupledProblem(object):
    """
    Full problem on the reduced box of the coupled step:
        lambda_s* <= lambda_s <= lambda_s* + min_j lambda_m*_j,  0 <= lambda_m <= lambda_m*.
    Vectors hold, per region, lambda_s, lambda_m[J] and log10 phi[J].
    """
    def __init__(self, s: Scenario, step2: NetworkConfiguration, ctx: _EvalContext):
        self.s = s
        self.ctx = ctx
        self.J = s.num_slots_J
        self.mbs_upper = np.array(step2.mbs_density)
        delta = self.mbs_upper.min(axis=1)
        phi_lo, phi_hi = ctx.opt.phi_log10_bounds
        seed_phi = self._log_phi(step2)
        bounds = []
        for z in range(s.num_regions):
            lam_s = float(step2.sbs_density[z])
            bounds.append((lam_s, lam_s + float(delta[z])))
            bounds += [(0.0, float(u)) for u in self.mbs_upper[z]]
            # phi is irrelevant in a cell that can hold no moving station.
            bounds += [(phi_lo, phi_hi) if u > 0 else (p, p) for u, p in zip(self.mbs_upper[z], seed_phi[z])]
        self.bounds = bounds

    def _log_phi(self, cfg: NetworkConfiguration) -> np.ndarray:
        return np.clip(np.log10(np.maximum(cfg.wps_weight_phi, 1e-300)), *self.ctx.opt.phi_log10_bounds)

    def encode(self, cfg: NetworkConfiguration) -> np.ndarray:
        log_phi = self._log_phi(cfg)
        parts = []
        for z in range(self.s.num_regions):
            parts += [[cfg.sbs_density[z]], cfg.mbs_density[z], log_phi[z]]
        return np.concatenate(parts)

    def decode(self, x) -> NetworkConfiguration:
        width = 1 + 2 * self.J
        rows = np.asarray(x, dtype=float).reshape(self.s.num_regions, width)
        mbs = project_conservation(rows[:, 1:1 + self.J], self.s.areas, self.mbs_upper)
        return NetworkConfiguration(rows[:, 0], mbs, 10.0 ** rows[:, 1 + self.J:])

    def breakdown(self, x) -> FitnessBreakdown:
        cfg = self.decode(x)
        cells = evaluate_configuration(cfg, self.s, self.ctx.fp, self.ctx.q, self.ctx.opt.violation_method)
        return penalty_from_cells(cells, cfg, self.s, self.ctx.weights, self.ctx.opt.non_converged_penalty,
                                  self.ctx.opt.penalty_scale)


def _result_from_breakdown(cfg, breakdown: FitnessBreakdown, s: Scenario, static_bounds, trace,
                           step_fitness) -> OptimizationResult:
    J = s.num_slots_J
    solutions = [[breakdown.cells[z * J + j].solution for j in range(J)] for z in range(s.num_regions)]
    violations = np.array([[breakdown.cells[z * J + j].violation for j in range(J)]
                           for z in range(s.num_regions)])
    static_cost = float(s.areas @ np.asarray(static_bounds))
    cost = breakdown.objective
    reuse = min(max(1.0 - cost / static_cost, 0.0), 1.0) if static_cost > 0 else 0.0
    alt = min(breakdown.mbs_count / static_cost, 1.0) if static_cost > 0 else 0.0
    return OptimizationResult(cfg, cost, breakdown.feasible, solutions, violations, reuse, trace,
                              breakdown.total, tuple(step_fitness), np.asarray(static_bounds), alt,
                              cfg.mbs_share(s))


def step3_coupled(s: Scenario, step2: NetworkConfiguration, static_bounds, w: PenaltyWeights = None,
                  ms: MetaheuristicSettings = None, opt: OptimizerSettings = None,
                  fp: FixedPointSettings = None, q: QuadratureSettings = None,
                  runner: BackgroundRunner = None, trace: list = None, step_fitness=()) -> OptimizationResult:
    """
    Full problem, conservation included, over the box spanned by the per-region
    solutions. The step-2 point is in the box and seeds the search, so the
    result is never worse than it.
    """
    ctx = _context(s, w, fp, q, opt, runner)
    ms = ms or MetaheuristicSettings.from_dict(s.settings_block("metaheuristic"))
    trace = trace if trace is not None else []
    problem = _CoupledProblem(s, step2, ctx)
    seed = problem.encode(step2)
    recorder = _TraceRecorder(3, trace)

    def fitness(x):
        breakdown = problem.breakdown(x)
        recorder.remember(x, breakdown.feasible)
        return breakdown.total

    seed_breakdown = problem.breakdown(seed)
    x, breakdown = seed, seed_breakdown
    widths = [hi - lo for lo, hi in problem.bounds]
    if np.any(np.array(widths) > 0):
        found, _ = metaheuristic_minimize(fitness, problem.bounds, ms, seeds=[seed], runner=ctx.runner,
                                          callback=recorder)
        candidate = problem.breakdown(found)
        # The seed passes through the box mapping; keep it exactly if rounding made the search worse.
        if candidate.total <= seed_breakdown.total:
            x, breakdown = found, candidate
    cfg = problem.decode(x)
    steps = tuple(step_fitness) + (breakdown.total,)
    logger.info("Optimizer: Step 3 cost=%.6g fitness=%.6g feasible=%s", breakdown.objective, breakdown.total,
                breakdown.feasible)
    return _result_from_breakdown(cfg, breakdown, s, static_bounds, trace, steps)


def _all_static(s: Scenario, static_bounds) -> NetworkConfiguration:
    shape = (s.num_regions, s.num_slots_J)
    return NetworkConfiguration(np.asarray(static_bounds, dtype=float), np.zeros(shape), np.ones(shape))


def _run_step(step: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except OptimizationError as err:
        if err.step is None:
            raise OptimizationError(f"step {step}: {err}", step) from err
        raise
    except (ScenarioError, ValueError, RuntimeError) as err:
        raise OptimizationError(f"step {step}: {err}", step) from err


def optimize_deployment(s: Scenario, w: PenaltyWeights = None, ms: MetaheuristicSettings = None,
                        opt: OptimizerSettings = None, fp: FixedPointSettings = None,
                        q: QuadratureSettings = None, runner: BackgroundRunner = None) -> OptimizationResult:
    """
    Runs the three steps. The step-2 aggregate is the per-region solution with
    the moving fleet projected onto the conservation constraint, or the
    all-static deployment when that is better; fitness is therefore
    nonincreasing from step to step.
    """
    ms = ms or MetaheuristicSettings.from_dict(s.settings_block("metaheuristic"))
    ctx = _context(s, w, fp, q, opt, runner, ms.workers)
    trace = []

    bounds = _run_step(1, step1_static_bounds, s, ctx.weights, ms, ctx.opt, ctx.fp, ctx.q, ctx.runner)
    static_cfg = _all_static(s, bounds)
    if ctx.opt.scale_penalties_to_static_cost:
        ctx.opt = replace(ctx.opt, penalty_scale=max(static_cfg.sbs_count(s), 1.0))
    f1 = _run_step(1, penalized_fitness, static_cfg, s, ctx.weights, ctx.fp, ctx.q, ctx.opt, ctx.runner)
    trace.append(TraceRow(1, 0, f1, 1))

    per_region = _run_step(2, step2_per_region, s, bounds, ctx.weights, ms, ctx.opt, ctx.fp, ctx.q,
                           ctx.runner, trace)
    projected = _CoupledProblem(s, per_region, ctx)
    f2 = _run_step(2, lambda: projected.breakdown(projected.encode(per_region)).total)
    if f2 > f1:
        logger.info("Optimizer: Step 2 aggregate (%.6g) is worse than all-static (%.6g); keeping all-static", f2, f1)
        per_region, f2 = static_cfg, f1
    trace.append(TraceRow(2, 0, f2, 0))

    result = _run_step(3, step3_coupled, s, per_region, bounds, ctx.weights, ms, ctx.opt, ctx.fp, ctx.q,
                       ctx.runner, trace, (f1, f2))
    logger.info("Optimizer: Finished: cost=%.6g reuse=%.3f mbs_share=%.3f", result.cost, result.reuse_fraction,
                result.mbs_share)
    return result
