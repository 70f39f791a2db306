# Monte-Carlo validation of the analytic delay model. Base stations and users
# are dropped as Poisson processes on a square torus, users attach to the
# strongest station, moving stations attach to their nearest static station
# for backhaul, and per-bit delays follow the WPS share of each station.
from dataclasses import dataclass, field, fields
import logging
import math

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from analytic import SlotState, capacity, solve_delays
from background_runner import BackgroundRunner
from backhaul import BackhaulContext, BackhaulError, violation_probability
from numerics import FixedPointSettings, QuadratureSettings

logger = logging.getLogger(__name__)

TIERS = ("s", "m")
MIN_DISTANCE_M = 1e-6
_PAIR_CHUNK = 2_000_000


class SimulationError(RuntimeError):
    """A replication cannot be carried out (e.g. no base station was dropped)."""


@dataclass(frozen=True)
class SimSettings:
    window_side_m: float = 2000.0
    replications: int = 30
    rng_seed: int = 0
    utilization_coupling_iters: int = 10
    # "expected": interference thinned by U/k; "bernoulli": random activity draws.
    interference_mode: str = "expected"
    # Delays are averaged over at most this many users per replication.
    max_delay_users: int = 20_000
    min_expected_bs: int = 200
    keep_samples: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.window_side_m > 0:
            raise ValueError("window_side_m must be positive")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.utilization_coupling_iters < 1:
            raise ValueError("utilization_coupling_iters must be positive")
        if self.interference_mode not in ("expected", "bernoulli"):
            raise ValueError("interference_mode must be 'expected' or 'bernoulli'")
        if self.max_delay_users < 1:
            raise ValueError("max_delay_users must be positive")

    @classmethod
    def from_dict(cls, values: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"settings.simulation: unknown setting(s) {sorted(unknown)}")
        return cls(**values)


@dataclass
class SimulationReport:
    setup: str
    mean_delay_s: dict
    ci95: dict
    empirical_violation: float
    violation_ci95: tuple
    samples: dict
    per_replication: dict
    utilization: dict
    coupling_residual: float
    serving_distances: np.ndarray = None
    backhaul_delays: np.ndarray = None
    backhaul_distances: np.ndarray = None


@dataclass
class Association:
    tier: np.ndarray
    index: np.ndarray
    distance: np.ndarray


@dataclass
class _Replication:
    delay_sum: dict
    delay_count: dict
    violations: int
    mbs_with_users: int
    utilization: dict
    coupling_residual: float
    serving_distances: np.ndarray = None
    backhaul_delays: np.ndarray = None
    backhaul_distances: np.ndarray = None
    mean_delay: dict = field(default_factory=dict)


def sample_ppp(intensity: float, window_side: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson points on [0, side)^2 as an (n, 2) array."""
    if intensity < 0:
        raise ValueError("intensity must be nonnegative")
    count = rng.poisson(intensity * window_side ** 2)
    return rng.uniform(0.0, window_side, size=(count, 2))


def toroidal_distance(a, b, window_side: float):
    delta = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    delta = np.minimum(delta, window_side - delta)
    return np.hypot(delta[..., 0], delta[..., 1])


def _nearest(points: np.ndarray, targets: np.ndarray, window_side: float):
    if len(targets) == 0:
        return np.full(len(points), np.inf), np.full(len(points), -1)
    tree = cKDTree(targets, boxsize=window_side)
    distance, index = tree.query(points)
    return distance, index


def associate(users: np.ndarray, sbs: np.ndarray, mbs: np.ndarray, radio, window_side: float) -> Association:
    """
    Strongest-received-power association on the torus. A moving station wins
    when d_m < rho_ms * d_s, i.e. nearest station after scaling moving-station
    distances by 1 / rho_ms. Tier codes are 0 for static and 1 for moving.
    """
    if len(sbs) == 0 and len(mbs) == 0:
        raise SimulationError("cannot associate users without any base station")
    d_s, i_s = _nearest(users, sbs, window_side)
    d_m, i_m = _nearest(users, mbs, window_side)
    use_m = d_m < radio.rho_ms * d_s
    return Association(tier=use_m.astype(int),
                       index=np.where(use_m, i_m, i_s),
                       distance=np.maximum(np.where(use_m, d_m, d_s), MIN_DISTANCE_M))


def _power_sums(receivers, transmitters, power, alpha, window_side, active=None, exclude_self=False):
    """Sum over transmitters of P * d^-alpha at each receiver, in chunks."""
    sums = np.zeros(len(receivers))
    if len(transmitters) == 0 or len(receivers) == 0:
        return sums
    weights = np.ones(len(transmitters)) if active is None else active.astype(float)
    rows = max(1, _PAIR_CHUNK // len(transmitters))
    for start in range(0, len(receivers), rows):
        block = receivers[start:start + rows]
        d = toroidal_distance(block[:, None, :], transmitters[None, :, :], window_side)
        gain = np.maximum(d, MIN_DISTANCE_M) ** (-alpha)
        if exclude_self:
            own = np.arange(start, start + len(block))
            gain[np.arange(len(block)), own] = 0.0
        sums[start:start + len(block)] = power * (gain @ weights)
    return sums


class _Interference(object):
    """
    Interference seen by a set of receivers, each of which excludes its own
    serving station. In expected mode the per-tier power sums are computed
    once and thinned by U/k; in Bernoulli mode they are redrawn per round.
    """
    def __init__(self, receivers, sbs, mbs, serving_tier, serving_index, radio, sim, rng, self_tier=None):
        self.receivers = receivers
        self.sbs, self.mbs = sbs, mbs
        self.radio, self.sim, self.rng = radio, sim, rng
        self.serving_tier = serving_tier
        self.serving_index = serving_index
        self.self_tier = self_tier
        alpha = radio.path_loss_alpha
        self.own_gain = np.zeros(len(receivers))
        stations = (sbs, mbs)
        powers = (radio.power_static_w, radio.power_mobile_w)
        for code in (0, 1):
            mask = serving_tier == code
            if np.any(mask):
                d = toroidal_distance(receivers[mask], stations[code][serving_index[mask]], sim.window_side_m)
                self.own_gain[mask] = powers[code] * np.maximum(d, MIN_DISTANCE_M) ** (-alpha)
        if sim.interference_mode == "expected":
            self.totals = [self._sums(code, None) for code in (0, 1)]

    def _sums(self, code, active):
        stations = (self.sbs, self.mbs)[code]
        power = (self.radio.power_static_w, self.radio.power_mobile_w)[code]
        return _power_sums(self.receivers, stations, power, self.radio.path_loss_alpha,
                           self.sim.window_side_m, active, exclude_self=(self.self_tier == code))

    def __call__(self, util):
        k = self.radio.reuse_factor_k
        total = np.zeros(len(self.receivers))
        for code, tier in enumerate(TIERS):
            activity = min(max(util[tier], 0.0) / k, 1.0)
            if self.sim.interference_mode == "expected":
                tier_sum = self.totals[code] - np.where(self.serving_tier == code, self.own_gain, 0.0)
                total += activity * np.maximum(tier_sum, 0.0)
            else:
                stations = (self.sbs, self.mbs)[code]
                active = self.rng.random(len(stations)) < activity
                tier_sum = self._sums(code, active)
                mask = self.serving_tier == code
                own_active = np.zeros(len(self.receivers), dtype=bool)
                own_active[mask] = active[self.serving_index[mask]]
                tier_sum -= np.where(own_active, self.own_gain, 0.0)
                total += np.maximum(tier_sum, 0.0)
        return self.radio.reference_gain * total


def _replicate(st: SlotState, radio, sim: SimSettings, seed: np.random.SeedSequence) -> _Replication:
    rng = np.random.default_rng(seed)
    side = sim.window_side_m
    sbs = sample_ppp(st.lambda_s, side, rng)
    mbs = sample_ppp(st.lambda_m, side, rng)
    users = sample_ppp(st.lambda_u, side, rng)
    if len(sbs) == 0 and len(mbs) == 0:
        raise SimulationError("replication dropped no base station; enlarge window_side_m")
    if len(mbs) > 0 and len(sbs) == 0:
        raise SimulationError("moving stations were dropped without any static backhaul host")

    assoc = associate(users, sbs, mbs, radio, side)
    users_per_sbs = np.bincount(assoc.index[assoc.tier == 0], minlength=len(sbs))
    users_per_mbs = np.bincount(assoc.index[assoc.tier == 1], minlength=len(mbs))

    mbs_per_sbs, host_distance = np.zeros(len(sbs), dtype=int), None
    if len(mbs) > 0:
        host_distance, host = _nearest(mbs, sbs, side)
        host_distance = np.maximum(host_distance, MIN_DISTANCE_M)
        mbs_per_sbs = np.bincount(host, minlength=len(sbs))
    phi = st.phi if st.lambda_m > 0 else 1.0

    # Palm means are user averages; a uniform subsample keeps the pair sums bounded.
    sample = np.arange(len(users))
    if len(users) > sim.max_delay_users:
        sample = np.sort(rng.choice(len(users), sim.max_delay_users, replace=False))
    tier = assoc.tier[sample]
    index = assoc.index[sample]
    distance = assoc.distance[sample]
    access = _Interference(users[sample], sbs, mbs, tier, index, radio, sim, rng)

    on_s = tier == 0
    load = np.empty(len(sample))
    load[on_s] = (mbs_per_sbs[index[on_s]] + phi * users_per_sbs[index[on_s]]) / phi
    load[~on_s] = users_per_mbs[index[~on_s]]
    power = np.where(on_s, radio.power_static_w, radio.power_mobile_w)

    util = {"s": 1.0, "m": 1.0}
    residual = math.nan
    delays = np.zeros(len(sample))
    for _ in range(sim.utilization_coupling_iters):
        delays = load / capacity(distance, power, access(util), radio)
        updated = dict(util)
        for code, name in enumerate(TIERS):
            mask = tier == code
            if np.any(mask):
                updated[name] = float(np.mean(delays[mask])) / radio.target_delay_tau0_s
        residual = max(abs(updated[t] - util[t]) / max(abs(util[t]), 1e-300) for t in TIERS)
        util = updated

    delay_sum, delay_count, mean_delay = {}, {}, {}
    for code, name in enumerate(TIERS):
        mask = tier == code
        if np.any(mask):
            delay_sum[name] = float(np.sum(delays[mask]))
            delay_count[name] = int(np.count_nonzero(mask))
            mean_delay[name] = delay_sum[name] / delay_count[name]

    violations, mbs_with_users, backhaul_delays = 0, 0, None
    if len(mbs) > 0:
        links = _Interference(mbs, sbs, mbs, np.zeros(len(mbs), int), host, radio, sim, rng, self_tier=1)
        backhaul_load = mbs_per_sbs[host] + phi * users_per_sbs[host]
        backhaul_delays = backhaul_load / capacity(host_distance, radio.power_static_w, links(util), radio)
        served = users_per_mbs >= 1
        mbs_with_users = int(np.count_nonzero(served))
        needed = util["s"] * radio.target_delay_tau0_s / np.maximum(users_per_mbs, 1)
        violations = int(np.count_nonzero(served & (backhaul_delays > needed)))

    return _Replication(delay_sum, delay_count, violations, mbs_with_users, util, residual,
                        assoc.distance.copy() if sim.keep_samples else None,
                        backhaul_delays if sim.keep_samples else None,
                        host_distance if sim.keep_samples else None,
                        mean_delay)


def _t_interval(values):
    values = np.asarray(values, dtype=float)
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, (math.nan, math.nan)
    half = stats.t.ppf(0.975, len(values) - 1) * np.std(values, ddof=1) / math.sqrt(len(values))
    return mean, (mean - half, mean + half)


def _window_check(st: SlotState, sim: SimSettings):
    area = sim.window_side_m ** 2
    for name, density in (("static", st.lambda_s), ("moving", st.lambda_m)):
        if density > 0 and density * area < sim.min_expected_bs:
            logger.warning("Simulator: window holds only %.0f %s stations on average (< %d); edge bias grows",
                           density * area, name, sim.min_expected_bs)


def measure_slot(st: SlotState, radio, sim: SimSettings, runner: BackgroundRunner = None,
                 setup: str = "") -> SimulationReport:
    """
    Estimates Palm-mean per-bit delays per tier with Student-t 95% intervals
    over replications, plus the empirical backhaul violation rate.
    """
    _window_check(st, sim)
    if sim.replications == 1:
        logger.warning("Simulator: a single replication gives no confidence interval")
    runner = runner or BackgroundRunner(sim.workers)
    seeds = np.random.SeedSequence(sim.rng_seed).spawn(sim.replications)
    replications = runner.map(lambda seed: _replicate(st, radio, sim, seed), seeds)
    logger.info("Simulator: %s finished %d replication(s)", setup or str(st), len(replications))

    mean_delay, ci95, per_replication, samples = {}, {}, {}, {}
    for name in TIERS:
        means = [rep.mean_delay[name] for rep in replications if name in rep.mean_delay]
        if means:
            mean_delay[name], ci95[name] = _t_interval(means)
            per_replication[name] = means
            samples[name] = sum(rep.delay_count.get(name, 0) for rep in replications)

    served = sum(rep.mbs_with_users for rep in replications)
    samples["mbs_with_users"] = served
    if served > 0:
        violation = sum(rep.violations for rep in replications) / served
        rates = [rep.violations / rep.mbs_with_users for rep in replications if rep.mbs_with_users > 0]
        _, violation_ci = _t_interval(rates)
    else:
        violation, violation_ci = math.nan, (math.nan, math.nan)

    utilization = {name: float(np.mean([rep.utilization[name] for rep in replications])) for name in TIERS}
    residual = float(np.max([rep.coupling_residual for rep in replications]))
    report = SimulationReport(setup, mean_delay, ci95, violation, violation_ci, samples, per_replication,
                              utilization, residual)
    if sim.keep_samples:
        report.serving_distances = np.concatenate([rep.serving_distances for rep in replications])
        bh = [rep.backhaul_delays for rep in replications if rep.backhaul_delays is not None]
        report.backhaul_delays = np.concatenate(bh) if bh else np.empty(0)
        links = [rep.backhaul_distances for rep in replications if rep.backhaul_distances is not None]
        report.backhaul_distances = np.concatenate(links) if links else np.empty(0)
    return report


def voronoi_cell_areas_mc(points: np.ndarray, window_side: float, rng: np.random.Generator,
                          samples_per_cell: int = 400) -> np.ndarray:
    """Nearest-point cell areas on the torus, estimated by uniform sample counts."""
    if len(points) == 0:
        raise SimulationError("no points to tessellate")
    samples = rng.uniform(0.0, window_side, size=(samples_per_cell * len(points), 2))
    _, owner = _nearest(samples, points, window_side)
    return np.bincount(owner, minlength=len(points)) * (window_side ** 2 / len(samples))


def tier_cell_areas_mc(sbs: np.ndarray, mbs: np.ndarray, radio, window_side: float, rng: np.random.Generator,
                       samples: int = 1_000_000) -> dict:
    """Mean strongest-power cell area per tier, estimated by uniform sample points."""
    points = rng.uniform(0.0, window_side, size=(samples, 2))
    assoc = associate(points, sbs, mbs, radio, window_side)
    share = np.bincount(assoc.tier, minlength=2) / samples
    out = {}
    for code, (name, stations) in enumerate(zip(TIERS, (sbs, mbs))):
        if len(stations):
            out[name] = share[code] * window_side ** 2 / len(stations)
    return out


@dataclass
class CampaignRow:
    setup: str
    state: SlotState
    analytic: object
    analytic_violation: float
    simulation: SimulationReport
    in_ci: dict


def run_campaign(setups: list, radio, sim: SimSettings, fp: FixedPointSettings = None,
                 q: QuadratureSettings = None, runner: BackgroundRunner = None,
                 violation_method: str = "distance", user_count: str = "truncated") -> list:
    """
    Simulates each (label, SlotState) setup and solves it analytically.
    Every setup reuses the same replication seeds, so identical setups give
    identical rows and trends across setups share their randomness. The
    analytic side uses the given users-per-cell model.
    """
    if not setups:
        raise ValueError("run_campaign needs at least one setup")
    runner = runner or BackgroundRunner(sim.workers)
    rows = []
    for label, st in setups:
        solution = solve_delays(st, radio, fp, q, user_count)
        violation = math.nan
        if st.lambda_m > 0 and solution.converged:
            try:
                violation = violation_probability(BackhaulContext(st, radio, solution, q or QuadratureSettings()),
                                                  method=violation_method)
            except BackhaulError as err:
                logger.warning("Simulator: %s analytic violation unavailable: %s", label, err)
        report = measure_slot(st, radio, sim, runner, label)
        analytic = {"s": solution.tau_bar_s, "m": solution.tau_bar_m}
        in_ci = {}
        for name, (lo, hi) in report.ci95.items():
            in_ci[name] = bool(lo <= analytic[name] <= hi) if not math.isnan(lo) else None
        rows.append(CampaignRow(label, st, solution, violation, report, in_ci))
        logger.info("Simulator: %s analytic-in-CI %s", label, in_ci)
    return rows
