# A scenario describes one planning experiment: the radio parameters shared by
# every base station, the city regions with their per-slot user densities and
# the relative unit cost of a moving base station. Everything is in SI units
# (densities per m^2, powers in W, delays in s/bit).
from copy import deepcopy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import json
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BOLTZMANN_J_PER_K = 1.380649e-23
SPEED_OF_LIGHT_M_PER_S = 299792458.0
# Relative tolerance on the per-slot moving base station totals.
CONSERVATION_REL_TOL = 1e-6

# {
#   "schema_version": 1,
#   "name": "value",
#   "num_slots": J,
#   "mbs_relative_cost_mu": mu,
#   "radio": {
#       "bandwidth_hz": 10e6, "reuse_factor_k": 3, "path_loss_alpha": 3.0,
#       "noise_psd_w_per_hz": 4.0e-21, "power_static_w": 3.0, "power_mobile_w": 3.0,
#       "target_delay_tau0_s": 1e-5, "violation_target_delta": 0.05,
#       "allow_equal_power": true, "carrier_frequency_hz": 1.5e9, "reference_gain": 1.0
#   },
#   "regions": [
#       {"name": "value", "area_m2": 1e6, "user_density_per_slot": [1e-2, ...]},
#       ...
#   ],
#   -- or, instead of "regions" --
#   "commuting": {
#       "mean_user_density": 1e-2, "peak_to_trough": 10.0, "peak_slot": 2,
#       "area_ratio_gamma": 1.0, "total_area_m2": 2e6
#   },
#   "configuration": {                      (optional, used by "evaluate")
#       "sbs_density": [...], "mbs_density": [[...], ...], "wps_weight_phi": [[...], ...]
#   },
#   "settings": {                           (optional)
#       "numerics": {...}, "fixed_point": {...}, "optimizer": {...},
#       "penalties": {...}, "metaheuristic": {...}, "simulation": {...}
#   }
# }


class ScenarioError(ValueError):
    """Invalid scenario input. The message always names the offending field."""


def thermal_noise_psd(temperature_k: float = 290.0) -> float:
    """Thermal noise power spectral density k*T in W/Hz (about -174 dBm/Hz at 290 K)."""
    return BOLTZMANN_J_PER_K * temperature_k


def _require(condition: bool, message: str):
    if not condition:
        raise ScenarioError(message)


def _finite(value) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


@dataclass(frozen=True)
class RadioParams:
    bandwidth_hz: float = 10e6
    reuse_factor_k: int = 3
    path_loss_alpha: float = 3.0
    noise_psd_w_per_hz: float = field(default_factory=thermal_noise_psd)
    power_static_w: float = 3.0
    power_mobile_w: float = 3.0
    target_delay_tau0_s: float = 1e-5
    violation_target_delta: float = 0.05
    # Equal tier powers are only meaningful for validation runs.
    allow_equal_power: bool = True
    carrier_frequency_hz: float = 1.5e9
    # Multiplies every received power, signal and interference alike.
    reference_gain: float = 1.0

    def __post_init__(self):
        _require(_finite(self.bandwidth_hz) and self.bandwidth_hz > 0, "bandwidth_hz must be positive")
        _require(isinstance(self.reuse_factor_k, (int, np.integer)) and self.reuse_factor_k >= 1,
                 "reuse_factor_k must be a positive integer")
        _require(_finite(self.path_loss_alpha) and self.path_loss_alpha > 2, "path_loss_alpha must exceed 2")
        _require(_finite(self.noise_psd_w_per_hz) and self.noise_psd_w_per_hz >= 0,
                 "noise_psd_w_per_hz must be nonnegative")
        _require(_finite(self.power_static_w) and self.power_static_w > 0, "power_static_w must be positive")
        _require(_finite(self.power_mobile_w) and self.power_mobile_w > 0, "power_mobile_w must be positive")
        _require(self.power_mobile_w <= self.power_static_w,
                 "power_mobile_w must not exceed power_static_w")
        _require(self.allow_equal_power or self.power_mobile_w < self.power_static_w,
                 "power_mobile_w equals power_static_w but allow_equal_power is false")
        _require(_finite(self.target_delay_tau0_s) and self.target_delay_tau0_s > 0,
                 "target_delay_tau0_s must be positive")
        _require(_finite(self.violation_target_delta) and 0 <= self.violation_target_delta <= 1,
                 "violation_target_delta must lie in [0, 1]")
        _require(_finite(self.carrier_frequency_hz) and self.carrier_frequency_hz > 0,
                 "carrier_frequency_hz must be positive")
        _require(_finite(self.reference_gain) and self.reference_gain > 0, "reference_gain must be positive")

    @property
    def rho_ms(self) -> float:
        """Distance ratio (P_m / P_s)^(1/alpha) that equalises received power across tiers."""
        return (self.power_mobile_w / self.power_static_w) ** (1.0 / self.path_loss_alpha)

    @property
    def channel_bandwidth_hz(self) -> float:
        return self.bandwidth_hz / self.reuse_factor_k

    @property
    def noise_power_w(self) -> float:
        return self.noise_psd_w_per_hz * self.channel_bandwidth_hz

    def free_space_gain(self) -> float:
        """Free-space gain (c / (4 pi f))^2 at one metre for the carrier frequency."""
        return (SPEED_OF_LIGHT_M_PER_S / (4.0 * math.pi * self.carrier_frequency_hz)) ** 2

    @staticmethod
    def from_dict(values: dict):
        values = dict(values)
        unknown = set(values) - set(RadioParams.__dataclass_fields__)
        _require(not unknown, f"radio: unknown field(s) {sorted(unknown)}")
        if "reuse_factor_k" in values and isinstance(values["reuse_factor_k"], float) \
                and values["reuse_factor_k"].is_integer():
            values["reuse_factor_k"] = int(values["reuse_factor_k"])
        return RadioParams(**values)


@dataclass(frozen=True)
class Region:
    area_m2: float
    user_density_per_slot: tuple
    name: str = ""

    def __post_init__(self):
        label = self.name or "region"
        object.__setattr__(self, "user_density_per_slot", tuple(float(v) for v in self.user_density_per_slot))
        _require(_finite(self.area_m2) and self.area_m2 > 0, f"{label}.area_m2 must be positive")
        _require(len(self.user_density_per_slot) > 0, f"{label}.user_density_per_slot must not be empty")
        for j, density in enumerate(self.user_density_per_slot):
            _require(_finite(density) and density > 0,
                     f"{label}.user_density_per_slot[{j}] must be positive")


@dataclass(frozen=True)
class Scenario:
    regions: tuple
    num_slots_J: int
    mbs_relative_cost_mu: float
    radio: RadioParams
    name: str = "scenario"
    # Raw settings blocks; each module parses its own block with from_dict.
    settings: dict = field(default_factory=dict)
    configuration: object = None

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        _require(isinstance(self.num_slots_J, (int, np.integer)) and self.num_slots_J >= 1,
                 "num_slots must be a positive integer")
        _require(len(self.regions) >= 1, "regions must not be empty")
        _require(_finite(self.mbs_relative_cost_mu) and self.mbs_relative_cost_mu >= 0,
                 "mbs_relative_cost_mu must be nonnegative")
        for z, region in enumerate(self.regions):
            _require(len(region.user_density_per_slot) == self.num_slots_J,
                     f"regions[{z}].user_density_per_slot must have num_slots={self.num_slots_J} entries")

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    @property
    def areas(self) -> np.ndarray:
        return np.array([region.area_m2 for region in self.regions])

    @property
    def user_density(self) -> np.ndarray:
        """User densities as a (regions, slots) array."""
        return np.array([region.user_density_per_slot for region in self.regions])

    def settings_block(self, name: str) -> dict:
        return dict(self.settings.get(name, {}))

    def with_overrides(self, overrides: dict):
        """
        Returns a new scenario with dotted-path overrides applied, e.g.
        {"radio.target_delay_tau0_s": 1e-6, "commuting.area_ratio_gamma": 2}.
        """
        document = scenario_to_dict(self)
        for key, value in overrides.items():
            _apply_override(document, key, value)
        return scenario_from_dict(document)

    @staticmethod
    def load_scenario(scenario_path: Path):
        with Path(scenario_path).open("r") as scenario_file:
            try:
                document = json.load(scenario_file)
            except json.JSONDecodeError as err:
                raise ScenarioError(f"{scenario_path}: not valid JSON ({err})") from err
        scenario = scenario_from_dict(document)
        logger.info("Scenario: Loaded '%s' with %d region(s) and %d slot(s)",
                    scenario.name, scenario.num_regions, scenario.num_slots_J)
        return scenario

    @staticmethod
    def dump_scenario(scenario_path: Path, scenario):
        with Path(scenario_path).open("w") as scenario_file:
            json.dump(scenario_to_dict(scenario), scenario_file, indent=4)


@dataclass(frozen=True)
class NetworkConfiguration:
    """
    Decision variables of the deployment problem. Construction only checks
    shapes and signs; conservation of the moving fleet across slots is checked
    by validate() and total_mbs_count().
    """
    sbs_density: np.ndarray
    mbs_density: np.ndarray
    wps_weight_phi: np.ndarray

    def __post_init__(self):
        sbs = np.array(self.sbs_density, dtype=float, ndmin=1)
        mbs = np.array(self.mbs_density, dtype=float, ndmin=2)
        phi = np.array(self.wps_weight_phi, dtype=float, ndmin=2)
        _require(sbs.ndim == 1, "sbs_density must be one value per region")
        _require(mbs.shape == phi.shape, "mbs_density and wps_weight_phi must have the same shape")
        _require(mbs.shape[0] == sbs.shape[0], "mbs_density must have one row per region")
        for label, array in (("sbs_density", sbs), ("mbs_density", mbs), ("wps_weight_phi", phi)):
            _require(np.all(np.isfinite(array)), f"{label} entries must be finite")
            _require(np.all(array >= 0), f"{label} entries must be nonnegative")
        _require(np.all(sbs > 0), "sbs_density entries must be positive")
        for array in (sbs, mbs, phi):
            array.setflags(write=False)
        object.__setattr__(self, "sbs_density", sbs)
        object.__setattr__(self, "mbs_density", mbs)
        object.__setattr__(self, "wps_weight_phi", phi)

    @property
    def num_regions(self) -> int:
        return self.sbs_density.shape[0]

    @property
    def num_slots(self) -> int:
        return self.mbs_density.shape[1]

    def mbs_totals_per_slot(self, scenario: Scenario) -> np.ndarray:
        self.check_dimensions(scenario)
        return scenario.areas @ self.mbs_density

    def mbs_transfers(self, scenario: Scenario) -> np.ndarray:
        """
        Moving stations each region gains (positive) or hands over (negative)
        when slot j begins, counted from slot j-1; the day wraps around, so
        column 0 is the move from the last slot. Each column sums to zero when
        the fleet is conserved.
        """
        self.check_dimensions(scenario)
        counts = scenario.areas[:, None] * self.mbs_density
        return counts - np.roll(counts, 1, axis=1)

    def sbs_count(self, scenario: Scenario) -> float:
        return float(scenario.areas @ self.sbs_density)

    def mbs_share(self, scenario: Scenario) -> float:
        """Moving base stations as a fraction of all deployed base stations."""
        mbs = float(np.mean(self.mbs_totals_per_slot(scenario)))
        total = mbs + self.sbs_count(scenario)
        return mbs / total if total > 0 else 0.0

    def check_dimensions(self, scenario: Scenario):
        _require(self.num_regions == scenario.num_regions,
                 f"configuration has {self.num_regions} region(s), scenario has {scenario.num_regions}")
        _require(self.num_slots == scenario.num_slots_J,
                 f"configuration has {self.num_slots} slot(s), scenario has {scenario.num_slots_J}")

    def validate(self, scenario: Scenario):
        total_mbs_count(self, scenario)
        return self

    def to_dict(self) -> dict:
        return {
            "sbs_density": self.sbs_density.tolist(),
            "mbs_density": self.mbs_density.tolist(),
            "wps_weight_phi": self.wps_weight_phi.tolist(),
        }

    @staticmethod
    def from_dict(values: dict):
        for key in ("sbs_density", "mbs_density", "wps_weight_phi"):
            _require(key in values, f"configuration.{key} is missing")
        return NetworkConfiguration(values["sbs_density"], values["mbs_density"], values["wps_weight_phi"])

    def __eq__(self, other):
        if not isinstance(other, NetworkConfiguration):
            return NotImplemented
        return (np.array_equal(self.sbs_density, other.sbs_density)
                and np.array_equal(self.mbs_density, other.mbs_density)
                and np.array_equal(self.wps_weight_phi, other.wps_weight_phi))

    __hash__ = None


def total_mbs_count(cfg: NetworkConfiguration, s: Scenario) -> float:
    """
    Size M of the moving fleet: sum over regions of mbs_density * area in slot 0,
    after checking that every slot deploys the same total.
    """
    totals = cfg.mbs_totals_per_slot(s)
    reference = float(totals[0])
    scale = max(np.max(np.abs(totals)), np.finfo(float).tiny)
    spread = float(np.max(totals) - np.min(totals))
    if spread > CONSERVATION_REL_TOL * scale:
        raise ScenarioError(f"mbs_density: per-slot MBS totals differ ({np.min(totals):.6g} to {np.max(totals):.6g})")
    return reference


def commuting_profiles(mean_user_density: float, peak_to_trough: float, peak_slot: int, num_slots: int):
    """
    Piecewise-constant day profiles for a residential and an office district.
    The residential profile is high on the half of the slots centred on
    peak_slot and low elsewhere, with high/low = peak_to_trough and the
    requested mean; the office profile is the same profile shifted by J/2.
    """
    _require(mean_user_density > 0, "commuting.mean_user_density must be positive")
    _require(peak_to_trough >= 1, "commuting.peak_to_trough must be at least 1")
    _require(num_slots >= 1, "num_slots must be a positive integer")
    _require(0 <= peak_slot < num_slots, "commuting.peak_slot must index a slot")

    high_slots = max(1, num_slots // 2)
    offsets = (np.arange(num_slots) - peak_slot + high_slots // 2) % num_slots
    is_high = offsets < high_slots
    low = mean_user_density * num_slots / (high_slots * peak_to_trough + (num_slots - high_slots))
    residential = np.where(is_high, low * peak_to_trough, low)
    office = np.roll(residential, num_slots // 2)
    return residential, office


def commuting_scenario(mean_user_density: float, peak_to_trough: float, peak_slot: int,
                       area_ratio_gamma: float, total_area_m2: float, num_slots: int,
                       mbs_relative_cost_mu: float, radio: RadioParams, name: str = "commuting",
                       settings: dict = None) -> Scenario:
    """Two-region residential/office scenario; gamma is office area over residential area."""
    _require(area_ratio_gamma > 0, "commuting.area_ratio_gamma must be positive")
    _require(total_area_m2 > 0, "commuting.total_area_m2 must be positive")
    residential, office = commuting_profiles(mean_user_density, peak_to_trough, peak_slot, num_slots)
    residential_area = total_area_m2 / (1.0 + area_ratio_gamma)
    regions = (
        Region(residential_area, tuple(residential), "residential"),
        Region(total_area_m2 - residential_area, tuple(office), "office"),
    )
    return Scenario(regions, num_slots, mbs_relative_cost_mu, radio, name, settings or {})


_COMMUTING_KEYS = {"mean_user_density", "peak_to_trough", "peak_slot", "area_ratio_gamma", "total_area_m2"}


def scenario_from_dict(document: dict) -> Scenario:
    _require(isinstance(document, dict), "scenario file must hold a JSON object")
    version = document.get("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    for key in ("num_slots", "mbs_relative_cost_mu", "radio"):
        _require(key in document, f"{key} is missing")
    _require("regions" in document or "commuting" in document, "regions is missing")
    _require(not ("regions" in document and "commuting" in document),
             "regions and commuting are mutually exclusive")

    num_slots = document["num_slots"]
    _require(isinstance(num_slots, int) and not isinstance(num_slots, bool), "num_slots must be an integer")
    radio = RadioParams.from_dict(document["radio"])
    settings = deepcopy(document.get("settings", {}))
    _require(isinstance(settings, dict), "settings must be an object")
    name = document.get("name", "scenario")

    if "commuting" in document:
        block = document["commuting"]
        missing = _COMMUTING_KEYS - set(block)
        unknown = set(block) - _COMMUTING_KEYS
        _require(not missing, f"commuting: missing field(s) {sorted(missing)}")
        _require(not unknown, f"commuting: unknown field(s) {sorted(unknown)}")
        scenario = commuting_scenario(block["mean_user_density"], block["peak_to_trough"], block["peak_slot"],
                                      block["area_ratio_gamma"], block["total_area_m2"], num_slots,
                                      document["mbs_relative_cost_mu"], radio, name, settings)
        scenario = replace(scenario, settings={**settings, "_commuting": dict(block)})
    else:
        regions = []
        for z, region in enumerate(document["regions"]):
            _require("area_m2" in region, f"regions[{z}].area_m2 is missing")
            _require("user_density_per_slot" in region, f"regions[{z}].user_density_per_slot is missing")
            regions.append(Region(region["area_m2"], tuple(region["user_density_per_slot"]),
                                  region.get("name", f"regions[{z}]")))
        scenario = Scenario(tuple(regions), num_slots, document["mbs_relative_cost_mu"], radio, name, settings)

    if "configuration" in document:
        cfg = NetworkConfiguration.from_dict(document["configuration"])
        cfg.check_dimensions(scenario)
        scenario = replace(scenario, configuration=cfg)
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    settings = deepcopy(scenario.settings)
    commuting = settings.pop("_commuting", None)
    document = {
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "num_slots": int(scenario.num_slots_J),
        "mbs_relative_cost_mu": scenario.mbs_relative_cost_mu,
        "radio": asdict(scenario.radio),
    }
    if commuting is not None:
        document["commuting"] = commuting
    else:
        document["regions"] = [
            {"name": region.name, "area_m2": region.area_m2,
             "user_density_per_slot": list(region.user_density_per_slot)}
            for region in scenario.regions
        ]
    if scenario.configuration is not None:
        document["configuration"] = scenario.configuration.to_dict()
    if settings:
        document["settings"] = settings
    return document


def _index(node: list, part: str, dotted_key: str) -> int:
    _require(part.lstrip("-").isdigit() and -len(node) <= int(part) < len(node),
             f"override '{dotted_key}' names an unknown key")
    return int(part)


def _child(node, part: str, dotted_key: str, create: bool):
    if isinstance(node, list):
        return node[_index(node, part, dotted_key)]
    _require(isinstance(node, dict), f"override '{dotted_key}' names an unknown key")
    if part not in node:
        # Settings blocks are optional, so they may be created on demand.
        _require(create, f"override '{dotted_key}' names an unknown key")
        node[part] = {}
    return node[part]


def _apply_override(document: dict, dotted_key: str, value):
    parts = dotted_key.split(".")
    creatable = parts[0] == "settings" and len(parts) >= 3
    node = document
    for part in parts[:-1]:
        node = _child(node, part, dotted_key, creatable)
    leaf = parts[-1]
    if isinstance(node, list):
        node[_index(node, leaf, dotted_key)] = value
        return
    _require(isinstance(node, dict) and (leaf in node or creatable),
             f"override '{dotted_key}' names an unknown key")
    node[leaf] = value


def load_scenario(path) -> Scenario:
    return Scenario.load_scenario(Path(path))


def dump_scenario(path, scenario: Scenario):
    Scenario.dump_scenario(Path(path), scenario)
