# Command-line front end. Every command reads one scenario file, applies
# --set overrides and writes plot-ready CSV/JSON files into --out. Each output
# row and file carries the run manifest hash and seed.
#
# delays.csv:     manifest_hash, seed, region, slot, lambda_u, lambda_m, lambda_s, phi,
#                 tau_bar_m, tau_bar_s, util_m, util_s, violation, converged, feasible
# sim_report.csv: manifest_hash, seed, setup, tier, analytic, mean, ci_lo, ci_hi,
#                 violation, analytic_violation, n, in_ci
# trace.csv:      manifest_hash, seed, step, iteration, best_fitness, feasible_count
# sweep.csv:      manifest_hash, seed, point, point_seed, <one column per swept key>,
#                 region, slot, metric, value
from dataclasses import asdict, dataclass, field
from pathlib import Path
import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import sys

import numpy as np

from analytic import USER_COUNT_FACTORS, SlotState
from background_runner import BackgroundRunner
from numerics import FixedPointSettings, QuadratureSettings
from optimizer import (CellEvaluation, MetaheuristicSettings, OptimizerSettings, PenaltyWeights, cell_penalty,
                       deployment_cost, evaluate_configuration, optimize_deployment, penalty_from_cells)
from scenario import NetworkConfiguration, Scenario, ScenarioError, load_scenario
from simulator import SimSettings, run_campaign

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MODULE_ERROR = 1
EXIT_USAGE = 2
NEAR_DIVERGENT_ALPHA_MARGIN = 0.2

DELAY_COLUMNS = ["region", "slot", "lambda_u", "lambda_m", "lambda_s", "phi", "tau_bar_m", "tau_bar_s",
                 "util_m", "util_s", "violation", "converged", "feasible"]
SIM_COLUMNS = ["setup", "tier", "analytic", "mean", "ci_lo", "ci_hi", "violation", "analytic_violation", "n",
               "in_ci"]
TRACE_COLUMNS = ["step", "iteration", "best_fitness", "feasible_count"]


class UsageError(Exception):
    """Problems with the invocation rather than with the model (exit status 2)."""


def _file_digest(path) -> str:
    if path is None:
        return ""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    scenario_path: Path
    output_dir: Path
    seed: int = 0
    overrides: list = field(default_factory=list)
    jobs: int = 1
    replications: int = None
    mode: str = None
    method: str = "distance"
    user_count: str = "truncated"
    config_path: Path = None
    run: str = "optimize"

    @property
    def digest(self) -> str:
        """
        Hash of everything that determines the results: the scenario and
        configuration file contents, seed, overrides and model options.
        The output directory and the worker count do not enter it.
        """
        content = {
            "command": self.command,
            "scenario_sha256": _file_digest(self.scenario_path),
            "config_sha256": _file_digest(self.config_path),
            "seed": self.seed,
            "overrides": [[key, value] for key, value in self.overrides],
            "replications": self.replications,
            "mode": self.mode,
            "method": self.method,
            "user_count": self.user_count,
            "run": self.run,
        }
        encoded = json.dumps(content, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()[:16]

    def to_dict(self) -> dict:
        values = asdict(self)
        for key in ("scenario_path", "output_dir", "config_path"):
            values[key] = None if values[key] is None else str(values[key])
        values["overrides"] = [[key, value] for key, value in self.overrides]
        values["hash"] = self.digest
        return values


def parse_override(text: str):
    """'dotted.key=value' with value parsed as JSON, or kept as a string if it is not JSON."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"--set expects key=value, got '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return value


class _ResultWriter(object):
    """Writes the command's output files; every row is stamped with hash and seed."""
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.stamp = {"manifest_hash": manifest.digest, "seed": manifest.seed}
        manifest.output_dir.mkdir(parents=True, exist_ok=True)

    def write_csv(self, name: str, columns: list, rows: list) -> Path:
        path = self.manifest.output_dir / name
        with path.open("w", newline="") as out_file:
            writer = csv.DictWriter(out_file, fieldnames=["manifest_hash", "seed"] + columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({**self.stamp, **{key: _csv_value(row.get(key)) for key in columns}})
        logger.info("Planner: Wrote %d row(s) to %s", len(rows), path)
        return path

    def write_json(self, name: str, document: dict) -> Path:
        path = self.manifest.output_dir / name
        with path.open("w") as out_file:
            json.dump({"manifest": self.manifest.to_dict(), **document}, out_file, indent=4,
                      default=_json_default)
        logger.info("Planner: Wrote %s", path)
        return path


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return str(value)


def _nan_to_none(value):
    return None if isinstance(value, float) and math.isnan(value) else value


def _load(manifest: RunManifest, sweep_axes: bool = False):
    """Loads the scenario and applies overrides. Returns (scenario, sweep axes)."""
    scenario = load_scenario(manifest.scenario_path)
    fixed, axes = {}, []
    for key, value in manifest.overrides:
        if sweep_axes and isinstance(value, list):
            axes.append((key, value))
        else:
            fixed[key] = value
    if fixed:
        scenario = scenario.with_overrides(fixed)
    return scenario, axes


def _solver_settings(s: Scenario):
    return (FixedPointSettings.from_dict(s.settings_block("fixed_point")),
            QuadratureSettings.from_dict(s.settings_block("numerics")))


def _configuration(s: Scenario, manifest: RunManifest) -> NetworkConfiguration:
    if manifest.config_path is not None:
        with manifest.config_path.open("r") as config_file:
            document = json.load(config_file)
        cfg = NetworkConfiguration.from_dict(document.get("configuration", document))
        cfg.check_dimensions(s)
        return cfg
    if s.configuration is None:
        raise ScenarioError("configuration is missing: add a configuration block or pass --config")
    return s.configuration


def _cell_rows(s: Scenario, cells: list) -> list:
    rows = []
    J = s.num_slots_J
    for k, cell in enumerate(cells):
        st, solution = cell.state, cell.solution
        _, feasible = cell_penalty(cell, s.radio, PenaltyWeights())
        row = {"region": k // J, "slot": k % J, "lambda_u": st.lambda_u, "lambda_m": st.lambda_m,
               "lambda_s": st.lambda_s, "phi": st.phi, "violation": cell.violation, "feasible": feasible,
               "converged": solution is not None and solution.converged}
        if solution is not None:
            row.update(tau_bar_s=solution.tau_bar_s, util_s=solution.util_s)
            if st.lambda_m > 0:
                row.update(tau_bar_m=solution.tau_bar_m, util_m=solution.util_m)
        rows.append(row)
    return rows


def _evaluate_scenario(s: Scenario, manifest: RunManifest, runner: BackgroundRunner):
    fp, q = _solver_settings(s)
    cfg = _configuration(s, manifest)
    cells = evaluate_configuration(cfg, s, fp, q, manifest.method, runner)
    breakdown = penalty_from_cells(cells, cfg, s, PenaltyWeights.from_dict(s.settings_block("penalties")))
    return cfg, cells, breakdown


def cmd_evaluate(manifest: RunManifest) -> int:
    s, _ = _load(manifest)
    runner = BackgroundRunner(manifest.jobs)
    cfg, cells, breakdown = _evaluate_scenario(s, manifest, runner)
    writer = _ResultWriter(manifest)
    rows = _cell_rows(s, cells)
    writer.write_csv("delays.csv", DELAY_COLUMNS, rows)

    alpha = s.radio.path_loss_alpha
    near_divergent = alpha - 2.0 < NEAR_DIVERGENT_ALPHA_MARGIN
    if near_divergent:
        logger.warning("Planner: path_loss_alpha=%.3g is close to 2; mean interference is near divergence", alpha)
    writer.write_json("summary.json", {
        "scenario": s.name,
        "cost": breakdown.objective,
        "fitness": breakdown.total,
        "feasible": breakdown.feasible,
        "all_converged": all(row["converged"] for row in rows),
        "near_divergent_interference": near_divergent,
        "path_loss_alpha": alpha,
        "configuration": cfg.to_dict(),
    })
    return EXIT_OK


def _sim_settings(s: Scenario, manifest: RunManifest) -> SimSettings:
    values = s.settings_block("simulation")
    values.update(rng_seed=manifest.seed, workers=manifest.jobs)
    if manifest.replications is not None:
        values["replications"] = manifest.replications
    if manifest.mode is not None:
        values["interference_mode"] = manifest.mode
    return SimSettings.from_dict(values)


def cmd_simulate(manifest: RunManifest) -> int:
    s, _ = _load(manifest)
    cfg = _configuration(s, manifest)
    fp, q = _solver_settings(s)
    sim = _sim_settings(s, manifest)
    setups = [(f"{s.regions[z].name}/slot{j}",
               SlotState(s.regions[z].user_density_per_slot[j], cfg.mbs_density[z, j], cfg.sbs_density[z],
                         cfg.wps_weight_phi[z, j]))
              for z in range(s.num_regions) for j in range(s.num_slots_J)]
    rows = []
    for campaign_row in run_campaign(setups, s.radio, sim, fp, q, BackgroundRunner(manifest.jobs),
                                     manifest.method, manifest.user_count):
        report = campaign_row.simulation
        analytic = {"s": campaign_row.analytic.tau_bar_s, "m": campaign_row.analytic.tau_bar_m}
        for tier, mean in report.mean_delay_s.items():
            lo, hi = report.ci95[tier]
            rows.append({"setup": campaign_row.setup, "tier": tier, "analytic": analytic[tier], "mean": mean,
                         "ci_lo": lo, "ci_hi": hi, "violation": report.empirical_violation,
                         "analytic_violation": campaign_row.analytic_violation, "n": report.samples[tier],
                         "in_ci": campaign_row.in_ci.get(tier)})
    writer = _ResultWriter(manifest)
    writer.write_csv("sim_report.csv", SIM_COLUMNS, rows)
    writer.write_json("summary.json", {
        "scenario": s.name,
        "replications": sim.replications,
        "interference_mode": sim.interference_mode,
        "user_count": manifest.user_count,
        "all_in_ci": all(row["in_ci"] for row in rows) if rows else None,
    })
    return EXIT_OK


def _optimizer_settings(s: Scenario, seed: int, jobs: int, method: str):
    ms = MetaheuristicSettings.from_dict({**s.settings_block("metaheuristic"), "rng_seed": seed, "workers": jobs})
    opt = OptimizerSettings.from_dict({**s.settings_block("optimizer"), "violation_method": method})
    return PenaltyWeights.from_dict(s.settings_block("penalties")), ms, opt


def _optimize_scenario(s: Scenario, seed: int, jobs: int, method: str, runner: BackgroundRunner):
    w, ms, opt = _optimizer_settings(s, seed, jobs, method)
    fp, q = _solver_settings(s)
    return optimize_deployment(s, w, ms, opt, fp, q, runner)


def _optimized_cells(s: Scenario, result) -> list:
    cells = []
    for z in range(s.num_regions):
        for j in range(s.num_slots_J):
            st = SlotState(s.regions[z].user_density_per_slot[j], result.config.mbs_density[z, j],
                           result.config.sbs_density[z], result.config.wps_weight_phi[z, j])
            cells.append(CellEvaluation(st, result.per_slot_solutions[z][j], float(result.violation_grid[z, j])))
    return cells


def cmd_optimize(manifest: RunManifest) -> int:
    s, _ = _load(manifest)
    runner = BackgroundRunner(manifest.jobs)
    result = _optimize_scenario(s, manifest.seed, manifest.jobs, manifest.method, runner)
    writer = _ResultWriter(manifest)
    writer.write_json("config.json", {"configuration": result.config.to_dict()})
    writer.write_csv("trace.csv", TRACE_COLUMNS, [asdict(row) for row in result.trace])
    cells = [{key: _nan_to_none(row.get(key)) for key in DELAY_COLUMNS}
             for row in _cell_rows(s, _optimized_cells(s, result))]
    writer.write_json("summary.json", {
        "scenario": s.name,
        "cost": result.cost,
        "fitness": result.fitness,
        "feasible": result.feasible,
        "reuse_fraction": result.reuse_fraction,
        "alt_mbs_reuse_fraction": result.alt_mbs_reuse_fraction,
        "mbs_share": result.mbs_share,
        "step_fitness": list(result.step_fitness),
        "static_bounds": result.static_bounds,
        "mbs_count_per_slot": result.config.mbs_totals_per_slot(s),
        "mbs_transfers": result.config.mbs_transfers(s),
        "cells": cells,
    })
    return EXIT_OK


def _point_seed(seed: int, point: int) -> int:
    return int(np.random.SeedSequence([seed, point]).generate_state(1)[0])


def _cell_metric_rows(s: Scenario, cells: list) -> list:
    rows = []
    for row in _cell_rows(s, cells):
        for metric in ("tau_bar_m", "tau_bar_s", "util_m", "util_s", "violation"):
            if metric in row:
                rows.append((row["region"], row["slot"], metric, row[metric]))
    return rows


def _sweep_point_rows(s: Scenario, manifest: RunManifest, point_seed: int) -> list:
    """(region, slot, metric, value) rows for one sweep point."""
    if manifest.run == "evaluate":
        _, cells, breakdown = _evaluate_scenario(s, manifest, None)
        rows = [("", "", "cost", breakdown.objective), ("", "", "feasible", breakdown.feasible)]
        return rows + _cell_metric_rows(s, cells)

    result = _optimize_scenario(s, point_seed, 1, manifest.method, None)
    cost, mbs_count = deployment_cost(result.config, s)
    transfers = result.config.mbs_transfers(s)
    rows = [("", "", "cost", cost), ("", "", "mbs_count", mbs_count), ("", "", "fitness", result.fitness),
            ("", "", "feasible", result.feasible), ("", "", "reuse_fraction", result.reuse_fraction),
            ("", "", "alt_mbs_reuse_fraction", result.alt_mbs_reuse_fraction),
            ("", "", "mbs_share", result.mbs_share)]
    for z in range(s.num_regions):
        rows.append((z, "", "sbs_density", result.config.sbs_density[z]))
        rows.append((z, "", "static_bound", result.static_bounds[z]))
        for j in range(s.num_slots_J):
            rows.append((z, j, "mbs_density", result.config.mbs_density[z, j]))
            rows.append((z, j, "wps_weight_phi", result.config.wps_weight_phi[z, j]))
            rows.append((z, j, "mbs_transfer", transfers[z, j]))
    return rows + _cell_metric_rows(s, _optimized_cells(s, result))


def cmd_sweep(manifest: RunManifest) -> int:
    base, axes = _load(manifest, sweep_axes=True)
    keys = [key for key, _ in axes]
    grid = list(itertools.product(*[values for _, values in axes])) if axes else []
    if not grid:
        raise UsageError("empty sweep grid: pass at least one --set key=[v1, v2, ...] with a non-empty list")
    logger.info("Planner: Sweeping %d point(s) over %s", len(grid), keys)

    def run_point(indexed):
        point, combo = indexed
        s = base.with_overrides(dict(zip(keys, combo)))
        seed = _point_seed(manifest.seed, point)
        return [(point, seed, combo, row) for row in _sweep_point_rows(s, manifest, seed)]

    results = BackgroundRunner(manifest.jobs).map(run_point, list(enumerate(grid)))
    rows = []
    for point_rows in results:
        for point, seed, combo, (region, slot, metric, value) in point_rows:
            row = {"point": point, "point_seed": seed, "region": region, "slot": slot, "metric": metric,
                   "value": value}
            row.update({key: json.dumps(v) if isinstance(v, (list, dict)) else v for key, v in zip(keys, combo)})
            rows.append(row)
    _ResultWriter(manifest).write_csv("sweep.csv", ["point", "point_seed"] + keys
                                      + ["region", "slot", "metric", "value"], rows)
    return EXIT_OK


COMMANDS = {
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw of the run")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scenario value (JSON); a list makes the key a sweep axis")
    common.add_argument("--method", choices=["demand", "distance"], default="distance",
                        help="backhaul violation computation")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="moving_net_planner",
                                     description="Delay analysis, simulation and deployment optimisation "
                                                 "for networks with static and moving base stations")
    subparsers = parser.add_subparsers(dest="command", required=True)
    evaluate = subparsers.add_parser("evaluate", parents=[common], help="analytic delays of a configuration")
    evaluate.add_argument("--config", type=Path, help="configuration JSON (e.g. an optimize config.json)")
    simulate = subparsers.add_parser("simulate", parents=[common], help="Monte-Carlo check of the analysis")
    simulate.add_argument("--config", type=Path, help="configuration JSON")
    simulate.add_argument("--replications", type=int, help="number of independent drops")
    simulate.add_argument("--mode", choices=["expected", "bernoulli"], help="interference realisation")
    simulate.add_argument("--user-count", choices=sorted(USER_COUNT_FACTORS), default="truncated",
                          help="users-per-cell model of the analytic side")
    subparsers.add_parser("optimize", parents=[common], help="minimise the deployment cost")
    sweep = subparsers.add_parser("sweep", parents=[common], help="cross-product sweep over --set lists")
    sweep.add_argument("--run", choices=["evaluate", "optimize"], default="optimize",
                       help="what to compute at each point")
    sweep.add_argument("--config", type=Path, help="configuration JSON for --run evaluate")
    return parser


def manifest_from_args(args) -> RunManifest:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if not args.scenario.is_file():
        raise UsageError(f"scenario not found: {args.scenario}")
    config_path = getattr(args, "config", None)
    if config_path is not None and not config_path.is_file():
        raise UsageError(f"configuration not found: {config_path}")
    return RunManifest(
        command=args.command,
        scenario_path=args.scenario,
        output_dir=args.out,
        seed=args.seed,
        overrides=[parse_override(text) for text in args.overrides],
        jobs=args.jobs,
        replications=getattr(args, "replications", None),
        mode=getattr(args, "mode", None),
        method=args.method,
        user_count=getattr(args, "user_count", "truncated"),
        config_path=config_path,
        run=getattr(args, "run", "optimize"),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stdout, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        manifest = manifest_from_args(args)
        logger.info("Planner: %s run %s (seed %d)", manifest.command, manifest.digest, manifest.seed)
        return COMMANDS[manifest.command](manifest)
    except UsageError as err:
        logger.error("Planner: %s", err)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as err:
        logger.error("Planner: %s failed: %s", args.command, err)
        return EXIT_MODULE_ERROR


if __name__ == "__main__":
    sys.exit(main())
