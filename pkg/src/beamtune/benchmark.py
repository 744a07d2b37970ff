"""Benchmark harness: optimizer sweeps, metrics, and study tables.

Runs each optimizer over a shared trial set with per-(trial, optimizer)
seeds derived from the suite seed, aggregates the final-MAE and
step-count metrics, and produces the study tables: screen variants,
feedback drift, actuator failure, target grid scans, and latency
scaling summaries.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from zlib import crc32

import numpy as np

from .baselines import (
    RandomSearchConfig,
    SimplexConfig,
    run_nelder_mead,
    run_random_search,
    tuned_simplex,
)
from .bo import BOConfig, run_bo
from .environment import ScenarioConfig, Trial, TrialRanges, TuningEnv
from .errors import BeamtuneError, ConfigurationError
from .policy import PolicyWeights, run_policy
from .records import RunRecord

EPSILON = 20e-6  # screen measurement accuracy, metres

SCENARIO_STUDY_CELLS = (
    ("normal", ScenarioConfig()),
    ("drift-instant", ScenarioConfig(drift="instant")),
    ("drift-continuous", ScenarioConfig(drift="continuous")),
    ("failure-before", ScenarioConfig(failure="before")),
    ("failure-during", ScenarioConfig(failure="during")),
)


def steps_to_target(record: RunRecord, epsilon: float = EPSILON) -> int | None:
    """First optimisation step whose measured MAE is strictly below epsilon."""
    for index, row in enumerate(record.search_steps()):
        if row.mae < epsilon:
            return index
    return None


def steps_to_convergence(record: RunRecord, epsilon: float = EPSILON) -> int | None:
    """Earliest step after which the best-seen MAE improves by less than epsilon.

    Undefined (None) when that step would be the last one: convergence
    cannot be confirmed at termination.
    """
    best = record.best_mae_series()
    for index in range(len(best) - 1):
        if best[index] - best[-1] < epsilon:
            return index
    return None


@dataclass(frozen=True)
class MetricsRow:
    """Aggregate metrics for one optimizer over a trial set (µm and steps)."""

    optimizer_id: str
    n_trials: int
    final_mae_median_um: float
    final_mae_mean_um: float
    final_mae_std_um: float
    target_median_steps: float | None
    target_mean_steps: float | None
    target_std_steps: float | None
    target_success_rate: float
    convergence_median_steps: float | None
    convergence_mean_steps: float | None
    convergence_std_steps: float | None
    convergence_success_rate: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _step_stats(values: list[int], n_trials: int):
    rate = len(values) / n_trials if n_trials else 0.0
    if not values:
        return None, None, None, rate
    arr = np.asarray(values, dtype=float)
    return (
        float(np.median(arr)),
        float(np.mean(arr)),
        float(np.std(arr)),
        rate,
    )


def aggregate_metrics(optimizer_id: str, records: list[RunRecord]) -> MetricsRow:
    """Table-shaped row; step metrics are computed only over successful trials."""
    if not records:
        raise ConfigurationError("cannot aggregate an empty record list")
    finals = np.array([r.final_mae for r in records], dtype=float) * 1e6
    targets = [s for r in records if (s := steps_to_target(r)) is not None]
    convs = [s for r in records if (s := steps_to_convergence(r)) is not None]
    t_med, t_mean, t_std, t_rate = _step_stats(targets, len(records))
    c_med, c_mean, c_std, c_rate = _step_stats(convs, len(records))
    return MetricsRow(
        optimizer_id=optimizer_id,
        n_trials=len(records),
        final_mae_median_um=float(np.median(finals)),
        final_mae_mean_um=float(np.mean(finals)),
        final_mae_std_um=float(np.std(finals)),
        target_median_steps=t_med,
        target_mean_steps=t_mean,
        target_std_steps=t_std,
        target_success_rate=t_rate,
        convergence_median_steps=c_med,
        convergence_mean_steps=c_mean,
        convergence_std_steps=c_std,
        convergence_success_rate=c_rate,
    )


def win_rates(records_by_optimizer: dict[str, list[RunRecord]]) -> dict[str, dict[str, float]]:
    """Pairwise fraction of trials where the row optimizer strictly beats the column.

    Ties count in the denominator but never as wins; the diagonal is 0
    by convention.
    """
    table: dict[str, dict[str, float]] = {}
    for first, first_records in records_by_optimizer.items():
        table[first] = {}
        for second, second_records in records_by_optimizer.items():
            if first == second:
                table[first][second] = 0.0
                continue
            pairs = list(zip(first_records, second_records))
            wins = sum(a.final_mae < b.final_mae for a, b in pairs)
            table[first][second] = wins / len(pairs) if pairs else 0.0
    return table


@dataclass(frozen=True)
class OptimizerSpec:
    """Named optimizer: a runner mapping (trial, scenario, seed, budget) to a record."""

    optimizer_id: str
    runner: object

    def run(
        self,
        trial: Trial,
        scenario: ScenarioConfig,
        seed: int,
        budget: int,
        scenario_id: str = "",
        ranges: TrialRanges | None = None,
    ) -> RunRecord:
        return self.runner(trial, scenario, seed, budget, scenario_id, ranges)


def bo_optimizer(base: BOConfig | None = None) -> OptimizerSpec:
    base = base or BOConfig()

    def runner(trial, scenario, seed, budget, scenario_id, ranges):
        config = replace(base, budget=budget, seed=seed)
        env = TuningEnv(trial, scenario, scenario_id=scenario_id, ranges=ranges)
        return run_bo(env, config)

    return OptimizerSpec("bo", runner)


def simplex_optimizer(config: SimplexConfig | None = None) -> OptimizerSpec:
    base = config or tuned_simplex()

    def runner(trial, scenario, seed, budget, scenario_id, ranges):
        env = TuningEnv(trial, scenario, scenario_id=scenario_id, ranges=ranges)
        return run_nelder_mead(env, replace(base, budget=budget), seed=seed)

    return OptimizerSpec("simplex", runner)


def random_optimizer() -> OptimizerSpec:
    def runner(trial, scenario, seed, budget, scenario_id, ranges):
        env = TuningEnv(trial, scenario, scenario_id=scenario_id, ranges=ranges)
        return run_random_search(env, RandomSearchConfig(budget=budget, seed=seed))

    return OptimizerSpec("random", runner)


def policy_optimizer(weights: PolicyWeights, budget: int = 50) -> OptimizerSpec:
    """Policy rows use their own short budget regardless of the suite's."""

    def runner(trial, scenario, seed, suite_budget, scenario_id, ranges):
        env = TuningEnv(
            trial,
            scenario,
            scenario_id=scenario_id,
            ranges=ranges,
            action_mode="delta",
        )
        return run_policy(env, weights, budget=budget)

    return OptimizerSpec("policy", runner)


def derive_seed(suite_seed: int, trial_index: int, optimizer_id: str) -> int:
    """Deterministic per-(trial, optimizer) seed, independent of run order."""
    sequence = np.random.SeedSequence(
        [suite_seed, trial_index, crc32(optimizer_id.encode("utf-8"))]
    )
    return int(sequence.generate_state(1)[0])


@dataclass
class SuiteReport:
    scenario_id: str
    suite_seed: int
    budget: int
    rows: list[MetricsRow]
    win_rates: dict[str, dict[str, float]]
    records: dict[str, list[RunRecord]]
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "suite_seed": self.suite_seed,
            "budget": self.budget,
            "rows": [row.to_dict() for row in self.rows],
            "win_rates": self.win_rates,
            "failures": list(self.failures),
            "n_trials": len(next(iter(self.records.values()), [])),
        }


def _run_one(
    spec, trial, trial_index, scenario, scenario_id, suite_seed, budget, ranges
):
    seed = derive_seed(suite_seed, trial_index, spec.optimizer_id)
    record = spec.run(trial, scenario, seed, budget, scenario_id, ranges)
    record.trial_id = f"t{trial_index:03d}"
    record.optimizer_id = spec.optimizer_id
    record.scenario_id = scenario_id
    return record


def run_suite(
    optimizers: list[OptimizerSpec],
    trials: list[Trial],
    *,
    scenario: ScenarioConfig | None = None,
    scenario_id: str = "sim-infinite",
    seed: int = 0,
    budget: int = 150,
    jobs: int = 1,
    ranges: TrialRanges | None = None,
) -> SuiteReport:
    """Run every optimizer over the shared trials and aggregate the metrics.

    A crash in one (trial, optimizer) run is recorded and the sweep
    continues; results are ordered by trial index however many workers
    ran them.
    """
    if not optimizers or not trials:
        raise ConfigurationError("need at least one optimizer and one trial")
    if len({spec.optimizer_id for spec in optimizers}) != len(optimizers):
        raise ConfigurationError("optimizer ids must be unique")
    scenario = scenario or ScenarioConfig()
    records: dict[str, list[RunRecord]] = {s.optimizer_id: [] for s in optimizers}
    failures: list[dict] = []
    tasks = [
        (spec, trial, index)
        for spec in optimizers
        for index, trial in enumerate(trials)
    ]

    def execute(task):
        spec, trial, index = task
        try:
            return spec.optimizer_id, index, _run_one(
                spec, trial, index, scenario, scenario_id, seed, budget, ranges
            )
        except BeamtuneError as exc:
            return spec.optimizer_id, index, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(execute, tasks))
    else:
        outcomes = [execute(task) for task in tasks]

    by_optimizer: dict[str, dict[int, RunRecord]] = {
        s.optimizer_id: {} for s in optimizers
    }
    for optimizer_id, index, outcome in outcomes:
        if isinstance(outcome, Exception):
            failures.append(
                {
                    "trial_id": f"t{index:03d}",
                    "optimizer_id": optimizer_id,
                    "error": str(outcome),
                }
            )
        else:
            by_optimizer[optimizer_id][index] = outcome
    for spec in optimizers:
        ordered = dict(sorted(by_optimizer[spec.optimizer_id].items()))
        records[spec.optimizer_id] = list(ordered.values())

    rows = [
        aggregate_metrics(spec.optimizer_id, records[spec.optimizer_id])
        for spec in optimizers
        if records[spec.optimizer_id]
    ]
    complete = {
        spec.optimizer_id: records[spec.optimizer_id]
        for spec in optimizers
        if len(records[spec.optimizer_id]) == len(trials)
    }
    return SuiteReport(
        scenario_id=scenario_id,
        suite_seed=seed,
        budget=budget,
        rows=rows,
        win_rates=win_rates(complete),
        records=records,
        failures=failures,
    )


@dataclass
class ScenarioStudyReport:
    suite_seed: int
    budget: int
    cells: dict[str, dict[str, dict]]
    records: dict[str, dict[str, list[RunRecord]]]

    def to_dict(self) -> dict:
        return {
            "suite_seed": self.suite_seed,
            "budget": self.budget,
            "cells": self.cells,
        }


def run_scenario_studies(
    optimizers: list[OptimizerSpec],
    trials: list[Trial],
    *,
    seed: int = 0,
    budget: int = 80,
    jobs: int = 1,
    ranges: TrialRanges | None = None,
) -> ScenarioStudyReport:
    """Feedback and failure studies: five 80-step cells per optimizer.

    ranges should match the distribution the trials came from; the drift
    cells resample the incoming beam from it mid-run.
    """
    ranges = ranges or TrialRanges()
    cells: dict[str, dict[str, dict]] = {}
    all_records: dict[str, dict[str, list[RunRecord]]] = {}
    for cell_id, scenario in SCENARIO_STUDY_CELLS:
        report = run_suite(
            optimizers,
            trials,
            scenario=scenario,
            scenario_id=cell_id,
            seed=seed,
            budget=budget,
            jobs=jobs,
            ranges=ranges,
        )
        cells[cell_id] = {}
        all_records[cell_id] = report.records
        for row in report.rows:
            cells[cell_id][row.optimizer_id] = {
                "mean_final_mae_um": row.final_mae_mean_um,
                "median_final_mae_um": row.final_mae_median_um,
                "n_trials": row.n_trials,
            }
    return ScenarioStudyReport(
        suite_seed=seed, budget=budget, cells=cells, records=all_records
    )


@dataclass(frozen=True)
class GridSpec:
    """Regular target grid over (mu_x, sigma_x, mu_y, sigma_y), metres."""

    mu_x: tuple[float, ...]
    sigma_x: tuple[float, ...]
    mu_y: tuple[float, ...]
    sigma_y: tuple[float, ...]

    def __post_init__(self) -> None:
        for name in ("mu_x", "sigma_x", "mu_y", "sigma_y"):
            values = getattr(self, name)
            if not values or not all(np.isfinite(v) for v in values):
                raise ConfigurationError(f"grid axis {name} needs finite values")
        if any(v <= 0 for v in self.sigma_x + self.sigma_y):
            raise ConfigurationError("grid sigmas must be positive")

    def targets(self) -> list[tuple[float, float, float, float]]:
        return [
            (mx, sx, my, sy)
            for mx in self.mu_x
            for sx in self.sigma_x
            for my in self.mu_y
            for sy in self.sigma_y
        ]


def target_grid_scan(
    optimizer: OptimizerSpec,
    base_trial: Trial,
    grid: GridSpec,
    *,
    seed: int = 0,
    budget: int = 150,
) -> dict:
    """Sweep targets over the grid with fixed incoming beam and misalignments."""
    rows = []
    for index, target in enumerate(grid.targets()):
        trial = replace(base_trial, target=target)
        record = _run_one(
            optimizer, trial, index, ScenarioConfig(), "grid-scan", seed, budget, None
        )
        rows.append(
            {
                "target": list(target),
                "final_mae_um": record.final_mae * 1e6,
                "steps_to_target": steps_to_target(record),
            }
        )
    return {
        "optimizer_id": optimizer.optimizer_id,
        "budget": budget,
        "seed": seed,
        "rows": rows,
    }


def timing_report(records: list[RunRecord]) -> dict:
    """Latency summaries per optimizer: moments, scaling slope, per-step medians."""
    by_optimizer: dict[str, list[RunRecord]] = {}
    for record in records:
        by_optimizer.setdefault(record.optimizer_id, []).append(record)
    report: dict[str, dict] = {}
    for optimizer_id, group in sorted(by_optimizer.items()):
        steps = []
        latencies = []
        for record in group:
            for index, row in enumerate(record.search_steps()):
                steps.append(index)
                latencies.append(row.inference_time)
        if not latencies:
            continue
        steps_arr = np.asarray(steps, dtype=float)
        lat = np.asarray(latencies, dtype=float)
        slope = 0.0
        if len(lat) > 1 and np.ptp(steps_arr) > 0:
            slope = float(np.polyfit(steps_arr, lat, 1)[0])
        mean = float(np.mean(lat))
        max_step = int(steps_arr.max())
        per_step = []
        for step in range(max_step + 1):
            mask = steps_arr == step
            per_step.append(float(np.median(lat[mask])) if np.any(mask) else 0.0)
        report[optimizer_id] = {
            "n_samples": int(len(lat)),
            "mean_s": mean,
            "p50_s": float(np.percentile(lat, 50)),
            "p90_s": float(np.percentile(lat, 90)),
            "slope_s_per_step": slope,
            "slope_fraction_of_mean": slope / mean if mean > 0 else 0.0,
            "per_step_median_s": per_step,
        }
    return report
