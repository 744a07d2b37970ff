"""Benchmark harness tests.

Step-metric examples are hand-frozen from the definitions; suite tests
run real optimizers at small budgets and assert structural invariants
(determinism across worker counts, seed independence from run order,
failure isolation) rather than landscape-dependent outcomes.
"""

import numpy as np
import pytest

from beamtune.baselines import RandomSearchConfig, run_random_search
from beamtune.benchmark import (
    EPSILON,
    GridSpec,
    OptimizerSpec,
    aggregate_metrics,
    bo_optimizer,
    derive_seed,
    policy_optimizer,
    random_optimizer,
    run_scenario_studies,
    run_suite,
    simplex_optimizer,
    steps_to_convergence,
    steps_to_target,
    target_grid_scan,
    timing_report,
    win_rates,
)
from beamtune.bo import BOConfig
from beamtune.environment import (
    FAILED_AXIS,
    ScenarioConfig,
    TuningEnv,
    generate_trials,
)
from beamtune.errors import BeamtuneError, ConfigurationError
from beamtune.policy import PolicyLayer, PolicyWeights
from beamtune.records import (
    InitialState,
    RunRecord,
    StepRow,
    read_records_jsonl,
    write_records_jsonl,
)


def replace_mae(row, mae_m):
    """Copy of a step row with the measured MAE set to an exact float."""
    data = row.to_dict()
    data["mae"] = mae_m
    return StepRow.from_dict(data)


def record_from_maes(maes_um, optimizer_id="x", with_final=True):
    """Record whose search steps have the given measured MAEs in µm."""
    record = RunRecord(optimizer_id=optimizer_id, budget=len(maes_um))
    record.initial = InitialState(
        settings=(0.0,) * 5,
        beam=(0.0,) * 4,
        true_beam=(0.0,) * 4,
        mae=1e-3,
        objective=0.0,
        on_screen=True,
    )
    for index, value in enumerate(maes_um):
        record.add_step(
            StepRow(
                index=index,
                phase="search",
                settings=(0.0,) * 5,
                beam=(0.0,) * 4,
                true_beam=(0.0,) * 4,
                mae=value * 1e-6,
                true_mae=value * 1e-6,
                objective=0.0,
                reward=0.0,
                on_screen=True,
                clamped=False,
                inference_time=0.001 * (index + 1),
            )
        )
    if with_final:
        best = min(maes_um)
        record.set_final((0.0,) * 5, best * 1e-6, 0.0, "return-to-best")
    return record


class TestStepMetrics:
    def test_steps_to_target_frozen_example(self):
        # MAEs 50, 30, 19, 25 µm with the 20 µm threshold: step 2 is the
        # first strictly below it.
        record = record_from_maes([50.0, 30.0, 19.0, 25.0])
        assert steps_to_target(record) == 2

    def test_steps_to_target_requires_strict_inequality(self):
        # A measurement exactly at the threshold does not count.
        record = record_from_maes([50.0, EPSILON * 1e6, 25.0])
        record.steps[1] = replace_mae(record.steps[1], EPSILON)
        assert steps_to_target(record) is None

    def test_steps_to_target_none_when_never_reached(self):
        record = record_from_maes([100.0, 90.0, 80.0])
        assert steps_to_target(record) is None

    def test_steps_to_target_ignores_final_row(self):
        record = record_from_maes([50.0, 30.0])
        record.add_step(
            StepRow(
                index=2,
                phase="final",
                settings=(0.0,) * 5,
                beam=(0.0,) * 4,
                true_beam=(0.0,) * 4,
                mae=1e-6,
                true_mae=1e-6,
                objective=0.0,
                reward=0.0,
                on_screen=True,
                clamped=False,
                inference_time=0.0,
            )
        )
        assert steps_to_target(record) is None

    def test_steps_to_convergence_frozen_example(self):
        # Best-seen series 100, 50, 45, 44, 44: from step 1 on, the gap
        # to the final value stays under 20 µm.
        record = record_from_maes([100.0, 50.0, 45.0, 44.0, 44.0])
        assert steps_to_convergence(record) == 1

    def test_steps_to_convergence_constant_series(self):
        record = record_from_maes([70.0, 70.0, 70.0])
        assert steps_to_convergence(record) == 0

    def test_steps_to_convergence_none_when_still_improving(self):
        # 25 µm of improvement arrives on the very last step, so no
        # earlier step is within 20 µm of the end and the last step
        # itself does not count.
        record = record_from_maes([100.0, 75.0, 50.0, 25.0])
        assert steps_to_convergence(record) is None

    def test_steps_to_convergence_boundary_is_strict(self):
        # Exactly the threshold above the final value does not converge.
        record = record_from_maes([40.0, 20.0, 20.0])
        record.steps[0] = replace_mae(record.steps[0], 2.0 * EPSILON)
        record.steps[1] = replace_mae(record.steps[1], EPSILON)
        record.steps[2] = replace_mae(record.steps[2], EPSILON)
        assert steps_to_convergence(record) == 1

    def test_metrics_use_measured_not_true_mae(self):
        record = record_from_maes([50.0, 30.0, 19.0])
        rows = [
            StepRow(
                index=row.index,
                phase=row.phase,
                settings=row.settings,
                beam=row.beam,
                true_beam=row.true_beam,
                mae=row.mae,
                true_mae=1.0,
                objective=row.objective,
                reward=row.reward,
                on_screen=row.on_screen,
                clamped=row.clamped,
                inference_time=row.inference_time,
            )
            for row in record.steps
        ]
        record.steps = rows
        assert steps_to_target(record) == 2


class TestAggregateMetrics:
    def test_step_stats_cover_only_defined_trials(self):
        records = [
            record_from_maes([50.0, 19.0, 19.0, 19.0]),  # target at 1, conv 1
            record_from_maes([110.0, 90.0, 80.0, 80.0]),  # no target, conv 1
        ]
        row = aggregate_metrics("x", records)
        assert row.n_trials == 2
        assert row.target_success_rate == 0.5
        assert row.target_median_steps == 1
        assert row.convergence_success_rate == 1.0
        assert row.convergence_median_steps == 1

    def test_final_mae_stats_in_microns(self):
        records = [
            record_from_maes([50.0, 30.0, 30.0]),
            record_from_maes([50.0, 40.0, 40.0]),
        ]
        row = aggregate_metrics("x", records)
        assert row.final_mae_median_um == pytest.approx(35.0)
        assert row.final_mae_mean_um == pytest.approx(35.0)
        assert row.final_mae_std_um == pytest.approx(5.0)

    def test_all_step_metrics_undefined(self):
        row = aggregate_metrics("x", [record_from_maes([100.0, 90.0, 80.0])])
        assert row.target_median_steps is None
        assert row.target_success_rate == 0.0


class TestWinRates:
    def test_complementary_without_ties(self):
        records = {
            "a": [record_from_maes([30.0, 30.0]), record_from_maes([10.0, 10.0])],
            "b": [record_from_maes([20.0, 20.0]), record_from_maes([40.0, 40.0])],
        }
        table = win_rates(records)
        assert table["a"]["b"] == 0.5
        assert table["b"]["a"] == 0.5
        assert table["a"]["a"] == 0.0

    def test_ties_count_in_denominator_only(self):
        records = {
            "a": [record_from_maes([30.0]), record_from_maes([10.0])],
            "b": [record_from_maes([30.0]), record_from_maes([20.0])],
        }
        table = win_rates(records)
        assert table["a"]["b"] == 0.5
        assert table["b"]["a"] == 0.0


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(5, 3, "bo") == derive_seed(5, 3, "bo")

    def test_distinct_across_optimizers_and_trials(self):
        seeds = {
            derive_seed(5, index, name)
            for index in range(10)
            for name in ("bo", "simplex", "random")
        }
        assert len(seeds) == 30


def failing_on_trial(fail_index):
    """Optimizer that raises on one trial index and random-searches the rest."""
    calls = []

    def runner(trial, scenario, seed, budget, scenario_id, ranges):
        calls.append(seed)
        if len(calls) - 1 == fail_index:
            raise BeamtuneError("injected failure")
        env = TuningEnv(trial, scenario, scenario_id=scenario_id, ranges=ranges)
        return run_random_search(env, RandomSearchConfig(budget=budget, seed=seed))

    return OptimizerSpec("flaky", runner)


class TestRunSuite:
    @pytest.fixture(scope="class")
    def trials(self):
        return generate_trials(3, 4242)

    def test_rejects_duplicate_ids(self, trials):
        with pytest.raises(ConfigurationError):
            run_suite([random_optimizer(), random_optimizer()], trials, budget=5)

    def test_rejects_empty(self):
        with pytest.raises(ConfigurationError):
            run_suite([random_optimizer()], [], budget=5)

    def test_records_grouped_and_labelled(self, trials):
        report = run_suite(
            [random_optimizer(), simplex_optimizer()], trials, seed=1, budget=10
        )
        assert set(report.records) == {"random", "simplex"}
        for optimizer_id, group in report.records.items():
            assert [r.trial_id for r in group] == ["t000", "t001", "t002"]
            assert all(r.optimizer_id == optimizer_id for r in group)
            assert all(r.scenario_id == "sim-infinite" for r in group)

    def test_worker_count_does_not_change_results(self, trials):
        serial = run_suite([random_optimizer()], trials, seed=9, budget=10)
        threaded = run_suite([random_optimizer()], trials, seed=9, budget=10, jobs=3)
        for a, b in zip(serial.records["random"], threaded.records["random"]):
            assert a.final_mae == b.final_mae
            assert a.final_settings == b.final_settings

    def test_reports_reproducible_for_same_seed(self, trials):
        first = run_suite([random_optimizer()], trials, seed=9, budget=10)
        second = run_suite([random_optimizer()], trials, seed=9, budget=10)
        assert first.to_dict() == second.to_dict()

    def test_failure_recorded_and_suite_continues(self, trials):
        report = run_suite(
            [failing_on_trial(1), random_optimizer()], trials, seed=2, budget=5
        )
        assert len(report.failures) == 1
        assert report.failures[0]["trial_id"] == "t001"
        assert report.failures[0]["optimizer_id"] == "flaky"
        assert len(report.records["flaky"]) == 2
        assert len(report.records["random"]) == 3
        # Incomplete optimizers stay out of the pairwise table.
        assert "flaky" not in report.win_rates
        rows = {row.optimizer_id for row in report.rows}
        assert rows == {"flaky", "random"}

    def test_final_never_worse_than_initial_for_returning_optimizers(self, trials):
        report = run_suite([random_optimizer()], trials, seed=3, budget=10)
        for record in report.records["random"]:
            assert record.final_mae <= record.initial.mae + 1e-15


class TestPolicyRow:
    def test_policy_budget_independent_of_suite_budget(self):
        rng = np.random.default_rng(0)
        weights = PolicyWeights(
            layers=(
                PolicyLayer(
                    weights=rng.normal(size=(5, 13)) * 0.01,
                    bias=np.zeros(5),
                    activation="tanh",
                ),
            ),
            obs_mean=np.zeros(13),
            obs_std=np.ones(13),
        )
        trials = generate_trials(1, 7)
        report = run_suite(
            [policy_optimizer(weights, budget=7)], trials, seed=1, budget=40
        )
        record = report.records["policy"][0]
        assert len(record.search_steps()) == 7
        assert record.final_kind == "last-step"


class TestScenarioStudies:
    @pytest.fixture(scope="class")
    def study(self):
        trials = generate_trials(2, 77)
        return run_scenario_studies(
            [random_optimizer()], trials, seed=3, budget=45
        )

    def test_all_five_cells_present(self, study):
        assert list(study.cells) == [
            "normal",
            "drift-instant",
            "drift-continuous",
            "failure-before",
            "failure-during",
        ]
        for cell in study.cells.values():
            assert cell["random"]["n_trials"] == 2
            assert np.isfinite(cell["random"]["mean_final_mae_um"])

    def test_failure_during_freezes_axis_from_failure_step(self, study):
        for record in study.records["failure-during"]["random"]:
            for row in record.search_steps():
                if row.index >= 40:
                    assert row.settings[FAILED_AXIS] == 0.0
                    assert "actuator-failed" in row.flags
                else:
                    assert "actuator-failed" not in row.flags

    def test_failure_before_freezes_axis_from_reset(self, study):
        for record in study.records["failure-before"]["random"]:
            assert all(
                row.settings[FAILED_AXIS] == 0.0 for row in record.search_steps()
            )

    def test_drift_cells_change_the_beam_mid_run(self, study):
        # Same seeds as the normal cell, so any divergence after the
        # drift onset comes from the incoming beam moving.
        normal = study.records["normal"]["random"]
        drifted = study.records["drift-instant"]["random"]
        for a, b in zip(normal, drifted):
            before_a = [r.beam for r in a.search_steps()[:40]]
            before_b = [r.beam for r in b.search_steps()[:40]]
            assert before_a == before_b
            after_a = [r.beam for r in a.search_steps()[40:]]
            after_b = [r.beam for r in b.search_steps()[40:]]
            assert after_a != after_b


class TestGridScan:
    def test_row_count_is_product_of_axes(self):
        trials = generate_trials(1, 5)
        grid = GridSpec(
            mu_x=(0.0, 1e-3),
            sigma_x=(2e-4,),
            mu_y=(0.0,),
            sigma_y=(2e-4, 4e-4, 6e-4),
        )
        scan = target_grid_scan(
            random_optimizer(), trials[0], grid, seed=2, budget=5
        )
        assert len(scan["rows"]) == 6
        targets = [tuple(row["target"]) for row in scan["rows"]]
        assert len(set(targets)) == 6
        assert all(np.isfinite(row["final_mae_um"]) for row in scan["rows"])

    def test_grid_validation(self):
        with pytest.raises(ConfigurationError):
            GridSpec(mu_x=(), sigma_x=(1e-4,), mu_y=(0.0,), sigma_y=(1e-4,))
        with pytest.raises(ConfigurationError):
            GridSpec(mu_x=(0.0,), sigma_x=(-1e-4,), mu_y=(0.0,), sigma_y=(1e-4,))


class TestTimingReport:
    def test_empty_records_give_empty_report(self):
        assert timing_report([]) == {}

    def test_per_optimizer_stats(self):
        records = [
            record_from_maes([50.0, 40.0, 30.0], optimizer_id="a"),
            record_from_maes([50.0, 40.0, 30.0], optimizer_id="b"),
        ]
        report = timing_report(records)
        assert set(report) == {"a", "b"}
        stats = report["a"]
        # Latencies were seeded as 1, 2, 3 ms.
        assert stats["mean_s"] == pytest.approx(0.002)
        assert stats["p50_s"] == pytest.approx(0.002)
        assert stats["slope_s_per_step"] == pytest.approx(0.001)
        assert stats["slope_fraction_of_mean"] == pytest.approx(0.5)
        assert stats["per_step_median_s"] == pytest.approx([0.001, 0.002, 0.003])


class TestPersistedMetricsRoundTrip:
    def test_metrics_from_reloaded_records_match(self, tmp_path):
        trials = generate_trials(2, 11)
        report = run_suite(
            [random_optimizer(), bo_optimizer(BOConfig())],
            trials,
            seed=6,
            budget=8,
        )
        merged = report.records["random"] + report.records["bo"]
        path = tmp_path / "records.jsonl"
        write_records_jsonl(path, merged)
        reloaded = read_records_jsonl(path)
        by_id = {}
        for record in reloaded:
            by_id.setdefault(record.optimizer_id, []).append(record)
        for optimizer_id in ("random", "bo"):
            original = aggregate_metrics(optimizer_id, report.records[optimizer_id])
            recomputed = aggregate_metrics(optimizer_id, by_id[optimizer_id])
            assert original.to_dict() == recomputed.to_dict()
