"""Bayesian-optimiser tests.

Expected improvement is checked against closed-form values of the
normal pdf and cdf.  Proposal maximisation is checked against a dense
grid scan of the same acquisition surface, and the feasible box is
swept across ten thousand random centres.
"""

import numpy as np
import pytest

import beamtune.bo as bo_module
from beamtune.bo import (
    BOConfig,
    POLARITY_HI,
    POLARITY_LO,
    TRUST_REGION_HALF_WIDTH,
    expected_improvement,
    feasible_box,
    normalize_settings,
    propose_next,
    run_bo,
)
from beamtune.environment import (
    FDF_SETTINGS,
    OPERATIONAL_HI,
    OPERATIONAL_LO,
    TuningEnv,
    generate_trials,
)
from beamtune.errors import ConfigurationError
from beamtune.gp import GPHyperparameters, build_gp, fit_gp

PHI_AT_ZERO = 0.3989422804014327  # standard normal pdf at 0
EI_UNIT_GAP = 1.0833154705876863  # Phi(1) + pdf(1)


class TestExpectedImprovement:
    def test_zero_gap_unit_std(self):
        assert float(expected_improvement(0.0, 1.0, 0.0)) == pytest.approx(
            PHI_AT_ZERO, abs=1e-12
        )

    def test_unit_gap_unit_std(self):
        assert float(expected_improvement(1.0, 1.0, 0.0)) == pytest.approx(
            EI_UNIT_GAP, abs=1e-12
        )

    def test_scales_linearly_with_std_at_zero_gap(self):
        assert float(expected_improvement(0.0, 2.0, 0.0)) == pytest.approx(
            2.0 * PHI_AT_ZERO, abs=1e-12
        )

    def test_zero_std_reduces_to_positive_part(self):
        assert float(expected_improvement(1.5, 0.0, 1.0)) == pytest.approx(0.5)
        assert float(expected_improvement(0.5, 0.0, 1.0)) == 0.0

    def test_non_negative_and_decreasing_in_incumbent(self):
        rng = np.random.default_rng(3)
        mean = rng.normal(size=50)
        std = rng.uniform(0.01, 2.0, size=50)
        low = expected_improvement(mean, std, -1.0)
        high = expected_improvement(mean, std, 1.0)
        assert np.all(low >= 0.0)
        assert np.all(high <= low + 1e-15)

    def test_vanishes_for_hopeless_candidates(self):
        assert float(expected_improvement(-10.0, 0.1, 0.0)) < 1e-20

    def test_vectorised_shape(self):
        values = expected_improvement(np.zeros(7), np.ones(7), 0.2)
        assert values.shape == (7,)


class TestFeasibleBox:
    def test_reset_point_box(self):
        lo, hi = feasible_box(FDF_SETTINGS)
        np.testing.assert_allclose(lo, [7.0, -13.0, -2e-4, 7.0, -2e-4])
        np.testing.assert_allclose(hi, [13.0, -7.0, 2e-4, 13.0, 2e-4])

    def test_polarity_boundary_center(self):
        lo, hi = feasible_box([0.0, -30.0, 0.0, 0.0, 0.0])
        assert lo[0] == 0.0 and hi[0] == 3.0
        assert lo[1] == -30.0 and hi[1] == -27.0

    def test_center_outside_polarity_box_collapses_to_boundary(self):
        lo, hi = feasible_box([-10.0, 5.0, 0.0, 10.0, 0.0])
        assert lo[0] == hi[0] == 0.0
        assert lo[1] == hi[1] == 0.0

    def test_box_invariants_over_random_centers(self):
        # Quadrupole polarity must hold for every box the optimiser can
        # construct anywhere in the operational range.
        rng = np.random.default_rng(11)
        centers = rng.uniform(OPERATIONAL_LO, OPERATIONAL_HI, size=(10_000, 5))
        width = np.asarray(TRUST_REGION_HALF_WIDTH)
        for center in centers:
            lo, hi = feasible_box(center)
            assert np.all(lo <= hi)
            assert np.all(lo >= POLARITY_LO - 1e-15)
            assert np.all(hi <= POLARITY_HI + 1e-15)
            assert np.all(hi - lo <= 2 * width + 1e-12)
            assert lo[0] >= 0.0 and lo[3] >= 0.0 and hi[1] <= 0.0


def make_surrogate(seed=5, n=12):
    rng = np.random.default_rng(seed)
    x_settings = rng.uniform(POLARITY_LO, POLARITY_HI, size=(n, 5))
    z = normalize_settings(x_settings)
    y = -np.sum((z - 0.2) ** 2, axis=1)
    return fit_gp(normalize_settings(x_settings), y, seed=seed), y


class TestProposeNext:
    def test_proposals_stay_inside_box(self):
        gp, y = make_surrogate()
        rng = np.random.default_rng(21)
        for i in range(300):
            center = rng.uniform(OPERATIONAL_LO, OPERATIONAL_HI)
            lo, hi = feasible_box(center)
            proposal = propose_next(
                gp,
                float(np.median(y)),
                lo,
                hi,
                np.random.default_rng(i),
                n_candidates=64,
            )
            assert np.all(proposal >= lo - 1e-12)
            assert np.all(proposal <= hi + 1e-12)

    def test_matches_dense_grid_scan(self):
        gp, y = make_surrogate(seed=7)
        incumbent = float(np.median(y))
        lo, hi = feasible_box(FDF_SETTINGS)
        proposal = propose_next(gp, incumbent, lo, hi, np.random.default_rng(3))
        axes = [np.linspace(lo[d], hi[d], 7) for d in range(5)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 5)
        mean, std = gp.predict(normalize_settings(grid))
        grid_best = float(np.max(expected_improvement(mean, std, incumbent)))
        p_mean, p_std = gp.predict(normalize_settings(proposal[None, :]))
        proposal_ei = float(expected_improvement(p_mean, p_std, incumbent)[0])
        assert grid_best > 0
        assert proposal_ei >= 0.9 * grid_best

    def test_refinement_only_improves(self):
        gp, y = make_surrogate(seed=9)
        incumbent = float(np.median(y))
        lo, hi = feasible_box(FDF_SETTINGS)

        def acquisition(u):
            mean, std = gp.predict(normalize_settings(u[None, :]))
            return float(expected_improvement(mean, std, incumbent)[0])

        raw = propose_next(
            gp, incumbent, lo, hi, np.random.default_rng(5), refine_fracs=()
        )
        refined = propose_next(gp, incumbent, lo, hi, np.random.default_rng(5))
        assert acquisition(refined) >= acquisition(raw)

    def test_deterministic(self):
        gp, y = make_surrogate(seed=13)
        lo, hi = feasible_box(FDF_SETTINGS)
        a = propose_next(gp, -1.0, lo, hi, np.random.default_rng(17))
        b = propose_next(gp, -1.0, lo, hi, np.random.default_rng(17))
        np.testing.assert_array_equal(a, b)


def make_env(seed=7, **kwargs):
    trial = generate_trials(1, seed=seed)[0]
    return TuningEnv(trial, **kwargs)


class TestRunBO:
    def test_step_structure(self):
        record = run_bo(make_env(), BOConfig(budget=12, n_init=5, seed=1))
        assert len(record.steps) == 13
        assert [s.phase for s in record.steps] == ["search"] * 12 + ["final"]
        assert record.final_kind == "return-to-best"
        assert record.meta["n_evals"] == 12

    def test_returns_to_best_exactly(self):
        record = run_bo(make_env(seed=9), BOConfig(budget=15, n_init=5, seed=2))
        searched = record.search_steps()
        best_mae = min([record.initial.mae] + [s.mae for s in searched])
        assert record.final_mae == best_mae
        assert record.final_mae <= record.initial.mae

    def test_polarity_respected_on_every_step(self):
        record = run_bo(make_env(seed=11), BOConfig(budget=14, n_init=5, seed=3))
        for step in record.search_steps():
            settings = np.array(step.settings)
            assert settings[0] >= 0.0
            assert settings[1] <= 0.0
            assert settings[3] >= 0.0
            assert abs(settings[2]) <= 2e-3 + 1e-15
            assert abs(settings[4]) <= 2e-3 + 1e-15

    def test_model_steps_stay_in_trust_region(self):
        config = BOConfig(budget=14, n_init=5, seed=4)
        record = run_bo(make_env(seed=13), config)
        width = np.asarray(config.trust_half_width)
        settings = [np.array(s.settings) for s in record.search_steps()]
        for i in range(config.n_init, len(settings)):
            assert np.all(np.abs(settings[i] - settings[i - 1]) <= width + 1e-12)

    def test_budget_equal_to_n_init(self):
        record = run_bo(make_env(), BOConfig(budget=5, n_init=5, seed=5))
        assert len(record.search_steps()) == 5

    def test_budget_below_n_init(self):
        record = run_bo(make_env(), BOConfig(budget=3, n_init=5, seed=6))
        assert len(record.search_steps()) == 3

    def test_deterministic(self):
        a = run_bo(make_env(seed=15), BOConfig(budget=10, n_init=5, seed=7))
        b = run_bo(make_env(seed=15), BOConfig(budget=10, n_init=5, seed=7))
        assert [s.mae for s in a.steps] == [s.mae for s in b.steps]
        assert a.final_mae == b.final_mae

    def test_improves_on_reset_point(self):
        record = run_bo(make_env(seed=17), BOConfig(budget=45, n_init=5, seed=8))
        assert record.final_mae < record.initial.mae

    def test_inference_time_recorded(self):
        record = run_bo(make_env(seed=19), BOConfig(budget=8, n_init=5, seed=9))
        times = [s.inference_time for s in record.search_steps()]
        assert all(t >= 0.0 for t in times)
        # Model-based steps pay for a fit, initial samples do not.
        assert max(times[5:]) > max(times[:5])

    def test_gp_fallback_flag_propagates(self, monkeypatch):
        def flagged_fit(x, y, **kwargs):
            hyper = GPHyperparameters((1.0,) * 5, 1.0, 1e-4)
            return build_gp(x, y, hyper, flags=("hyper-fit-fallback",))

        monkeypatch.setattr(bo_module, "fit_gp", flagged_fit)
        record = run_bo(make_env(), BOConfig(budget=7, n_init=5, seed=10))
        assert "gp-fallback" in record.flags

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            BOConfig(budget=0)
        with pytest.raises(ConfigurationError):
            BOConfig(n_init=0)
        with pytest.raises(ConfigurationError):
            BOConfig(trust_half_width=(1.0, 1.0, 1.0, 1.0, -1.0))
        with pytest.raises(ConfigurationError):
            BOConfig(refit_every=0)
