"""Derivative-free baselines: Nelder-Mead simplex search and random search.

The simplex routine is generic (any callable on R^n) because the GP
hyperparameter fit reuses it in log-space.  On the environment it
minimises the measured MAE directly, one env step per function
evaluation, with an exact evaluation budget.  Random search samples the
operational box uniformly and returns to the best settings seen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .environment import OPERATIONAL_HALF_RANGE, OPERATIONAL_HI, OPERATIONAL_LO, FDF_SETTINGS, TuningEnv
from .errors import ConfigurationError, InvalidParameterError
from .records import RunRecord

# Reflection, expansion, contraction, shrink.
NM_COEFFICIENTS = (1.0, 2.0, 0.5, 0.5)

SIMPLEX_SCHEMA = "beamtune-simplex-v1"


# ── Generic Nelder-Mead ───────────────────────────────────────────────


@dataclass(frozen=True)
class NMResult:
    x_best: np.ndarray
    f_best: float
    simplex: np.ndarray
    f_values: np.ndarray
    n_evals: int
    converged: bool
    jitter_restarts: int


class _BudgetExhausted(Exception):
    pass


def _simplex_collapsed(simplex: np.ndarray) -> bool:
    edges = simplex[1:] - simplex[0]
    scale = max(float(np.max(np.abs(simplex))), 1e-30)
    smin = np.linalg.svd(edges, compute_uv=False)[-1]
    return bool(smin < 1e-12 * scale)


def _repair_simplex(simplex: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Re-inflate a numerically collapsed simplex with a small seeded jitter."""
    scale = np.maximum(np.max(np.abs(simplex), axis=0), 1e-8)
    repaired = simplex.copy()
    repaired[1:] += rng.normal(0.0, 1e-6, size=repaired[1:].shape) * scale
    return repaired


def nelder_mead(
    f,
    initial_simplex,
    *,
    max_evals: int,
    xatol=None,
    fatol: float | None = None,
    coefficients: tuple[float, float, float, float] = NM_COEFFICIENTS,
    rng: np.random.Generator | None = None,
) -> NMResult:
    """Minimise ``f`` with the downhill simplex method.

    Every call to ``f`` counts against ``max_evals`` and the routine
    stops mid-operation the moment the budget is spent.  ``xatol``
    (scalar or per-dimension) and ``fatol`` enable early termination
    when the simplex has collapsed onto one point in both domain and
    value.  A shrink step that collapses the simplex numerically
    triggers a seeded jitter restart, counted in the result.
    """
    simplex = np.array(initial_simplex, dtype=float)
    if simplex.ndim != 2 or simplex.shape[0] != simplex.shape[1] + 1:
        raise InvalidParameterError(
            f"initial simplex must have shape (n+1, n), got {simplex.shape}"
        )
    if not np.all(np.isfinite(simplex)):
        raise InvalidParameterError("initial simplex must be finite")
    if _simplex_collapsed(simplex):
        raise InvalidParameterError("initial simplex is degenerate")
    if max_evals < simplex.shape[0]:
        raise InvalidParameterError("budget too small to evaluate the initial simplex")
    rho, chi, gamma, sigma = coefficients
    rng = rng or np.random.default_rng(0)
    n = simplex.shape[1]
    n_evals = 0
    jitter_restarts = 0
    converged = False

    def call(x: np.ndarray) -> float:
        nonlocal n_evals
        if n_evals >= max_evals:
            raise _BudgetExhausted
        n_evals += 1
        return float(f(x))

    def tolerances_met() -> bool:
        if xatol is None and fatol is None:
            return False
        ok = True
        if xatol is not None:
            spread = np.max(np.abs(simplex[1:] - simplex[0]), axis=0)
            ok &= bool(np.all(spread <= np.asarray(xatol)))
        if fatol is not None:
            if not np.all(np.isfinite(f_values)):
                return False
            ok &= bool(np.max(np.abs(f_values[1:] - f_values[0])) <= fatol)
        return ok

    try:
        f_values = np.array([call(v) for v in simplex])
        while True:
            order = np.argsort(f_values, kind="stable")
            simplex = simplex[order]
            f_values = f_values[order]
            if tolerances_met():
                converged = True
                break
            centroid = simplex[:-1].mean(axis=0)
            reflected = centroid + rho * (centroid - simplex[-1])
            f_reflected = call(reflected)
            if f_reflected < f_values[0]:
                expanded = centroid + chi * (reflected - centroid)
                f_expanded = call(expanded)
                if f_expanded < f_reflected:
                    simplex[-1], f_values[-1] = expanded, f_expanded
                else:
                    simplex[-1], f_values[-1] = reflected, f_reflected
            elif f_reflected < f_values[-2]:
                simplex[-1], f_values[-1] = reflected, f_reflected
            else:
                if f_reflected < f_values[-1]:
                    contracted = centroid + gamma * (reflected - centroid)
                else:
                    contracted = centroid - gamma * (centroid - simplex[-1])
                f_contracted = call(contracted)
                if f_contracted < min(f_reflected, f_values[-1]):
                    simplex[-1], f_values[-1] = contracted, f_contracted
                else:
                    # Shrink every non-best vertex toward the best one.
                    for i in range(1, n + 1):
                        simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
                        f_values[i] = call(simplex[i])
                    if _simplex_collapsed(simplex):
                        simplex = _repair_simplex(simplex, rng)
                        jitter_restarts += 1
                        f_values = np.array([f_values[0]] + [call(v) for v in simplex[1:]])
    except _BudgetExhausted:
        pass
    order = np.argsort(f_values, kind="stable")
    simplex = simplex[order]
    f_values = f_values[order]
    return NMResult(
        x_best=simplex[0].copy(),
        f_best=float(f_values[0]),
        simplex=simplex,
        f_values=f_values,
        n_evals=n_evals,
        converged=converged,
        jitter_restarts=jitter_restarts,
    )


# ── Simplex configuration ─────────────────────────────────────────────


@dataclass(frozen=True)
class SimplexConfig:
    """Initial simplex and termination settings for environment runs."""

    vertices: tuple[tuple[float, ...], ...]
    budget: int = 150
    xatol_fraction: float = 1e-4  # of the operational half range, per dimension
    fatol: float = 1e-9  # metres of MAE

    def __post_init__(self) -> None:
        arr = self.vertex_array()
        if arr.shape != (6, 5):
            raise ConfigurationError(f"simplex must have shape (6, 5), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError("simplex vertices must be finite")
        if _simplex_collapsed(arr):
            raise ConfigurationError("simplex vertices are affinely dependent")
        if self.budget < 6:
            raise ConfigurationError("budget must cover the initial simplex (>= 6)")

    def vertex_array(self) -> np.ndarray:
        return np.array(self.vertices, dtype=float)


def simplex_from_spreads(spreads, budget: int = 150) -> SimplexConfig:
    """Simplex with the FDF point as first vertex plus one axis-aligned offset per dimension."""
    spreads = np.asarray(spreads, dtype=float)
    if spreads.shape != (5,) or np.any(spreads == 0):
        raise ConfigurationError("spreads must be 5 non-zero values")
    vertices = [FDF_SETTINGS.copy()]
    for dim in range(5):
        vertex = FDF_SETTINGS.copy()
        vertex[dim] += spreads[dim]
        vertices.append(np.clip(vertex, OPERATIONAL_LO, OPERATIONAL_HI))
    return SimplexConfig(vertices=tuple(tuple(v) for v in vertices), budget=budget)


DEFAULT_SIMPLEX_SPREADS = 0.25 * OPERATIONAL_HALF_RANGE


def default_simplex(budget: int = 150) -> SimplexConfig:
    return simplex_from_spreads(DEFAULT_SIMPLEX_SPREADS, budget=budget)


def save_simplex(path: str | Path, config: SimplexConfig) -> None:
    payload = {
        "schema": SIMPLEX_SCHEMA,
        "vertices": [list(v) for v in config.vertices],
        "budget": config.budget,
        "xatol_fraction": config.xatol_fraction,
        "fatol": config.fatol,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_simplex(path: str | Path) -> SimplexConfig:
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("schema") != SIMPLEX_SCHEMA:
        raise ConfigurationError(f"{path}: expected schema {SIMPLEX_SCHEMA!r}")
    return SimplexConfig(
        vertices=tuple(tuple(v) for v in payload["vertices"]),
        budget=payload["budget"],
        xatol_fraction=payload["xatol_fraction"],
        fatol=payload["fatol"],
    )


def tuned_simplex(budget: int = 150) -> SimplexConfig:
    """Packaged simplex from an offline spread search over sampled trials.

    Retune with tune_initial_simplex (or the CLI) when the trial
    distribution changes; the packaged file matches the default ranges.
    """
    path = resources.files("beamtune").joinpath("data/tuned_simplex.json")
    with resources.as_file(path) as concrete:
        config = load_simplex(concrete)
    return SimplexConfig(
        vertices=config.vertices,
        budget=budget,
        xatol_fraction=config.xatol_fraction,
        fatol=config.fatol,
    )


# ── Environment runners ───────────────────────────────────────────────


def run_nelder_mead(env: TuningEnv, config: SimplexConfig, seed: int = 0) -> RunRecord:
    """Minimise the measured MAE with the simplex method, one env step per evaluation.

    Per operational practice the search does not return to the best
    point; the reported final state is the best vertex of the final
    simplex, which for this method is also the best evaluation made.
    """
    env.reset()
    record = env.record
    evaluations: list[tuple[tuple[float, ...], float, float]] = []

    def objective(u: np.ndarray) -> float:
        clipped = np.clip(u, OPERATIONAL_LO, OPERATIONAL_HI)
        result = env.step(clipped)
        evaluations.append(
            (tuple(result.observation.settings), result.mae, result.objective)
        )
        return result.mae

    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    result = nelder_mead(
        objective,
        config.vertex_array(),
        max_evals=config.budget,
        xatol=config.xatol_fraction * OPERATIONAL_HALF_RANGE,
        fatol=config.fatol,
        rng=rng,
    )
    if result.jitter_restarts:
        record.flags.append("simplex-jitter")
    if result.converged:
        record.flags.append("converged")
    best = min(range(len(evaluations)), key=lambda i: evaluations[i][1])
    settings, best_mae, best_objective = evaluations[best]
    record.set_final(settings, best_mae, best_objective, "best-vertex")
    record.meta["n_evals"] = result.n_evals
    return record


@dataclass(frozen=True)
class RandomSearchConfig:
    budget: int = 150
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigurationError("budget must be >= 1")


def run_random_search(env: TuningEnv, config: RandomSearchConfig) -> RunRecord:
    """Uniform samples over the operational box, then return to the best seen."""
    obs = env.reset()
    record = env.record
    best_settings = np.array(obs.settings)
    best_mae = record.initial.mae
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))
    for _ in range(config.budget):
        sample = rng.uniform(OPERATIONAL_LO, OPERATIONAL_HI)
        result = env.step(sample)
        if result.mae < best_mae:
            best_mae = result.mae
            best_settings = np.array(result.observation.settings)
    final = env.step(best_settings, phase="final")
    record.set_final(
        final.observation.settings, final.mae, final.objective, "return-to-best"
    )
    return record


# ── Initial-simplex tuning ────────────────────────────────────────────


@dataclass(frozen=True)
class SimplexTuningResult:
    best: SimplexConfig
    spreads: tuple[tuple[float, ...], ...]
    scores: tuple[float, ...]


def tune_initial_simplex(
    trials,
    *,
    n_candidates: int = 405,
    seed: int = 0,
    budget: int = 150,
    env_factory=None,
) -> SimplexTuningResult:
    """Pick the candidate initial simplex with the best mean final MAE.

    Candidates share the FDF base vertex and differ in their axis-aligned
    spreads.  The default spread vector is always candidate zero, so
    tuning can only match or improve on the untuned simplex.  Each
    candidate runs the full simplex search on every tuning trial.
    """
    if n_candidates < 1:
        raise ConfigurationError("need at least one candidate")
    if not trials:
        raise ConfigurationError("need at least one tuning trial")
    if env_factory is None:
        env_factory = lambda trial: TuningEnv(trial)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    spread_list = [DEFAULT_SIMPLEX_SPREADS.copy()]
    for _ in range(n_candidates - 1):
        magnitude = rng.uniform(0.05, 0.5, size=5) * OPERATIONAL_HALF_RANGE
        sign = rng.choice([-1.0, 1.0], size=5)
        spread_list.append(magnitude * sign)
    scores = []
    for spreads in spread_list:
        config = simplex_from_spreads(spreads, budget=budget)
        final_maes = [
            run_nelder_mead(env_factory(trial), config, seed=seed).final_mae
            for trial in trials
        ]
        scores.append(float(np.mean(final_maes)))
    best_index = int(np.argmin(scores))
    return SimplexTuningResult(
        best=simplex_from_spreads(spread_list[best_index], budget=budget),
        spreads=tuple(tuple(s) for s in spread_list),
        scores=tuple(scores),
    )
