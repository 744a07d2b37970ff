"""Tuning environment: trials, scenarios, objectives, and the step loop.

A *trial* is one task instance: a target beam on the screen plus the
hidden machine state (incoming beam and magnet misalignments) sampled
from configured ranges.  The environment exposes only what an operator
would see: the camera reading, the actuator readbacks, and the target.

Actuators start from the fixed focus-defocus-focus reset used on the
real machine.  Actions either set actuator values directly (optimisers)
or apply bounded deltas (policy runtime).  Every step the environment
tracks the beam, reads the screen, and logs settings, readings, and
derived objective values into a :class:`RunRecord`.

Scenario knobs cover the feedback and failure studies: screen with
infinite or finite field of view, beam-based alignment of the incoming
beam, instant or continuous incoming-beam drift, and a quadrupole power
supply failure before or during tuning.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidParameterError
from .optics import (
    IncomingBeam,
    Lattice,
    MagnetSettings,
    Misalignments,
    default_lattice,
    measure_screen,
    track,
)
from .records import InitialState, RunRecord, StepRow

# Focus-defocus-focus reset point: (k_q1, k_q2, a_cv, k_q3, a_ch).
FDF_SETTINGS = np.array([10.0, -10.0, 0.0, 10.0, 0.0])

# Operational actuator range (tighter than the physical limits).
OPERATIONAL_HALF_RANGE = np.array([30.0, 30.0, 2.0e-3, 30.0, 2.0e-3])
OPERATIONAL_LO = -OPERATIONAL_HALF_RANGE
OPERATIONAL_HI = OPERATIONAL_HALF_RANGE

# Delta actions are scaled to 0.1 of the operational half range.
DELTA_ACTION_SCALE = 0.1 * OPERATIONAL_HALF_RANGE

# Floor applied to the MAE before taking logarithms.
MAE_FLOOR = 1e-12

# Index of k_q3 in the settings vector (the actuator that fails).
FAILED_AXIS = 3

_ON_SCREEN_BONUS = 10.0


# ── Objectives ────────────────────────────────────────────────────────


def mae(beam, target) -> float:
    """Mean absolute error between two (mu_x, sigma_x, mu_y, sigma_y) vectors, in metres."""
    beam = np.asarray(beam, dtype=float)
    target = np.asarray(target, dtype=float)
    if beam.shape != (4,) or target.shape != (4,):
        raise InvalidParameterError("mae expects two 4-vectors")
    return float(np.mean(np.abs(beam - target)))


def weighted_mae(beam, target, weights=None) -> float:
    """MAE with optional per-parameter weights (all 1 by default)."""
    if weights is None:
        return mae(beam, target)
    beam = np.asarray(beam, dtype=float)
    target = np.asarray(target, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (4,) or np.any(weights < 0) or not np.any(weights > 0):
        raise InvalidParameterError("weights must be 4 non-negative values, not all zero")
    return float(np.sum(weights * np.abs(beam - target)) / np.sum(weights))


def bo_objective(beam, target, on_screen: bool, weights=None) -> float:
    """Log-scaled tuning objective, shifted by ±10 for the on/off-screen distinction.

    The MAE (metres) is floored at 1e-12 before the logarithm so a
    perfect match stays finite.
    """
    value = max(weighted_mae(beam, target, weights), MAE_FLOOR)
    bonus = _ON_SCREEN_BONUS if on_screen else -_ON_SCREEN_BONUS
    return -math.log(value) + bonus


def log_weighted_mae(beam, target, weights=None) -> float:
    return math.log(max(weighted_mae(beam, target, weights), MAE_FLOOR))


def rl_reward(prev_log_mae: float, log_mae: float) -> float:
    """Improvement in log MAE; deteriorations are penalised at twice their size."""
    delta = prev_log_mae - log_mae
    return delta if delta > 0 else 2.0 * delta


# ── Trials ────────────────────────────────────────────────────────────

TRIALS_SCHEMA = "beamtune-trials-v1"


@dataclass(frozen=True)
class TrialRanges:
    """Sampling ranges for trial generation (SI units).

    The incoming-beam and misalignment spans are deliberately generous
    relative to a well-behaved machine so that trials differ enough for
    per-trial adaptation to matter; narrow spans let one fixed tuning
    recipe carry across every trial.
    """

    target_mu_half: float = 2.0e-3
    target_sigma_lo: float = 1.0e-5
    target_sigma_hi: float = 2.0e-3
    energy_lo: float = 8.0e7
    energy_hi: float = 1.6e8
    incoming_mu_half: float = 1.5e-3
    incoming_angle_half: float = 3.0e-4
    incoming_sigma_lo: float = 5.0e-5
    incoming_sigma_hi: float = 8.0e-4
    incoming_divergence_lo: float = 1.0e-5
    incoming_divergence_hi: float = 3.0e-4
    quad_misalignment_half: float = 5.0e-4
    screen_misalignment_half: float = 5.0e-4

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value <= 0:
                raise ConfigurationError(f"range {name} must be positive and finite")
        for lo, hi in (
            ("target_sigma_lo", "target_sigma_hi"),
            ("energy_lo", "energy_hi"),
            ("incoming_sigma_lo", "incoming_sigma_hi"),
            ("incoming_divergence_lo", "incoming_divergence_hi"),
        ):
            if getattr(self, lo) >= getattr(self, hi):
                raise ConfigurationError(f"{lo} must be below {hi}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrialRanges":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown range keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Trial:
    """One task instance: target beam, hidden machine state, and a seed."""

    target: tuple[float, float, float, float]
    incoming: IncomingBeam
    misalignments: Misalignments
    seed: int

    def __post_init__(self) -> None:
        if len(self.target) != 4:
            raise InvalidParameterError("target must have 4 entries")
        for value in self.target:
            if not math.isfinite(value):
                raise InvalidParameterError("target values must be finite")
        if self.target[1] <= 0 or self.target[3] <= 0:
            raise InvalidParameterError("target beam sizes must be positive")
        if int(self.seed) < 0:
            raise InvalidParameterError("trial seed must be non-negative")

    def target_array(self) -> np.ndarray:
        return np.array(self.target, dtype=float)

    def validate_within(self, ranges: TrialRanges) -> None:
        t = self.target
        if abs(t[0]) > ranges.target_mu_half or abs(t[2]) > ranges.target_mu_half:
            raise ConfigurationError("target centroid outside configured range")
        for sigma in (t[1], t[3]):
            if not (ranges.target_sigma_lo <= sigma <= ranges.target_sigma_hi):
                raise ConfigurationError("target beam size outside configured range")
        mis = self.misalignments
        for name in ("q1_dx", "q1_dy", "q2_dx", "q2_dy", "q3_dx", "q3_dy"):
            if abs(getattr(mis, name)) > ranges.quad_misalignment_half:
                raise ConfigurationError(f"misalignment {name} outside configured range")
        for name in ("screen_dx", "screen_dy"):
            if abs(getattr(mis, name)) > ranges.screen_misalignment_half:
                raise ConfigurationError(f"misalignment {name} outside configured range")


def sample_incoming(ranges: TrialRanges, rng: np.random.Generator) -> IncomingBeam:
    return IncomingBeam(
        energy=rng.uniform(ranges.energy_lo, ranges.energy_hi),
        mu_x=rng.uniform(-ranges.incoming_mu_half, ranges.incoming_mu_half),
        mu_xp=rng.uniform(-ranges.incoming_angle_half, ranges.incoming_angle_half),
        mu_y=rng.uniform(-ranges.incoming_mu_half, ranges.incoming_mu_half),
        mu_yp=rng.uniform(-ranges.incoming_angle_half, ranges.incoming_angle_half),
        sigma_x=rng.uniform(ranges.incoming_sigma_lo, ranges.incoming_sigma_hi),
        sigma_xp=rng.uniform(ranges.incoming_divergence_lo, ranges.incoming_divergence_hi),
        sigma_y=rng.uniform(ranges.incoming_sigma_lo, ranges.incoming_sigma_hi),
        sigma_yp=rng.uniform(ranges.incoming_divergence_lo, ranges.incoming_divergence_hi),
    )


def _sample_misalignments(ranges: TrialRanges, rng: np.random.Generator) -> Misalignments:
    quad = ranges.quad_misalignment_half
    screen = ranges.screen_misalignment_half
    return Misalignments(
        q1_dx=rng.uniform(-quad, quad),
        q1_dy=rng.uniform(-quad, quad),
        q2_dx=rng.uniform(-quad, quad),
        q2_dy=rng.uniform(-quad, quad),
        q3_dx=rng.uniform(-quad, quad),
        q3_dy=rng.uniform(-quad, quad),
        screen_dx=rng.uniform(-screen, screen),
        screen_dy=rng.uniform(-screen, screen),
    )


def generate_trials(
    n: int, seed: int, ranges: TrialRanges | None = None
) -> list[Trial]:
    """Sample n trials deterministically from the given ranges.

    Targets are drawn uniformly, independent of the hidden machine
    state, so trials vary in how closely the target can be met at all;
    the benchmark reports what each optimiser achieves against that.
    """
    if n <= 0:
        raise ConfigurationError("trial count must be positive")
    ranges = ranges or TrialRanges()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    trials = []
    for _ in range(n):
        target = (
            rng.uniform(-ranges.target_mu_half, ranges.target_mu_half),
            rng.uniform(ranges.target_sigma_lo, ranges.target_sigma_hi),
            rng.uniform(-ranges.target_mu_half, ranges.target_mu_half),
            rng.uniform(ranges.target_sigma_lo, ranges.target_sigma_hi),
        )
        incoming = sample_incoming(ranges, rng)
        misalignments = _sample_misalignments(ranges, rng)
        trial_seed = int(rng.integers(0, 2**31 - 1))
        trials.append(
            Trial(target=target, incoming=incoming, misalignments=misalignments, seed=trial_seed)
        )
    return trials


def save_trials(
    path: str | Path, trials: list[Trial], seed: int, ranges: TrialRanges
) -> None:
    """Write a trial file; identical inputs produce byte-identical files."""
    payload = {
        "schema": TRIALS_SCHEMA,
        "seed": seed,
        "ranges": ranges.to_dict(),
        "trials": [
            {
                "id": idx,
                "seed": t.seed,
                "target": list(t.target),
                "incoming": asdict(t.incoming),
                "misalignments": asdict(t.misalignments),
            }
            for idx, t in enumerate(trials)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class TrialSet:
    trials: tuple[Trial, ...]
    seed: int
    ranges: TrialRanges


def load_trials(path: str | Path) -> TrialSet:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    if payload.get("schema") != TRIALS_SCHEMA:
        raise ConfigurationError(
            f"{path}: expected schema {TRIALS_SCHEMA!r}, got {payload.get('schema')!r}"
        )
    ranges = TrialRanges.from_dict(payload["ranges"])
    trials = []
    for idx, entry in enumerate(payload["trials"]):
        if entry.get("id") != idx:
            raise ConfigurationError(f"{path}: trial ids must be consecutive from 0")
        trial = Trial(
            target=tuple(entry["target"]),
            incoming=IncomingBeam(**entry["incoming"]),
            misalignments=Misalignments(**entry["misalignments"]),
            seed=entry["seed"],
        )
        trial.validate_within(ranges)
        trials.append(trial)
    if not trials:
        raise ConfigurationError(f"{path}: trial file contains no trials")
    return TrialSet(trials=tuple(trials), seed=payload["seed"], ranges=ranges)


def align_incoming(incoming: IncomingBeam, misalignments: Misalignments) -> IncomingBeam:
    """Beam-based alignment: aim the incoming beam at the average quad centre, zero angles."""
    mis = misalignments
    return replace(
        incoming,
        mu_x=(mis.q1_dx + mis.q2_dx + mis.q3_dx) / 3.0,
        mu_y=(mis.q1_dy + mis.q2_dy + mis.q3_dy) / 3.0,
        mu_xp=0.0,
        mu_yp=0.0,
    )


# ── Scenarios ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ScenarioConfig:
    """Environment variant switches for the benchmark studies."""

    screen_mode: str = "infinite"  # "infinite" | "finite"
    aligned: bool = False
    drift: str = "none"  # "none" | "instant" | "continuous"
    drift_step: int = 40
    drift_total: int = 80
    failure: str = "none"  # "none" | "before" | "during"
    failure_step: int = 40
    noise_rms: float = 0.0

    def __post_init__(self) -> None:
        if self.screen_mode not in ("infinite", "finite"):
            raise ConfigurationError(f"unknown screen mode {self.screen_mode!r}")
        if self.drift not in ("none", "instant", "continuous"):
            raise ConfigurationError(f"unknown drift mode {self.drift!r}")
        if self.failure not in ("none", "before", "during"):
            raise ConfigurationError(f"unknown failure mode {self.failure!r}")
        if self.drift_step < 0 or self.failure_step < 0:
            raise ConfigurationError("scenario step indices must be >= 0")
        if self.drift_total <= 0:
            raise ConfigurationError("drift_total must be positive")
        if not math.isfinite(self.noise_rms) or self.noise_rms < 0:
            raise ConfigurationError("noise_rms must be >= 0")


SCENARIO_PRESETS: dict[str, ScenarioConfig] = {
    "sim-infinite": ScenarioConfig(),
    "sim-finite": ScenarioConfig(screen_mode="finite"),
    "sim-finite-aligned": ScenarioConfig(screen_mode="finite", aligned=True),
}


def _interpolate_incoming(v0: IncomingBeam, v1: IncomingBeam, fraction: float) -> IncomingBeam:
    fields = {
        name: (1.0 - fraction) * getattr(v0, name) + fraction * getattr(v1, name)
        for name in v0.__dataclass_fields__
    }
    return IncomingBeam(**fields)


# ── Environment ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class Observation:
    """What the optimiser sees: camera reading, readbacks, target.  13 values."""

    beam: tuple[float, ...]
    settings: tuple[float, ...]
    target: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.array(self.beam + self.settings + self.target, dtype=float)


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    mae: float
    objective: float
    reward: float
    on_screen: bool
    done: bool
    inference_time: float


class TuningEnv:
    """Step-based tuning task over the five-magnet section.

    ``action_mode`` selects absolute settings (``direct``) or bounded
    deltas (``delta``).  Out-of-range requests are clamped, never
    rejected, and flagged in the record.  All hidden state (incoming
    beam, misalignments) stays out of the observation.
    """

    def __init__(
        self,
        trial: Trial,
        scenario: ScenarioConfig | None = None,
        *,
        lattice: Lattice | None = None,
        action_mode: str = "direct",
        ranges: TrialRanges | None = None,
        max_steps: int | None = None,
        mae_weights=None,
        trial_id: str = "",
        optimizer_id: str = "",
        scenario_id: str = "",
    ) -> None:
        if action_mode not in ("direct", "delta"):
            raise ConfigurationError(f"unknown action mode {action_mode!r}")
        self.scenario = scenario or ScenarioConfig()
        if self.scenario.drift != "none" and ranges is None:
            raise ConfigurationError("drift scenarios need the trial ranges to resample the beam")
        self.trial = trial
        self.lattice = lattice or default_lattice()
        self.action_mode = action_mode
        self.ranges = ranges
        self.max_steps = max_steps
        self.mae_weights = None if mae_weights is None else np.asarray(mae_weights, dtype=float)
        self.trial_id = trial_id
        self.optimizer_id = optimizer_id
        self.scenario_id = scenario_id
        self._record: RunRecord | None = None
        self._n_steps = 0
        self._settings = FDF_SETTINGS.copy()
        self._incoming0 = trial.incoming
        self._drift_target: IncomingBeam | None = None
        self._rng_noise: np.random.Generator | None = None
        self._prev_log_mae = 0.0

    # -- lifecycle -----------------------------------------------------

    @property
    def record(self) -> RunRecord:
        if self._record is None:
            raise RuntimeError("environment not reset yet")
        return self._record

    @property
    def settings(self) -> np.ndarray:
        """Current actuator readback."""
        return self._settings.copy()

    @property
    def n_steps(self) -> int:
        return self._n_steps

    def reset(self) -> Observation:
        """Return to the FDF reset point and take the free initial measurement."""
        self._n_steps = 0
        self._settings = FDF_SETTINGS.copy()
        if self._failure_active(-1):
            self._settings[FAILED_AXIS] = 0.0
        incoming = self.trial.incoming
        if self.scenario.aligned:
            incoming = align_incoming(incoming, self.trial.misalignments)
        self._incoming0 = incoming
        if self.scenario.drift != "none":
            drift_rng = np.random.default_rng(np.random.SeedSequence([self.trial.seed, 1]))
            self._drift_target = sample_incoming(self.ranges, drift_rng)
        self._rng_noise = np.random.default_rng(np.random.SeedSequence([self.trial.seed, 2]))
        measured, true_cam, on_screen = self._observe(self._incoming0)
        target = self.trial.target_array()
        mae_val = mae(measured, target)
        objective = bo_objective(measured, target, on_screen, self.mae_weights)
        self._prev_log_mae = log_weighted_mae(measured, target, self.mae_weights)
        self._record = RunRecord(
            trial_id=self.trial_id,
            optimizer_id=self.optimizer_id,
            scenario_id=self.scenario_id,
            budget=self.max_steps or 0,
            target=tuple(self.trial.target),
            initial=InitialState(
                settings=tuple(self._settings),
                beam=tuple(measured),
                true_beam=tuple(true_cam),
                mae=mae_val,
                objective=objective,
                on_screen=on_screen,
            ),
        )
        return Observation(
            beam=tuple(measured), settings=tuple(self._settings), target=tuple(self.trial.target)
        )

    def step(self, action, inference_time: float = 0.0, phase: str = "search") -> StepResult:
        """Apply one action, measure, log, and return the operator view."""
        if self._record is None:
            raise RuntimeError("call reset() before step()")
        action = np.asarray(action, dtype=float).ravel()
        if action.shape != (5,):
            raise InvalidParameterError(f"action must have 5 entries, got shape {action.shape}")
        if not np.all(np.isfinite(action)):
            raise InvalidParameterError("action values must be finite")
        i = self._n_steps
        flags: list[str] = []
        if self.action_mode == "direct":
            requested = np.clip(action, OPERATIONAL_LO, OPERATIONAL_HI)
            clamped = bool(np.any(requested != action))
        else:
            delta = np.clip(action, -DELTA_ACTION_SCALE, DELTA_ACTION_SCALE)
            requested = np.clip(self._settings + delta, OPERATIONAL_LO, OPERATIONAL_HI)
            clamped = bool(np.any(delta != action) or np.any(requested != self._settings + delta))
        if self._failure_active(i):
            requested = requested.copy()
            requested[FAILED_AXIS] = 0.0
            flags.append("actuator-failed")
        self._settings = requested
        incoming = self._incoming_at(i)
        measured, true_cam, on_screen = self._observe(incoming)
        target = self.trial.target_array()
        mae_val = mae(measured, target)
        true_mae = mae(true_cam, target)
        if weighted_mae(measured, target, self.mae_weights) < MAE_FLOOR:
            flags.append("mae-floor")
        objective = bo_objective(measured, target, on_screen, self.mae_weights)
        log_mae = log_weighted_mae(measured, target, self.mae_weights)
        reward = rl_reward(self._prev_log_mae, log_mae)
        self._prev_log_mae = log_mae
        self._n_steps += 1
        self._record.add_step(
            StepRow(
                index=i,
                phase=phase,
                settings=tuple(self._settings),
                beam=tuple(measured),
                true_beam=tuple(true_cam),
                mae=mae_val,
                true_mae=true_mae,
                objective=objective,
                reward=reward,
                on_screen=on_screen,
                clamped=clamped,
                inference_time=float(inference_time),
                flags=tuple(flags),
            )
        )
        done = self.max_steps is not None and self._n_steps >= self.max_steps
        observation = Observation(
            beam=tuple(measured), settings=tuple(self._settings), target=tuple(self.trial.target)
        )
        return StepResult(
            observation=observation,
            mae=mae_val,
            objective=objective,
            reward=reward,
            on_screen=on_screen,
            done=done,
            inference_time=float(inference_time),
        )

    # -- internals -----------------------------------------------------

    def _failure_active(self, step_index: int) -> bool:
        if self.scenario.failure == "before":
            return True
        if self.scenario.failure == "during":
            return step_index >= self.scenario.failure_step
        return False

    def _incoming_at(self, step_index: int) -> IncomingBeam:
        if self.scenario.drift == "none":
            return self._incoming0
        assert self._drift_target is not None
        if self.scenario.drift == "instant":
            return self._drift_target if step_index >= self.scenario.drift_step else self._incoming0
        fraction = min(1.0, (step_index + 1) / self.scenario.drift_total)
        return _interpolate_incoming(self._incoming0, self._drift_target, fraction)

    def _observe(self, incoming: IncomingBeam):
        moments = track(
            incoming,
            MagnetSettings.from_array(self._settings),
            self.trial.misalignments,
            self.lattice,
        )
        measured, on_screen = measure_screen(
            moments,
            self.lattice.screen,
            self.trial.misalignments,
            mode=self.scenario.screen_mode,
            noise_rms=self.scenario.noise_rms,
            rng=self._rng_noise,
        )
        dx, dy = self.trial.misalignments.offset("screen")
        true_cam = moments.beam_vector() - np.array([dx, 0.0, dy, 0.0])
        return measured, true_cam, on_screen
