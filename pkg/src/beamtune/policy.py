"""Inference runtime for a pretrained tuning policy.

Runs a small feedforward network from a portable JSON weights file:
observations are normalised by stored running statistics, hidden layers
apply their stored activations, and the tanh output is scaled to
bounded per-step setting changes.  Training is out of scope; any stack
that can export matrices to JSON can produce a compatible file.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .environment import DELTA_ACTION_SCALE, Observation, TuningEnv
from .errors import ConfigurationError, PolicyFormatError
from .records import RunRecord

SCHEMA_VERSION = 1

# Observation layout fed to the network, matching Observation.as_array():
# measured beam (4), setting readbacks (5), target beam (4).
OBS_SIZE = 13
ACTION_SIZE = 5

_ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "linear": lambda z: z,
}


@dataclass(frozen=True)
class PolicyLayer:
    """One dense layer: output = activation(weights @ input + bias)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"


@dataclass(frozen=True)
class PolicyWeights:
    """Validated network plus the normalisation constants it was trained with."""

    layers: tuple[PolicyLayer, ...]
    obs_mean: np.ndarray
    obs_std: np.ndarray
    action_scale: np.ndarray = field(
        default_factory=lambda: DELTA_ACTION_SCALE.copy()
    )


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise PolicyFormatError(message)


def validate_policy(weights: PolicyWeights) -> PolicyWeights:
    """Check shape chaining, activations, and normalisation invariants."""
    _check(len(weights.layers) >= 1, "policy needs at least one layer")
    size = OBS_SIZE
    for index, layer in enumerate(weights.layers):
        w = np.asarray(layer.weights, dtype=float)
        b = np.asarray(layer.bias, dtype=float)
        _check(
            w.ndim == 2 and w.shape[1] == size,
            f"layer {index}: weights must be (out, {size}), got {w.shape}",
        )
        _check(
            b.shape == (w.shape[0],),
            f"layer {index}: bias must have {w.shape[0]} entries, got {b.shape}",
        )
        _check(
            bool(np.all(np.isfinite(w)) and np.all(np.isfinite(b))),
            f"layer {index}: weights and bias must be finite",
        )
        _check(
            layer.activation in _ACTIVATIONS,
            f"layer {index}: unknown activation {layer.activation!r}",
        )
        size = w.shape[0]
    _check(
        size == ACTION_SIZE,
        f"last layer must emit {ACTION_SIZE} actions, got {size}",
    )
    mean = np.asarray(weights.obs_mean, dtype=float)
    std = np.asarray(weights.obs_std, dtype=float)
    scale = np.asarray(weights.action_scale, dtype=float)
    _check(mean.shape == (OBS_SIZE,), f"obs_mean must have {OBS_SIZE} entries")
    _check(std.shape == (OBS_SIZE,), f"obs_std must have {OBS_SIZE} entries")
    _check(bool(np.all(np.isfinite(mean))), "obs_mean must be finite")
    _check(
        bool(np.all(np.isfinite(std)) and np.all(std > 0)),
        "obs_std must be positive",
    )
    _check(
        scale.shape == (ACTION_SIZE,)
        and bool(np.all(np.isfinite(scale)) and np.all(scale > 0)),
        f"action_scale must be {ACTION_SIZE} positive entries",
    )
    return weights


def load_policy(path) -> PolicyWeights:
    """Load and validate a weights file; errors name the offending layer."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise PolicyFormatError(f"cannot read policy file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise PolicyFormatError("policy file must hold a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise PolicyFormatError(
            f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}"
        )
    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise PolicyFormatError("policy file needs a non-empty 'layers' list")
    layers = []
    for index, entry in enumerate(raw_layers):
        if not isinstance(entry, dict) or "weights" not in entry or "bias" not in entry:
            raise PolicyFormatError(f"layer {index}: needs 'weights' and 'bias'")
        try:
            w = np.asarray(entry["weights"], dtype=float)
            b = np.asarray(entry["bias"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise PolicyFormatError(f"layer {index}: non-numeric data") from exc
        layers.append(
            PolicyLayer(weights=w, bias=b, activation=entry.get("activation", "relu"))
        )
    for key in ("obs_mean", "obs_std"):
        if key not in data:
            raise PolicyFormatError(f"policy file needs '{key}'")
    weights = PolicyWeights(
        layers=tuple(layers),
        obs_mean=np.asarray(data["obs_mean"], dtype=float),
        obs_std=np.asarray(data["obs_std"], dtype=float),
        action_scale=np.asarray(
            data.get("action_scale", DELTA_ACTION_SCALE), dtype=float
        ),
    )
    return validate_policy(weights)


def save_policy(weights: PolicyWeights, path) -> None:
    """Write a weights file that round-trips through load_policy bit-exactly."""
    validate_policy(weights)
    data = {
        "schema_version": SCHEMA_VERSION,
        "layers": [
            {
                "weights": np.asarray(layer.weights, dtype=float).tolist(),
                "bias": np.asarray(layer.bias, dtype=float).tolist(),
                "activation": layer.activation,
            }
            for layer in weights.layers
        ],
        "obs_mean": np.asarray(weights.obs_mean, dtype=float).tolist(),
        "obs_std": np.asarray(weights.obs_std, dtype=float).tolist(),
        "action_scale": np.asarray(weights.action_scale, dtype=float).tolist(),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2)
        handle.write("\n")


def infer(weights: PolicyWeights, observation) -> np.ndarray:
    """Deterministic forward pass from one observation to one delta action."""
    if isinstance(observation, Observation):
        obs = observation.as_array()
    else:
        obs = np.asarray(observation, dtype=float)
    if obs.shape != (OBS_SIZE,):
        raise PolicyFormatError(
            f"observation must have {OBS_SIZE} entries, got {obs.shape}"
        )
    z = (obs - weights.obs_mean) / weights.obs_std
    for layer in weights.layers:
        z = _ACTIVATIONS[layer.activation](layer.weights @ z + layer.bias)
    return z * weights.action_scale


def run_policy(env: TuningEnv, weights: PolicyWeights, budget: int = 50) -> RunRecord:
    """Infer and apply delta actions for a fixed budget, no return-to-best.

    The policy converges in place by emitting shrinking deltas, so the
    final state is simply the last step's measurement.
    """
    if budget < 1:
        raise ConfigurationError("budget must be >= 1")
    if env.action_mode != "delta":
        raise ConfigurationError("policy runtime needs an environment in delta mode")
    validate_policy(weights)
    obs = env.reset()
    record = env.record
    result = None
    for _ in range(budget):
        started = time.perf_counter()
        action = infer(weights, obs)
        inference_time = time.perf_counter() - started
        result = env.step(action, inference_time=inference_time)
        obs = result.observation
    record.set_final(
        result.observation.settings, result.mae, result.objective, "last-step"
    )
    record.meta["n_evals"] = budget
    return record
