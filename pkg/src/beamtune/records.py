"""Run records: the full trace of one optimisation episode.

A record carries the reset measurement, one row per environment step,
and the designated final state.  Everything needed to recompute metrics
offline is stored per row; wall-clock inference latency is the only
non-reproducible field and is kept separable for that reason.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class InitialState:
    """Measurement taken at reset, before any step consumes budget."""

    settings: tuple[float, ...]
    beam: tuple[float, ...]
    true_beam: tuple[float, ...]
    mae: float
    objective: float
    on_screen: bool

    def to_dict(self) -> dict:
        return {
            "settings": list(self.settings),
            "beam": list(self.beam),
            "true_beam": list(self.true_beam),
            "mae": self.mae,
            "objective": self.objective,
            "on_screen": self.on_screen,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InitialState":
        return cls(
            settings=tuple(data["settings"]),
            beam=tuple(data["beam"]),
            true_beam=tuple(data["true_beam"]),
            mae=data["mae"],
            objective=data["objective"],
            on_screen=data["on_screen"],
        )


@dataclass(frozen=True)
class StepRow:
    """One environment step: readback settings, readings, and derived values."""

    index: int
    phase: str  # "init" | "search" | "final"
    settings: tuple[float, ...]
    beam: tuple[float, ...]
    true_beam: tuple[float, ...]
    mae: float
    true_mae: float
    objective: float
    reward: float
    on_screen: bool
    clamped: bool
    inference_time: float
    flags: tuple[str, ...] = ()

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            "index": self.index,
            "phase": self.phase,
            "settings": list(self.settings),
            "beam": list(self.beam),
            "true_beam": list(self.true_beam),
            "mae": self.mae,
            "true_mae": self.true_mae,
            "objective": self.objective,
            "reward": self.reward,
            "on_screen": self.on_screen,
            "clamped": self.clamped,
            "flags": list(self.flags),
        }
        if include_timing:
            data["inference_time"] = self.inference_time
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "StepRow":
        return cls(
            index=data["index"],
            phase=data["phase"],
            settings=tuple(data["settings"]),
            beam=tuple(data["beam"]),
            true_beam=tuple(data["true_beam"]),
            mae=data["mae"],
            true_mae=data["true_mae"],
            objective=data["objective"],
            reward=data["reward"],
            on_screen=data["on_screen"],
            clamped=data["clamped"],
            inference_time=data.get("inference_time", 0.0),
            flags=tuple(data.get("flags", ())),
        )


@dataclass
class RunRecord:
    """Trace of one (trial, optimizer, scenario) episode."""

    trial_id: str = ""
    optimizer_id: str = ""
    scenario_id: str = ""
    budget: int = 0
    target: tuple[float, ...] = ()
    initial: InitialState | None = None
    steps: list[StepRow] = field(default_factory=list)
    final_settings: tuple[float, ...] | None = None
    final_mae: float | None = None
    final_objective: float | None = None
    final_kind: str | None = None  # "return-to-best" | "best-vertex" | "last-step"
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_step(self, row: StepRow) -> None:
        self.steps.append(row)

    def set_final(self, settings, mae: float, objective: float, kind: str) -> None:
        self.final_settings = tuple(float(v) for v in np.asarray(settings).ravel())
        self.final_mae = float(mae)
        self.final_objective = float(objective)
        self.final_kind = kind

    def search_steps(self) -> list[StepRow]:
        """Optimisation rows only; the appended return-to-best re-measure is excluded."""
        return [s for s in self.steps if s.phase != "final"]

    def best_mae_series(self) -> np.ndarray:
        """Best-seen measured MAE after each search step (monotone non-increasing)."""
        maes = [s.mae for s in self.search_steps()]
        return np.minimum.accumulate(np.array(maes)) if maes else np.array([])

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "trial_id": self.trial_id,
            "optimizer_id": self.optimizer_id,
            "scenario_id": self.scenario_id,
            "budget": self.budget,
            "target": list(self.target),
            "initial": self.initial.to_dict() if self.initial else None,
            "steps": [s.to_dict(include_timing) for s in self.steps],
            "final_settings": list(self.final_settings) if self.final_settings else None,
            "final_mae": self.final_mae,
            "final_objective": self.final_objective,
            "final_kind": self.final_kind,
            "flags": list(self.flags),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        record = cls(
            trial_id=data["trial_id"],
            optimizer_id=data["optimizer_id"],
            scenario_id=data["scenario_id"],
            budget=data["budget"],
            target=tuple(data["target"]),
            initial=InitialState.from_dict(data["initial"]) if data.get("initial") else None,
            final_mae=data.get("final_mae"),
            final_objective=data.get("final_objective"),
            final_kind=data.get("final_kind"),
            flags=list(data.get("flags", [])),
            meta=dict(data.get("meta", {})),
        )
        if data.get("final_settings"):
            record.final_settings = tuple(data["final_settings"])
        record.steps = [StepRow.from_dict(s) for s in data["steps"]]
        return record


def write_records_jsonl(path: str | Path, records: list[RunRecord]) -> None:
    """Serialise records as JSON lines: a header line per record, then one line per step."""
    path = Path(path)
    with path.open("w") as fh:
        for record in records:
            header = record.to_dict()
            steps = header.pop("steps")
            header["type"] = "record"
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for step in steps:
                step["type"] = "step"
                fh.write(json.dumps(step, sort_keys=True) + "\n")


def read_records_jsonl(path: str | Path) -> list[RunRecord]:
    records: list[RunRecord] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        data = json.loads(line)
        kind = data.pop("type", None)
        if kind == "record":
            data["steps"] = []
            records.append(RunRecord.from_dict(data))
        elif kind == "step":
            if not records:
                raise ValueError(f"{path}:{lineno}: step line before any record line")
            records[-1].steps.append(StepRow.from_dict(data))
        else:
            raise ValueError(f"{path}:{lineno}: unknown line type {kind!r}")
    return records
