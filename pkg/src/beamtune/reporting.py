"""Report files for benchmark runs.

Emits three deterministic artefacts per suite (report.json, tables.csv,
summary.md) that are byte-identical across reruns with the same seed,
plus the raw step traces (records.jsonl), the latency summary
(timing.json), and a best-MAE-vs-step SVG chart.  Wall-clock values
never enter the deterministic three.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .benchmark import (
    ScenarioStudyReport,
    SuiteReport,
    steps_to_convergence,
    steps_to_target,
    timing_report,
)
from .records import RunRecord, write_records_jsonl

_CHART_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _trial_summaries(records: dict[str, list[RunRecord]]) -> list[dict]:
    rows = []
    for optimizer_id in sorted(records):
        for record in records[optimizer_id]:
            rows.append(
                {
                    "trial_id": record.trial_id,
                    "optimizer_id": optimizer_id,
                    "final_mae_um": record.final_mae * 1e6,
                    "initial_mae_um": record.initial.mae * 1e6,
                    "steps_to_target": steps_to_target(record),
                    "steps_to_convergence": steps_to_convergence(record),
                    "final_kind": record.final_kind,
                    "flags": list(record.flags),
                }
            )
    return rows


def suite_report_dict(report: SuiteReport) -> dict:
    """Timing-free full report: aggregate rows plus per-trial summaries."""
    data = report.to_dict()
    data["trials"] = _trial_summaries(report.records)
    return data


_TABLE_COLUMNS = (
    "optimizer_id",
    "n_trials",
    "final_mae_median_um",
    "final_mae_mean_um",
    "final_mae_std_um",
    "target_median_steps",
    "target_mean_steps",
    "target_std_steps",
    "target_success_rate",
    "convergence_median_steps",
    "convergence_mean_steps",
    "convergence_std_steps",
    "convergence_success_rate",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def suite_tables_csv(report: SuiteReport) -> str:
    lines = [",".join(_TABLE_COLUMNS)]
    for row in report.rows:
        data = row.to_dict()
        lines.append(",".join(_cell(data[c]) for c in _TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def suite_summary_md(report: SuiteReport) -> str:
    lines = [
        f"# Suite summary: {report.scenario_id}",
        "",
        f"Seed {report.suite_seed}, budget {report.budget} steps, "
        f"{report.to_dict()['n_trials']} trials.",
        "",
        "| optimizer | final MAE median (µm) | final MAE mean ± std (µm) | "
        "steps to target (median, success) | steps to convergence (median, success) |",
        "|---|---|---|---|---|",
    ]
    for row in report.rows:
        target = (
            f"{_cell(row.target_median_steps)} ({row.target_success_rate:.0%})"
            if row.target_median_steps is not None
            else f"- ({row.target_success_rate:.0%})"
        )
        conv = (
            f"{_cell(row.convergence_median_steps)} ({row.convergence_success_rate:.0%})"
            if row.convergence_median_steps is not None
            else f"- ({row.convergence_success_rate:.0%})"
        )
        lines.append(
            f"| {row.optimizer_id} | {row.final_mae_median_um:.1f} | "
            f"{row.final_mae_mean_um:.1f} ± {row.final_mae_std_um:.1f} | "
            f"{target} | {conv} |"
        )
    lines.append("")
    lines.append("## Win rates (row beats column)")
    lines.append("")
    ids = sorted(report.win_rates)
    if ids:
        lines.append("| | " + " | ".join(ids) + " |")
        lines.append("|---" * (len(ids) + 1) + "|")
        for first in ids:
            cells = [f"{report.win_rates[first][second]:.0%}" for second in ids]
            lines.append(f"| {first} | " + " | ".join(cells) + " |")
    if report.failures:
        lines.append("")
        lines.append(f"{len(report.failures)} run(s) failed; see report.json.")
    lines.append("")
    return "\n".join(lines)


def scenario_tables_csv(study: ScenarioStudyReport) -> str:
    cell_ids = list(study.cells)
    optimizer_ids = sorted(
        {opt for cell in study.cells.values() for opt in cell}
    )
    lines = ["optimizer_id," + ",".join(f"{c}_mean_um" for c in cell_ids)]
    for optimizer_id in optimizer_ids:
        cells = []
        for cell_id in cell_ids:
            value = study.cells[cell_id].get(optimizer_id, {}).get("mean_final_mae_um")
            cells.append(_cell(value))
        lines.append(f"{optimizer_id}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def scenario_summary_md(study: ScenarioStudyReport) -> str:
    cell_ids = list(study.cells)
    optimizer_ids = sorted(
        {opt for cell in study.cells.values() for opt in cell}
    )
    lines = [
        "# Feedback and failure studies",
        "",
        f"Seed {study.suite_seed}, {study.budget}-step runs; "
        "cells report mean final MAE (µm).",
        "",
        "| optimizer | " + " | ".join(cell_ids) + " |",
        "|---" * (len(cell_ids) + 1) + "|",
    ]
    for optimizer_id in optimizer_ids:
        cells = []
        for cell_id in cell_ids:
            value = study.cells[cell_id].get(optimizer_id, {}).get("mean_final_mae_um")
            cells.append(f"{value:.1f}" if value is not None else "-")
        lines.append(f"| {optimizer_id} | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def best_mae_chart_svg(records: dict[str, list[RunRecord]], budget: int) -> str:
    """Median best-seen MAE per step, log scale, one polyline per optimizer."""
    width, height = 640, 400
    left, right, top, bottom = 60, 20, 20, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    series: dict[str, np.ndarray] = {}
    for optimizer_id in sorted(records):
        group = records[optimizer_id]
        if not group:
            continue
        length = min(len(r.best_mae_series()) for r in group)
        if length == 0:
            continue
        stack = np.stack([r.best_mae_series()[:length] for r in group])
        series[optimizer_id] = np.median(stack, axis=0) * 1e6
    if series:
        lo = min(float(np.min(s)) for s in series.values())
        hi = max(float(np.max(s)) for s in series.values())
    else:
        lo, hi = 1.0, 1000.0
    lo = max(lo * 0.8, 1e-3)
    hi = hi * 1.2
    log_lo, log_hi = np.log10(lo), np.log10(hi)
    max_step = max((len(s) for s in series.values()), default=budget)

    def x_at(step: float) -> float:
        return left + plot_w * step / max(max_step - 1, 1)

    def y_at(value: float) -> float:
        fraction = (np.log10(value) - log_lo) / (log_hi - log_lo)
        return top + plot_h * (1.0 - fraction)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333"/>',
    ]
    decade = int(np.ceil(log_lo))
    while decade <= log_hi:
        y = y_at(10.0**decade)
        parts.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" '
            'stroke="#ddd"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">'
            f"10<tspan baseline-shift=\"super\" font-size=\"9\">{decade}</tspan></text>"
        )
        decade += 1
    for tick in range(0, max_step, max(max_step // 5, 1)):
        x = x_at(tick)
        parts.append(
            f'<text x="{x:.1f}" y="{top + plot_h + 16}" text-anchor="middle">{tick}</text>'
        )
    parts.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 6}" text-anchor="middle">'
        "step</text>"
    )
    parts.append(
        f'<text x="14" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + plot_h / 2:.1f})">best MAE (µm)</text>'
    )
    for color_index, (optimizer_id, values) in enumerate(series.items()):
        color = _CHART_COLORS[color_index % len(_CHART_COLORS)]
        points = " ".join(
            f"{x_at(i):.1f},{y_at(v):.1f}" for i, v in enumerate(values)
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{left + plot_w - 6}" y="{top + 16 + 16 * color_index}" '
            f'text-anchor="end" fill="{color}">{optimizer_id}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _all_records(records: dict[str, list[RunRecord]]) -> list[RunRecord]:
    merged: list[RunRecord] = []
    for optimizer_id in sorted(records):
        merged.extend(records[optimizer_id])
    return merged


def write_suite_outputs(report: SuiteReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the full artefact set for one suite run; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged = _all_records(report.records)
    paths = {
        "report": out / "report.json",
        "tables": out / "tables.csv",
        "summary": out / "summary.md",
        "records": out / "records.jsonl",
        "timing": out / "timing.json",
        "chart": out / "chart.svg",
    }
    _write_json(paths["report"], suite_report_dict(report))
    paths["tables"].write_text(suite_tables_csv(report))
    paths["summary"].write_text(suite_summary_md(report))
    write_records_jsonl(paths["records"], merged)
    _write_json(paths["timing"], timing_report(merged))
    paths["chart"].write_text(best_mae_chart_svg(report.records, report.budget))
    return paths


def write_scenario_outputs(
    study: ScenarioStudyReport, out_dir: str | Path
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged: list[RunRecord] = []
    for cell_id in study.records:
        merged.extend(_all_records(study.records[cell_id]))
    paths = {
        "report": out / "report.json",
        "tables": out / "tables.csv",
        "summary": out / "summary.md",
        "records": out / "records.jsonl",
        "timing": out / "timing.json",
    }
    _write_json(paths["report"], study.to_dict())
    paths["tables"].write_text(scenario_tables_csv(study))
    paths["summary"].write_text(scenario_summary_md(study))
    write_records_jsonl(paths["records"], merged)
    _write_json(paths["timing"], timing_report(merged))
    return paths
