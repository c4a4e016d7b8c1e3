"""Rendering of run artifacts: trajectory figures plus a delimited table.

A search run with ``--out`` leaves a ``trajectory.jsonl`` behind (one JSON
object per iteration; non-finite numbers are stored as null). This module
turns that file into ``trajectory.csv`` and a pair of matplotlib figures
written next to it, so a run can be inspected without any Python session.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TRAJECTORY_FIELDS = ("iter", "best_mse", "best_nmse", "best_reward", "gate_open", "evals")


def load_trajectory(path: str | Path) -> list[dict]:
    """Read a trajectory.jsonl file into per-iteration records.

    Nulls (the JSON spelling of non-finite floats) are restored to nan so
    numeric handling stays uniform downstream. Blank lines are skipped;
    a malformed line raises ValueError naming the offending line number.
    """
    records: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno} is not JSON: {exc}") from exc
            record = dict(raw)
            for field in ("best_mse", "best_nmse", "best_reward"):
                value = record.get(field)
                record[field] = float("nan") if value is None else float(value)
            records.append(record)
    return records


def write_trajectory_csv(records: list[dict], path: str | Path) -> Path:
    """Write the per-iteration records as a flat CSV (nan cells left empty)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_FIELDS)
        for record in records:
            row = []
            for field in TRAJECTORY_FIELDS:
                value = record.get(field)
                if isinstance(value, float) and not math.isfinite(value):
                    value = ""
                elif isinstance(value, bool):
                    value = int(value)
                row.append(value)
            writer.writerow(row)
    return path


def _column(records: list[dict], field: str) -> np.ndarray:
    return np.array([float(r.get(field, float("nan"))) for r in records])


def render_figures(records: list[dict], out_dir: str | Path) -> list[Path]:
    """Render the convergence and reward figures; returns the written paths."""
    out_dir = Path(out_dir)
    iters = _column(records, "iter")
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for field, label in (("best_mse", "best MSE"), ("best_nmse", "best NMSE")):
        values = _column(records, field)
        mask = np.isfinite(values) & (values > 0)
        if mask.any():
            ax.semilogy(iters[mask], values[mask], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("error")
    ax.set_title("convergence")
    ax.grid(True, which="both", alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    path = out_dir / "convergence.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    rewards = _column(records, "best_reward")
    mask = np.isfinite(rewards)
    if mask.any():
        ax.plot(iters[mask], rewards[mask], color="tab:green", label="best reward")
    gate = np.array([bool(r.get("gate_open")) for r in records])
    if gate.any():
        low, high = ax.get_ylim()
        ax.fill_between(
            iters,
            low,
            high,
            where=gate,
            alpha=0.15,
            color="tab:orange",
            label="physical gate open",
        )
        ax.set_ylim(low, high)
    ax.set_xlabel("iteration")
    ax.set_ylabel("reward")
    ax.set_title("best reward")
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower right")
    path = out_dir / "reward.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Render trajectory.csv and the figures for one run directory.

    Returns {"csv": path, "figures": [paths], "iterations": count}. Raises
    FileNotFoundError when the run directory has no trajectory.jsonl.
    """
    run_dir = Path(run_dir)
    traj_path = run_dir / "trajectory.jsonl"
    if not traj_path.exists():
        raise FileNotFoundError(f"{traj_path} does not exist; was the run started with --out?")
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_trajectory(traj_path)
    csv_path = write_trajectory_csv(records, out_dir / "trajectory.csv")
    figures = render_figures(records, out_dir)
    return {
        "csv": str(csv_path),
        "figures": [str(p) for p in figures],
        "iterations": len(records),
    }
