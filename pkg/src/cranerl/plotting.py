"""Matplotlib figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EpisodeRecord, record_profile  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(log: Sequence[dict], path: str | Path) -> Path:
    """Mean episodic return and plane height against simulation steps."""
    steps = np.array([r["step"] for r in log], dtype=float)
    ret = np.array([r["mean_return"] for r in log], dtype=float)
    height = np.array([r["plane_height"] for r in log], dtype=float)
    rate = np.array([r["success_rate_20"] for r in log], dtype=float)
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(steps, ret, lw=1)
    axes[0].set_ylabel("mean return")
    axes[1].plot(steps, rate, lw=1, color="tab:green")
    axes[1].set_ylabel("success (last 20)")
    axes[1].set_ylim(-0.05, 1.05)
    axes[2].step(steps, height, where="post", color="tab:orange")
    axes[2].set_ylabel("plane height [m]")
    axes[2].set_xlabel("simulation steps")
    for ax in axes:
        ax.grid(alpha=0.3)
    return _save(fig, path)


def tip_profiles(records: dict[str, EpisodeRecord], path: str | Path) -> Path:
    """Boom-tip speed and acceleration over time, one line per labelled episode."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for label, rec in records.items():
        if len(rec.trace) < 3:
            continue
        prof = record_profile(rec)
        axes[0].plot(prof.t, prof.speed, lw=1, label=f"{label} (jerk rms {prof.jerk_rms:.1f})")
        axes[1].plot(prof.t, prof.accel, lw=1, label=label)
    axes[0].set_ylabel("tip speed [m/s]")
    axes[1].set_ylabel("tip accel [m/s²]")
    axes[1].set_xlabel("time [s]")
    if records:
        axes[0].legend(fontsize=8)
    for ax in axes:
        ax.grid(alpha=0.3)
    return _save(fig, path)


def energy_histogram(energies: dict[str, Sequence[float]], path: str | Path) -> Path:
    """Distribution of energy to grasp initiation over successful episodes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    finite = [e for vals in energies.values() for e in vals if math.isfinite(e)]
    bins = np.linspace(0.0, max(finite) if finite else 1.0, 30)
    for label, vals in energies.items():
        vals = [v / 1e3 for v in vals if math.isfinite(v)]
        if vals:
            ax.hist(vals, bins=bins / 1e3, alpha=0.6, label=label)
    ax.set_xlabel("energy to grasp [kJ]")
    ax.set_ylabel("episodes")
    if finite:
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no successful episodes", transform=ax.transAxes, ha="center")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def sensitivity_bars(rows, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r.perturbation for r in rows]
    vals = [r.retention if math.isfinite(r.retention) else 0.0 for r in rows]
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("success retention")
    return _save(fig, path)
