"""CSV emission with stable headers and locale-independent numbers."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_text
from .evaluation import EpisodeRecord, EvalSummary, SensitivityRow, profile_trajectory

SUMMARY_HEADER = ("policy", "n", "success_rate", "mean_time_s", "mean_energy_J", "relative_energy")
SENSITIVITY_HEADER = ("perturbation", "baseline", "perturbed", "retention")
TRAJECTORY_HEADER = (("t", "tip_x", "tip_y", "tip_z", "speed", "accel")
                     + tuple(f"q{i}" for i in range(1, 7))
                     + tuple(f"qdot{i}" for i in range(1, 7))
                     + tuple(f"tau{i}" for i in range(1, 7))
                     + ("energy_cum",))


def fmt(value) -> str:
    """Shortest round-tripping text for numbers; never locale dependent."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    atomic_write_text(path, csv_text(header, rows))
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_dict_rows(path: str | Path, header: Sequence[str], rows: Iterable[dict]) -> Path:
    return write_csv(path, header, ([r[k] for k in header] for r in rows))


def summary_rows(summaries: Sequence[EvalSummary]) -> list[tuple]:
    return [(s.label, s.n, s.success_rate, s.mean_time, s.mean_energy, s.relative_energy)
            for s in summaries]


def write_summary(path, summaries: Sequence[EvalSummary]) -> Path:
    return write_csv(path, SUMMARY_HEADER, summary_rows(summaries))


def write_sensitivity(path, rows: Sequence[SensitivityRow]) -> Path:
    return write_csv(path, SENSITIVITY_HEADER,
                     [(r.perturbation, r.baseline, r.perturbed, r.retention) for r in rows])


def trajectory_rows(record: EpisodeRecord) -> list[tuple]:
    trace = record.trace
    t = [e["t"] for e in trace]
    tips = np.array([e["tip"] for e in trace])
    if len(trace) >= 3:
        prof = profile_trajectory(t, tips)
        speed, accel = prof.speed, prof.accel
    else:
        speed = accel = np.zeros(len(trace))
    rows = []
    for k, e in enumerate(trace):
        rows.append((e["t"], *e["tip"], speed[k], accel[k], *e["q"], *e["qdot"], *e["tau"],
                     e["energy"]))
    return rows


def write_trajectory(path, record: EpisodeRecord) -> Path:
    return write_csv(path, TRAJECTORY_HEADER, trajectory_rows(record))
