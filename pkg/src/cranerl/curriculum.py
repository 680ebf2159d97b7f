"""Artificial-plane curriculum: lesson schedule and windowed advancement."""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .crane import CraneModel
from .world import ConfigurationError, SectorRegion


@dataclass(frozen=True)
class LessonSpec:
    index: int
    plane_height: float
    region: SectorRegion
    plane_collision_enabled: bool
    advancement_threshold: float = 0.30
    window: int = 20

    def __post_init__(self):
        if self.plane_height < 0:
            raise ConfigurationError("plane height must be >= 0")
        if not 0.0 < self.advancement_threshold <= 1.0:
            raise ConfigurationError("advancement threshold must lie in (0, 1]")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")


@dataclass(frozen=True)
class CurriculumConfig:
    h0: float = 2.5
    descent_step: float = 0.1
    expansion_factors: tuple = (0.25, 0.5, 0.75, 1.0)
    # lesson-1 region around the grapple's ground projection
    initial_region: SectorRegion = SectorRegion(2.2, 2.8, math.pi - 0.1, math.pi + 0.1)
    # target region on the near side of the vehicle
    target_region: SectorRegion = SectorRegion(3.5, 6.0, math.radians(50), math.radians(130))
    reach_margin: float = 0.3
    advancement_threshold: float = 0.30
    window: int = 20


def _lerp_region(a: SectorRegion, b: SectorRegion, f: float) -> SectorRegion:
    return SectorRegion(*(x + f * (y - x) for x, y in
                          zip((a.r_min, a.r_max, a.theta_min, a.theta_max),
                              (b.r_min, b.r_max, b.theta_min, b.theta_max))))


def _hull(a: SectorRegion, b: SectorRegion) -> SectorRegion:
    return SectorRegion(min(a.r_min, b.r_min), max(a.r_max, b.r_max),
                        min(a.theta_min, b.theta_min), max(a.theta_max, b.theta_max))


def grasp_tip_height(plane_height: float, crane: CraneModel, log_radius: float = 0.08,
                     grapple_clearance: float = 0.175) -> float:
    """Boom-tip height at which the hanging grapple sits just above a log on the plane."""
    return plane_height + log_radius + grapple_clearance + crane.geometry.pendulum_length


def horizontal_reach(crane: CraneModel, tip_z: float, n_grid: int = 1441) -> float:
    """Largest horizontal distance of the boom tip from the slewing axis at height tip_z.

    For each inner-boom angle on a dense grid and each telescope setting,
    the outer boom angle that puts the tip at ``tip_z`` is solved in closed
    form; configurations violating the q3 range are discarded.
    """
    g = crane.geometry
    lo, hi = crane.range_min, crane.range_max
    best = -math.inf
    e2 = np.linspace(lo[1], hi[1], n_grid)
    for q4 in np.linspace(lo[3], hi[3], 9):
        ext = g.L3 + q4
        s = (tip_z - g.pillar_height - g.L2 * np.sin(e2)) / ext
        ok = np.abs(s) <= 1.0
        if not ok.any():
            continue
        e3 = np.arcsin(np.clip(s, -1.0, 1.0))
        for cand in (e3, math.pi - e3, -math.pi - e3):
            q3 = cand - e2
            valid = ok & (q3 >= lo[2]) & (q3 <= hi[2])
            if valid.any():
                r = g.L2 * np.cos(e2) + ext * np.cos(cand)
                best = max(best, float(np.max(r[valid])))
    if best == -math.inf:
        raise ConfigurationError(f"tip height {tip_z:.3f} m is unreachable")
    return best


def lesson_region(region: SectorRegion, plane_height: float, crane: CraneModel,
                  margin: float = 0.3) -> SectorRegion:
    """Shrink ``region`` so every log in it is reachable at this plane height."""
    reach = horizontal_reach(crane, grasp_tip_height(plane_height, crane)) - margin
    out = SectorRegion(region.r_min, min(region.r_max, reach), region.theta_min, region.theta_max)
    if out.r_max < out.r_min:
        raise ConfigurationError(
            f"region {region} unreachable at plane height {plane_height} (reach {reach:.2f} m)")
    out.validate()
    return out


def build_schedule(config: CurriculumConfig, crane: CraneModel) -> list[LessonSpec]:
    """Expanding lessons at h0, descent in fixed steps down to 0, then the target lesson."""
    h0, step = config.h0, config.descent_step
    if h0 <= 0 or step <= 0:
        raise ConfigurationError("h0 and descent_step must be > 0")
    n_descent = round(h0 / step)
    if abs(n_descent * step - h0) > 1e-9:
        raise ConfigurationError(f"h0={h0} is not a multiple of the {step} m descent step")

    plan = [(h0, _hull(config.initial_region, _lerp_region(config.initial_region,
                                                           config.target_region, f)))
            for f in config.expansion_factors]
    for k in range(1, n_descent + 1):
        # integer arithmetic keeps the heights exact multiples of the step
        plan.append((round((n_descent - k) * step, 10), config.target_region))
    plan.append((0.0, config.target_region))

    lessons = []
    for i, (h, region) in enumerate(plan):
        lessons.append(LessonSpec(
            index=i, plane_height=h,
            region=lesson_region(region, h, crane, config.reach_margin),
            plane_collision_enabled=h <= 0.0,
            advancement_threshold=config.advancement_threshold,
            window=config.window,
        ))
    return lessons


@dataclass
class ProgressTracker:
    n_lessons: int
    window: int = 20
    threshold: float = 0.30
    lesson: int = 0
    outcomes: deque = field(default_factory=deque)

    def __post_init__(self):
        self.outcomes = deque(self.outcomes, maxlen=self.window)

    @property
    def is_final(self) -> bool:
        return self.lesson >= self.n_lessons - 1

    def success_rate(self) -> float | None:
        if len(self.outcomes) < self.window:
            return None
        return sum(self.outcomes) / self.window

    def record(self, success: bool) -> bool:
        """Log an episode outcome; returns True when the lesson advanced."""
        self.outcomes.append(bool(success))
        rate = self.success_rate()
        if rate is None or self.is_final or rate < self.threshold:
            return False
        self.lesson += 1
        self.outcomes.clear()
        return True

    def state_dict(self) -> dict:
        return {"lesson": self.lesson, "outcomes": [int(o) for o in self.outcomes]}

    def load_state_dict(self, state: dict) -> None:
        self.lesson = int(state["lesson"])
        self.outcomes = deque((bool(o) for o in state["outcomes"]), maxlen=self.window)


def record_and_maybe_advance(tracker: ProgressTracker, outcome: bool) -> tuple[ProgressTracker, bool]:
    advanced = tracker.record(outcome)
    return tracker, advanced


def schedule_csv(lessons: list[LessonSpec]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lesson", "plane_height", "r_min", "r_max", "theta_min", "theta_max",
                "plane_collision"])
    for l in lessons:
        r = l.region
        w.writerow([l.index, l.plane_height, r.r_min, r.r_max, r.theta_min, r.theta_max,
                    int(l.plane_collision_enabled)])
    return buf.getvalue()
