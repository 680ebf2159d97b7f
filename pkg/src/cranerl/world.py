"""Log, load bunk, grasp/collision geometry and evaluation perturbations."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .crane import GRAVITY, CraneModel, GrapplePose, KinematicFrames


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SectorRegion:
    """Annular sector in crane-base polar coordinates (theta from +x towards +y)."""

    r_min: float
    r_max: float
    theta_min: float
    theta_max: float

    def validate(self) -> None:
        if not (0.0 <= self.r_min <= self.r_max) or not (self.theta_min <= self.theta_max):
            raise ConfigurationError(f"empty or malformed sampling region {self}")
        if not all(map(math.isfinite, (self.r_min, self.r_max, self.theta_min, self.theta_max))):
            raise ConfigurationError(f"non-finite sampling region {self}")

    @property
    def area(self) -> float:
        return 0.5 * (self.theta_max - self.theta_min) * (self.r_max ** 2 - self.r_min ** 2)

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        r = math.hypot(x, y)
        th = math.atan2(y, x)
        # bring theta into the sector's winding
        while th < self.theta_min - tol:
            th += 2 * math.pi
        while th > self.theta_max + tol and th - 2 * math.pi >= self.theta_min - tol:
            th -= 2 * math.pi
        return (self.r_min - tol <= r <= self.r_max + tol
                and self.theta_min - tol <= th <= self.theta_max + tol)


@dataclass
class LogState:
    com: np.ndarray
    heading: float
    length: float = 1.5
    radius: float = 0.08
    mass: float = 50.0
    attached: bool = False
    # resting height of the C.o.M on its support
    support_height: float = 0.08

    def __post_init__(self):
        if self.radius <= 0 or self.length <= 0:
            raise ValueError("log radius and length must be > 0")
        self.heading = self.heading % math.pi

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading), 0.0])

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.length * self.axis
        return self.com - half, self.com + half


@dataclass(frozen=True)
class LogSpec:
    train_length: float = 1.5
    eval_length: float = 3.0
    radius: float = 0.08
    mass: float = 50.0


def sample_log(lesson, rng: np.random.Generator, mode: str = "train",
               spec: LogSpec = LogSpec()) -> LogState:
    """Draw a log uniformly (by area) over the lesson's sampling region."""
    region: SectorRegion = lesson.region
    region.validate()
    u_r, u_th, u_psi = rng.random(3)
    r = math.sqrt(region.r_min ** 2 + u_r * (region.r_max ** 2 - region.r_min ** 2))
    th = region.theta_min + u_th * (region.theta_max - region.theta_min)
    z = lesson.plane_height + spec.radius
    length = spec.eval_length if mode == "eval" else spec.train_length
    return LogState(com=np.array([r * math.cos(th), r * math.sin(th), z]),
                    heading=math.pi * u_psi, length=length, radius=spec.radius,
                    mass=spec.mass, support_height=z)


# -- grasping ----------------------------------------------------------------

class GraspStatus(enum.IntEnum):
    NONE = 0
    CAPTURED = 1
    ATTACHED = 2


@dataclass(frozen=True)
class GraspConfig:
    capture_radius: float = 0.25
    claw_depth: float = 0.35
    grip_slack: float = 0.05
    lift_threshold: float = 0.3
    # half-width of the claw region along the log axis
    claw_half_width: float = 0.15
    # largest angle between log axis and closing-plane normal that claws can enclose
    max_misalignment: float = math.radians(45.0)
    claw_radius: float = 0.05

    def attach_gap(self, log_radius: float) -> float:
        return 2.0 * log_radius + self.grip_slack


def grapple_axes(yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Closing direction of the claws and the closing-plane normal."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c, s, 0.0]), np.array([-s, c, 0.0])


def segment_hits_box(p0, p1, lo, hi) -> bool:
    """Slab test of the segment p0->p1 against the axis-aligned box [lo, hi]."""
    t0, t1 = 0.0, 1.0
    for i in range(3):
        d = p1[i] - p0[i]
        if abs(d) < 1e-15:
            if p0[i] < lo[i] or p0[i] > hi[i]:
                return False
            continue
        a = (lo[i] - p0[i]) / d
        b = (hi[i] - p0[i]) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
        if t0 > t1:
            return False
    return True


def claw_region_local(log: LogState, pose: GrapplePose):
    """Log axis endpoints expressed in the grapple frame (closing, normal, up)."""
    c, n = grapple_axes(pose.yaw)
    a, b = log.endpoints()
    rot = np.stack([c, n, np.array([0.0, 0.0, 1.0])])
    return rot @ (a - pose.center), rot @ (b - pose.center)


def detect_grasp(pose: GrapplePose, aperture: float, log: LogState,
                 cfg: GraspConfig = GraspConfig()) -> GraspStatus:
    """Classify the log relative to the claws.

    Captured: the log axis crosses the claw region, a box spanning
    ``capture_radius`` along the closing direction, ``claw_half_width`` along
    the closing-plane normal and ``claw_depth`` below the grapple centre, and
    the log is aligned with the normal to within ``max_misalignment``.
    Attached: captured with the claw gap closed around the log.
    """
    diff = (log.heading - pose.yaw - 0.5 * math.pi) % math.pi
    misalignment = min(diff, math.pi - diff)
    if misalignment > cfg.max_misalignment:
        return GraspStatus.NONE
    a, b = claw_region_local(log, pose)
    lo = (-cfg.capture_radius, -cfg.claw_half_width, -cfg.claw_depth)
    hi = (cfg.capture_radius, cfg.claw_half_width, 0.0)
    if not segment_hits_box(a, b, lo, hi):
        return GraspStatus.NONE
    if aperture <= cfg.attach_gap(log.radius):
        return GraspStatus.ATTACHED
    return GraspStatus.CAPTURED


def update_attachment(attached: bool, status: GraspStatus, aperture: float,
                      log: LogState, cfg: GraspConfig = GraspConfig()) -> bool:
    """Sticky attachment: once closed on the log it holds until the claws reopen."""
    if attached:
        return aperture <= cfg.attach_gap(log.radius)
    return status == GraspStatus.ATTACHED


def check_success(log: LogState, cfg: GraspConfig = GraspConfig()) -> bool:
    return bool(log.attached and log.com[2] >= log.support_height + cfg.lift_threshold)


# -- collisions --------------------------------------------------------------

@dataclass(frozen=True)
class BunkBox:
    center: tuple = (-2.5, 0.0, 0.75)
    half_extents: tuple = (1.5, 1.2, 0.75)
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("bunk half extents must be > 0")

    def to_local(self, p) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = np.asarray(p, dtype=float) - np.asarray(self.center, dtype=float)
        return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])

    def contains(self, p) -> bool:
        return bool(np.all(np.abs(self.to_local(p)) <= np.asarray(self.half_extents)))


class Capsule(NamedTuple):
    a: np.ndarray
    b: np.ndarray
    radius: float


def point_box_distance(p, half) -> float:
    d = np.maximum(np.abs(np.asarray(p)) - np.asarray(half), 0.0)
    return float(math.sqrt(d @ d))


def segment_box_distance(p0, p1, half) -> float:
    """Exact distance between segment p0->p1 and the box |x_i| <= half_i (box frame).

    The squared distance along the segment is a convex piecewise quadratic in
    the segment parameter whose pieces break where a coordinate crosses a box
    face; each piece is minimized in closed form.
    """
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    half = np.asarray(half, dtype=float)
    ts = [0.0, 1.0]
    for i in range(3):
        if d[i] != 0.0:
            for face in (-half[i], half[i]):
                t = (face - p0[i]) / d[i]
                if 0.0 < t < 1.0:
                    ts.append(t)
    ts.sort()
    best = math.inf
    for lo, hi in zip(ts[:-1], ts[1:]):
        mid = p0 + 0.5 * (lo + hi) * d
        # on this piece coordinate i contributes (p0_i + t d_i - face_i)^2 or 0
        qa = qb = qc = 0.0
        for i in range(3):
            if mid[i] > half[i]:
                off = p0[i] - half[i]
            elif mid[i] < -half[i]:
                off = p0[i] + half[i]
            else:
                continue
            qa += d[i] * d[i]
            qb += 2.0 * off * d[i]
            qc += off * off
        t = lo if qa == 0.0 else min(max(-qb / (2.0 * qa), lo), hi)
        best = min(best, qa * t * t + qb * t + qc)
    return math.sqrt(max(best, 0.0))


def capsule_hits_box(cap: Capsule, box: BunkBox) -> bool:
    # bounding-sphere rejection before the exact test
    mid = 0.5 * (cap.a + cap.b) - np.asarray(box.center)
    reach = 0.5 * math.dist(cap.a, cap.b) + cap.radius + math.hypot(*box.half_extents)
    if mid @ mid > reach * reach:
        return False
    a = box.to_local(cap.a)
    b = box.to_local(cap.b)
    return segment_box_distance(a, b, box.half_extents) <= cap.radius


def claw_tips(pose: GrapplePose, aperture: float, cfg: GraspConfig) -> tuple[np.ndarray, np.ndarray]:
    c, _ = grapple_axes(pose.yaw)
    down = np.array([0.0, 0.0, -cfg.claw_depth])
    return pose.center + 0.5 * aperture * c + down, pose.center - 0.5 * aperture * c + down


def crane_capsules(frames: KinematicFrames, pose: GrapplePose, aperture: float,
                   cfg: GraspConfig = GraspConfig()) -> dict[str, Capsule]:
    c, _ = grapple_axes(pose.yaw)
    tip_a, tip_b = claw_tips(pose, aperture, cfg)
    hinge = 0.15 * c
    return {
        "pillar": Capsule(np.zeros(3), frames.pillar_top, 0.25),
        "inner_boom": Capsule(frames.pillar_top, frames.elbow, 0.2),
        "outer_boom": Capsule(frames.elbow, frames.tip, 0.15),
        "grapple": Capsule(frames.tip, pose.center, 0.15),
        "claw_a": Capsule(pose.center + hinge, tip_a, cfg.claw_radius),
        "claw_b": Capsule(pose.center - hinge, tip_b, cfg.claw_radius),
    }


@dataclass(frozen=True)
class CollisionReport:
    bunk: tuple[str, ...] = ()
    plane: bool = False
    ground: bool = False

    @property
    def bunk_collision(self) -> bool:
        return bool(self.bunk)


def check_collisions(capsules: dict[str, Capsule], bunk: BunkBox, plane_height: float,
                     plane_collision_enabled: bool) -> CollisionReport:
    hits = tuple(name for name, cap in capsules.items() if capsule_hits_box(cap, bunk))
    claw_low = min(min(cap.a[2], cap.b[2]) - cap.radius
                   for name, cap in capsules.items() if name.startswith("claw"))
    plane = plane_collision_enabled and claw_low < plane_height
    return CollisionReport(bunk=hits, plane=bool(plane), ground=bool(claw_low < 0.0))


# -- perturbations -----------------------------------------------------------

@dataclass(frozen=True)
class PerturbationConfig:
    position_noise_radius: float = 0.0
    heading_noise: float = 0.0
    mass_scale: float = 1.0
    slope_grade: float = 0.0
    base_compliance_enabled: bool = False
    compliance_stiffness: float = 2e5
    compliance_damping: float = 1e4
    chassis_inertia: float = 2e4

    def __post_init__(self):
        if min(self.position_noise_radius, self.heading_noise, self.slope_grade,
               self.compliance_stiffness, self.compliance_damping) < 0:
            raise ValueError("perturbation magnitudes must be >= 0")
        if self.mass_scale <= 0 or self.chassis_inertia <= 0:
            raise ValueError("mass_scale and chassis_inertia must be > 0")

    @property
    def is_identity(self) -> bool:
        return (self.position_noise_radius == 0 and self.heading_noise == 0
                and self.mass_scale == 1.0 and self.slope_grade == 0
                and not self.base_compliance_enabled)


@dataclass
class PerturbedView:
    position_offset: np.ndarray
    heading_offset: float
    gravity: np.ndarray
    crane: CraneModel
    compliance: "ChassisCompliance | None" = None


def sphere_surface_point(rng: np.random.Generator, radius: float) -> np.ndarray:
    v = rng.normal(size=3)
    return radius * v / np.linalg.norm(v)


def slope_gravity(slope_grade: float) -> np.ndarray:
    """Gravity in the vehicle frame with the front (+x) tilted uphill."""
    th = math.atan(slope_grade)
    return GRAVITY * np.array([-math.sin(th), 0.0, -math.cos(th)])


def apply_perturbations(config: PerturbationConfig, crane: CraneModel,
                        rng: np.random.Generator) -> PerturbedView:
    """Draw one episode's observation errors and build the perturbed plant."""
    offset = np.zeros(3)
    if config.position_noise_radius > 0:
        offset = sphere_surface_point(rng, config.position_noise_radius)
    dpsi = 0.0
    if config.heading_noise > 0:
        dpsi = float(rng.uniform(-config.heading_noise, config.heading_noise))
    if config.mass_scale != 1.0:
        crane = crane.with_mass_scale(config.mass_scale)
    gravity = slope_gravity(config.slope_grade) if config.slope_grade else np.array([0.0, 0.0, -GRAVITY])
    compliance = ChassisCompliance(config) if config.base_compliance_enabled else None
    return PerturbedView(offset, dpsi, gravity, crane, compliance)


@dataclass
class ChassisCompliance:
    """Pitch/roll spring-damper of the chassis, driven by crane weight moment changes.

    Stands in for tyre/terrain flexibility: the crane base tilts, which
    rotates gravity as seen in the crane frame.
    """

    config: PerturbationConfig
    angles: np.ndarray = field(default_factory=lambda: np.zeros(2))  # (roll about x, pitch about y)
    rates: np.ndarray = field(default_factory=lambda: np.zeros(2))
    reference_moment: np.ndarray | None = None

    def reset(self, moment: np.ndarray) -> None:
        self.angles = np.zeros(2)
        self.rates = np.zeros(2)
        self.reference_moment = np.asarray(moment, dtype=float)[:2].copy()

    def step(self, moment: np.ndarray, dt: float) -> None:
        if self.reference_moment is None:
            self.reset(moment)
        cfg = self.config
        imbalance = np.asarray(moment, dtype=float)[:2] - self.reference_moment
        acc = (imbalance - cfg.compliance_stiffness * self.angles
               - cfg.compliance_damping * self.rates) / cfg.chassis_inertia
        self.rates = self.rates + dt * acc
        self.angles = self.angles + dt * self.rates

    def gravity(self, base_gravity: np.ndarray) -> np.ndarray:
        roll, pitch = self.angles
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        return (Ry @ Rx).T @ np.asarray(base_gravity, dtype=float)


def perturbation_from_overrides(base: PerturbationConfig, overrides: dict) -> PerturbationConfig:
    known = {f for f in PerturbationConfig.__dataclass_fields__}
    bad = set(overrides) - known
    if bad:
        raise ConfigurationError(f"unknown perturbation field(s): {sorted(bad)}")
    return replace(base, **overrides)
