"""Simplified articulated forestry crane.

Six actuated joints::

    q1  slewing of the pillar about the vertical axis      (rad)
    q2  inner boom elevation at the pillar top              (rad)
    q3  outer boom elevation relative to the inner boom     (rad)
    q4  telescope extension along the outer boom            (m)
    q5  rotator yaw of the grapple                          (rad)
    q6  grapple aperture, i.e. the gap between claw tips    (m)

plus a passive two-axis pendulum (alpha, beta) carrying the grapple below the
boom tip. Each joint is a velocity servo with effort saturation, stepped with
semi-implicit Euler.

Conventions: crane frame has z up, x forward, origin at the pillar foot.
Elevation angles are positive upwards. Pendulum angles are measured in the
crane frame: alpha swings the grapple along +x, beta along +y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

N_JOINTS = 6
ENERGY_JOINTS = (0, 1, 2, 3)
GRAVITY = 9.81
RANGE_TOL = 1e-9


class SimulationFault(FloatingPointError):
    """Raised when the integrator meets non-finite input or state."""


class JointRangeError(ValueError):
    """A joint position lies outside its admissible range."""


@dataclass(frozen=True)
class ActuatorSpec:
    joint_id: str
    kind: str
    range_min: float
    range_max: float
    v_max: float
    effort_max: float
    inertia_eff: float
    rate_fraction: float = 1.0 / 30.0

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"{self.joint_id}: unknown joint kind {self.kind!r}")
        if not self.range_min < self.range_max:
            raise ValueError(f"{self.joint_id}: range_min must be < range_max")
        if self.v_max <= 0 or self.effort_max <= 0 or self.inertia_eff <= 0:
            raise ValueError(f"{self.joint_id}: v_max, effort_max, inertia_eff must be > 0")
        if not 0.0 < self.rate_fraction <= 1.0:
            raise ValueError(f"{self.joint_id}: rate_fraction must lie in (0, 1]")


def default_actuators() -> tuple[ActuatorSpec, ...]:
    return (
        ActuatorSpec("q1", "revolute", -0.6, 3.9, 0.6, 60e3, 1.5e4),
        ActuatorSpec("q2", "revolute", -0.35, 1.45, 0.4, 100e3, 1.5e4),
        ActuatorSpec("q3", "revolute", -2.6, 0.3, 0.4, 60e3, 5.0e3),
        ActuatorSpec("q4", "prismatic", 0.0, 2.0, 0.8, 20e3, 600.0),
        ActuatorSpec("q5", "revolute", -math.pi, math.pi, 1.5, 2e3, 30.0),
        ActuatorSpec("q6", "prismatic", 0.1, 1.6, 0.5, 10e3, 100.0),
    )


@dataclass(frozen=True)
class CraneGeometry:
    pillar_height: float = 1.5
    L2: float = 3.0
    L3: float = 2.0
    telescope_max: float = 2.0
    pendulum_length: float = 0.8
    m_pillar: float = 500.0
    m_inner: float = 500.0
    m_outer: float = 400.0
    m_telescope: float = 200.0
    m_rotator: float = 100.0
    m_grapple: float = 300.0
    # centre-of-mass offsets, measured along each link from its proximal joint
    com_pillar: float = 0.75
    com_inner: float = 1.5
    com_outer: float = 1.0
    # telescope C.o.M sits this far behind the boom tip
    com_telescope_back: float = 1.0

    def __post_init__(self):
        for name in ("pillar_height", "L2", "L3", "telescope_max", "pendulum_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if min(self.masses) <= 0:
            raise ValueError("link masses must be > 0")

    @property
    def reach(self) -> float:
        return self.L2 + self.L3 + self.telescope_max

    @property
    def masses(self) -> tuple[float, ...]:
        return (self.m_pillar, self.m_inner, self.m_outer, self.m_telescope,
                self.m_rotator, self.m_grapple)

    @property
    def total_mass(self) -> float:
        return sum(self.masses)

    def scaled(self, mass_scale: float) -> "CraneGeometry":
        return replace(
            self,
            m_pillar=self.m_pillar * mass_scale,
            m_inner=self.m_inner * mass_scale,
            m_outer=self.m_outer * mass_scale,
            m_telescope=self.m_telescope * mass_scale,
            m_rotator=self.m_rotator * mass_scale,
            m_grapple=self.m_grapple * mass_scale,
        )


class KinematicFrames(NamedTuple):
    pillar_top: np.ndarray
    elbow: np.ndarray
    tip: np.ndarray
    # orientation of the pillar (yaw only), inner boom and outer boom
    R_pillar: np.ndarray
    R_inner: np.ndarray
    R_outer: np.ndarray


class GrapplePose(NamedTuple):
    center: np.ndarray
    yaw: float


@dataclass
class CraneState:
    q: np.ndarray
    qdot: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    v_target: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    pend: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pend_rate: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tip_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def copy(self) -> "CraneState":
        return CraneState(self.q.copy(), self.qdot.copy(), self.v_target.copy(),
                          self.tau.copy(), self.pend.copy(), self.pend_rate.copy(),
                          self.tip_vel.copy(), self.time)


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_elev(e: float) -> np.ndarray:
    # rotation about -y: positive angle lifts +x towards +z
    c, s = math.cos(e), math.sin(e)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def pendulum_offset(pend: Sequence[float], length: float) -> np.ndarray:
    """Vector from boom tip to grapple centre for swing angles (alpha, beta)."""
    a, b = pend[0], pend[1]
    return length * np.array([math.sin(a) * math.cos(b), math.sin(b),
                              -math.cos(a) * math.cos(b)])


class CraneModel:
    """Kinematics, gravity and servo dynamics of the crane.

    The model is stateless; every method maps explicit inputs to outputs, so
    one instance can be shared between environments.
    """

    def __init__(self, geometry: CraneGeometry | None = None,
                 actuators: Sequence[ActuatorSpec] | None = None,
                 pendulum_damping: float = 0.5):
        self.geometry = geometry or CraneGeometry()
        self.actuators = tuple(actuators or default_actuators())
        if len(self.actuators) != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} actuators, got {len(self.actuators)}")
        self.pendulum_damping = pendulum_damping
        self.range_min = np.array([a.range_min for a in self.actuators])
        self.range_max = np.array([a.range_max for a in self.actuators])
        self.v_max = np.array([a.v_max for a in self.actuators])
        self.effort_max = np.array([a.effort_max for a in self.actuators])
        self.inertia = np.array([a.inertia_eff for a in self.actuators])
        self.rate_fraction = np.array([a.rate_fraction for a in self.actuators])

    def with_mass_scale(self, mass_scale: float) -> "CraneModel":
        """Copy with every link mass (and effective inertia) scaled."""
        acts = [replace(a, inertia_eff=a.inertia_eff * mass_scale) for a in self.actuators]
        return CraneModel(self.geometry.scaled(mass_scale), acts, self.pendulum_damping)

    def check_range(self, q: np.ndarray) -> None:
        n = len(q)
        bad = (q < self.range_min[:n] - RANGE_TOL) | (q > self.range_max[:n] + RANGE_TOL)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise JointRangeError(
                f"q{i + 1}={q[i]:.6g} outside [{self.range_min[i]}, {self.range_max[i]}]")

    # -- kinematics --------------------------------------------------------

    def forward_kinematics(self, q: Sequence[float], check: bool = True) -> KinematicFrames:
        q = np.asarray(q, dtype=float)
        if check:
            self.check_range(q)
        g = self.geometry
        R1 = _rot_z(q[0])
        R2 = R1 @ _rot_elev(q[1])
        R3 = R1 @ _rot_elev(q[1] + q[2])
        top = np.array([0.0, 0.0, g.pillar_height])
        elbow = top + g.L2 * R2[:, 0]
        tip = elbow + (g.L3 + q[3]) * R3[:, 0]
        return KinematicFrames(top, elbow, tip, R1, R2, R3)

    def tip_position(self, q: Sequence[float]) -> np.ndarray:
        g = self.geometry
        c1, s1 = math.cos(q[0]), math.sin(q[0])
        e2, e3 = q[1], q[1] + q[2]
        ext = g.L3 + q[3]
        r = g.L2 * math.cos(e2) + ext * math.cos(e3)
        z = g.pillar_height + g.L2 * math.sin(e2) + ext * math.sin(e3)
        return np.array([r * c1, r * s1, z])

    def grapple_pose(self, state: CraneState) -> GrapplePose:
        tip = self.tip_position(state.q)
        center = tip + pendulum_offset(state.pend, self.geometry.pendulum_length)
        return GrapplePose(center, float(state.q[0] + state.q[4]))

    # -- gravity -----------------------------------------------------------

    def _mass_points(self, q, pend, payload_mass: float, payload_offset):
        """Point masses as (mass, position, level, hanging).

        ``level`` is the number of chain joints among q1..q4 that move the
        point. Hanging points (grapple, payload) keep a crane-frame offset from
        the tip, so they move exactly like the tip.
        """
        g = self.geometry
        c1, s1 = math.cos(q[0]), math.sin(q[0])
        e2, e3 = q[1], q[1] + q[2]
        d2 = np.array([c1 * math.cos(e2), s1 * math.cos(e2), math.sin(e2)])
        d3 = np.array([c1 * math.cos(e3), s1 * math.cos(e3), math.sin(e3)])
        top = np.array([0.0, 0.0, g.pillar_height])
        elbow = top + g.L2 * d2
        tip = elbow + (g.L3 + q[3]) * d3
        grapple = tip + pendulum_offset(pend, g.pendulum_length)
        pts = [
            (g.m_pillar, np.array([0.0, 0.0, g.com_pillar]), 1, False),
            (g.m_inner, top + g.com_inner * d2, 2, False),
            (g.m_outer, elbow + g.com_outer * d3, 3, False),
            (g.m_telescope, tip - g.com_telescope_back * d3, 4, False),
            (g.m_rotator, tip, 4, False),
            (g.m_grapple, grapple, 4, True),
        ]
        if payload_mass > 0.0:
            pts.append((payload_mass, grapple + np.asarray(payload_offset, dtype=float), 4, True))
        return pts, top, elbow, tip, d3

    def potential_energy(self, q, pend=(0.0, 0.0), gravity=(0.0, 0.0, -GRAVITY),
                         payload_mass: float = 0.0, payload_offset=(0.0, 0.0, 0.0)) -> float:
        gvec = np.asarray(gravity, dtype=float)
        pts, *_ = self._mass_points(q, pend, payload_mass, payload_offset)
        return float(-sum(m * gvec @ p for m, p, _, _ in pts))

    def gravity_forces(self, q, pend=(0.0, 0.0), gravity=(0.0, 0.0, -GRAVITY),
                       payload_mass: float = 0.0, payload_offset=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Generalized gravity effort -dU/dq on each joint.

        The pendulum offset and any attached payload offset are fixed in the
        crane frame, so points hanging below the tip move exactly like the
        tip under q1..q4. q5 and q6 carry no gravity load.
        """
        gx, gy, gz = (float(v) for v in gravity)
        pts, top, elbow, tip, d3 = self._mass_points(q, pend, payload_mass, payload_offset)
        # sum_i m_i g.(a x (r_i - o)) = a.((sum_i m_i (r_i - o)) x g): one product per joint
        s1 = np.zeros(3)
        s2 = np.zeros(3)
        s3 = np.zeros(3)
        m4 = 0.0
        for m, p, level, hanging in pts:
            mr = m * (tip if hanging else p)
            s1 += mr
            if level >= 2:
                s2 += mr - m * top
            if level >= 3:
                s3 += mr - m * elbow
            if level == 4:
                m4 += m
        c1, s1n = math.cos(q[0]), math.sin(q[0])
        ax, ay = s1n, -c1

        def about(axis_x, axis_y, axis_z, v):
            # axis . (v x g)
            return (axis_x * (v[1] * gz - v[2] * gy) + axis_y * (v[2] * gx - v[0] * gz)
                    + axis_z * (v[0] * gy - v[1] * gx))

        out = np.zeros(N_JOINTS)
        out[0] = about(0.0, 0.0, 1.0, s1)
        out[1] = about(ax, ay, 0.0, s2)
        out[2] = about(ax, ay, 0.0, s3)
        out[3] = m4 * (d3[0] * gx + d3[1] * gy + d3[2] * gz)
        return out

    def gravity_moment(self, q, pend=(0.0, 0.0), gravity=(0.0, 0.0, -GRAVITY),
                       payload_mass: float = 0.0, payload_offset=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Moment of crane weight about the pillar foot (crane frame)."""
        gvec = np.asarray(gravity, dtype=float)
        pts, *_ = self._mass_points(q, pend, payload_mass, payload_offset)
        return sum(np.cross(p, m * gvec) for m, p, _, _ in pts)

    # -- dynamics ----------------------------------------------------------

    def clamp_target_rate(self, prev_target, commanded, steps: int = 1) -> np.ndarray:
        return clamp_target_rate(prev_target, commanded, self.v_max, self.rate_fraction, steps)

    def step(self, state: CraneState, v_target, dt: float = 0.02,
             gravity=(0.0, 0.0, -GRAVITY), payload_mass: float = 0.0,
             payload_offset=(0.0, 0.0, 0.0)) -> CraneState:
        """Advance the crane by one simulation step.

        Each servo asks for the effort that would reach ``v_target`` in one
        step on top of gravity compensation; the motor delivers at most
        ``effort_max``. Range stops are inelastic.
        """
        v_target = np.asarray(v_target, dtype=float)
        if not (np.all(np.isfinite(v_target)) and np.all(np.isfinite(state.q))
                and np.all(np.isfinite(state.qdot)) and np.all(np.isfinite(state.pend))):
            raise SimulationFault("non-finite input to crane step")
        hold = -self.gravity_forces(state.q, state.pend, gravity, payload_mass, payload_offset)
        required = self.inertia * (v_target - state.qdot) / dt + hold
        tau = np.clip(required, -self.effort_max, self.effort_max)
        qdot = state.qdot + dt * (tau - hold) / self.inertia
        np.clip(qdot, -self.v_max, self.v_max, out=qdot)
        q = state.q + dt * qdot
        low = q < self.range_min
        high = q > self.range_max
        if low.any() or high.any():
            q = np.clip(q, self.range_min, self.range_max)
            qdot[low | high] = 0.0

        tip_old = self.tip_position(state.q)
        tip_new = self.tip_position(q)
        tip_vel = (tip_new - tip_old) / dt
        tip_acc = (tip_vel - state.tip_vel) / dt

        gx, gy, gz = gravity
        L = self.geometry.pendulum_length
        c = self.pendulum_damping
        a, b = state.pend
        ra, rb = state.pend_rate
        acc_a = (gx * math.cos(a) + gz * math.sin(a) - tip_acc[0] * math.cos(a)) / L - c * ra
        acc_b = (gy * math.cos(b) + gz * math.sin(b) - tip_acc[1] * math.cos(b)) / L - c * rb
        ra += dt * acc_a
        rb += dt * acc_b
        pend = np.array([a + dt * ra, b + dt * rb])
        new = CraneState(q, qdot, v_target.copy(), tau, pend, np.array([ra, rb]),
                         tip_vel, state.time + dt)
        if not (np.all(np.isfinite(new.q)) and np.all(np.isfinite(new.pend))):
            raise SimulationFault("crane state became non-finite")
        return new


def clamp_target_rate(prev_target, commanded, v_max, rate_fraction=1.0 / 30.0,
                      steps: int = 1) -> np.ndarray:
    """Move servo targets towards ``commanded`` by at most rate_fraction*v_max per step."""
    prev = np.asarray(prev_target, dtype=float)
    limit = np.asarray(rate_fraction, dtype=float) * np.asarray(v_max, dtype=float) * steps
    return prev + np.clip(np.asarray(commanded, dtype=float) - prev, -limit, limit)


def work_increment(tau, qdot, dt: float, joints: Sequence[int] = ENERGY_JOINTS) -> float:
    """Positive mechanical work done by the selected joints over ``dt``.

    Braking (effort opposing motion) is not recuperated and counts as zero.
    """
    idx = list(joints)
    power = np.asarray(tau, dtype=float)[idx] * np.asarray(qdot, dtype=float)[idx]
    return float(np.sum(np.maximum(power, 0.0)) * dt)
