"""Evaluation protocols, sensitivity suites and boom-tip trajectory profiling.

A policy here is any callable ``policy(obs, env) -> action``. Trained
networks are wrapped by :func:`mean_action_policy` so that they act at the
Gaussian mean; scripted controllers may read the environment directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .crane import CraneModel
from .curriculum import LessonSpec
from .env import CraneEnv, EnvConfig, RunningStats
from .learner import GaussianPolicy
from .world import GraspStatus, LogSpec, PerturbationConfig

Policy = Callable[[np.ndarray, CraneEnv], np.ndarray]

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class EpisodeRecord:
    index: int
    success: bool
    cycle_time: float  # seconds from reset to the end of the episode
    energy: float  # J, frozen at grasp initiation
    cause: str
    sim_steps: int
    trace: list = field(default_factory=list)


@dataclass
class EvalSummary:
    label: str
    n: int
    success_rate: float
    mean_time: float
    mean_energy: float
    energy_quantiles: tuple
    relative_energy: float = 1.0


def mean_action_policy(policy: GaussianPolicy) -> Policy:
    def act(obs, env):
        return policy.act_mean(obs)
    return act


def zero_policy(obs, env) -> np.ndarray:
    return np.zeros(6)


def episode_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(index,))


def run_episode(policy: Policy, env: CraneEnv, lesson: LessonSpec, mode: str = "eval",
                index: int = 0) -> EpisodeRecord:
    obs = env.reset(lesson, mode)
    while True:
        obs, _, done, info = env.step(policy(obs, env))
        if done:
            break
    dt = env.config.dt
    return EpisodeRecord(index, info.cause == "success", env.sim_steps * dt,
                         info.energy_at_grasp, info.cause, env.sim_steps,
                         env.trace if env.record else [])


def evaluate(policy: Policy, n_episodes: int, lesson: LessonSpec, *,
             config: EnvConfig | None = None, crane: CraneModel | None = None,
             stats: RunningStats | None = None, perturbation: PerturbationConfig | None = None,
             seed: int = 0, mode: str = "eval", record: int | Sequence[int] = 0,
             label: str = "policy") -> tuple[EvalSummary, list[EpisodeRecord]]:
    """Run ``n_episodes`` independent episodes with frozen observation statistics.

    Episode ``k`` draws from its own seed stream, so results do not depend
    on how episodes are batched and the same log placements are used with
    and without perturbations. ``record`` is either a count of leading
    episodes or an explicit list of indices whose traces are kept.
    """
    if n_episodes < 0:
        raise ValueError("n_episodes must be >= 0")
    config = config or EnvConfig()
    crane = crane or CraneModel()
    keep = set(range(record)) if isinstance(record, int) else set(record)
    records = []
    for k in range(n_episodes):
        frozen = stats.copy() if stats is not None else None
        env = CraneEnv(config, crane, episode_seed(seed, k), frozen, update_stats=False,
                       perturbation=perturbation, record=k in keep)
        records.append(run_episode(policy, env, lesson, mode, k))
    return summarize(records, label), records


def summarize(records: Sequence[EpisodeRecord], label: str = "policy") -> EvalSummary:
    n = len(records)
    wins = [r for r in records if r.success]
    rate = len(wins) / n if n else 0.0
    if wins:
        energies = np.array([r.energy for r in wins])
        mean_time = float(np.mean([r.cycle_time for r in wins]))
        mean_energy = float(np.mean(energies))
        quant = tuple(float(x) for x in np.quantile(energies, QUANTILES))
    else:
        mean_time = mean_energy = math.nan
        quant = tuple(math.nan for _ in QUANTILES)
    return EvalSummary(label, n, rate, mean_time, mean_energy, quant)


def relative_energy(summary: EvalSummary, reference: EvalSummary) -> float:
    return summary.mean_energy / reference.mean_energy


# -- sensitivity ---------------------------------------------------------------

def default_suite(log_radius: float = LogSpec().radius) -> list[tuple[str, PerturbationConfig]]:
    """The six robustness rows: observation noise, heading noise, mass, slope, compliance."""
    return [
        ("position_noise_1r", PerturbationConfig(position_noise_radius=1.0 * log_radius)),
        ("position_noise_2r", PerturbationConfig(position_noise_radius=2.0 * log_radius)),
        ("heading_noise_10deg", PerturbationConfig(heading_noise=math.radians(10.0))),
        ("mass_x1.05", PerturbationConfig(mass_scale=1.05)),
        ("slope_17.6pct", PerturbationConfig(slope_grade=0.176)),
        ("base_compliance", PerturbationConfig(base_compliance_enabled=True)),
    ]


@dataclass
class SensitivityRow:
    perturbation: str
    baseline: float
    perturbed: float
    retention: float


def sensitivity_suite(policy: Policy, n_episodes: int, lesson: LessonSpec,
                      suite: Sequence[tuple[str, PerturbationConfig]], *,
                      config: EnvConfig | None = None, crane: CraneModel | None = None,
                      stats: RunningStats | None = None, seed: int = 0,
                      baseline: EvalSummary | None = None) -> list[SensitivityRow]:
    """Success-rate retention under each perturbation, against a same-seed baseline."""
    kw = dict(config=config, crane=crane, stats=stats, seed=seed)
    if baseline is None and suite:
        baseline, _ = evaluate(policy, n_episodes, lesson, **kw)
    rows = []
    for name, pert in suite:
        if pert.is_identity:
            perturbed = baseline
        else:
            perturbed, _ = evaluate(policy, n_episodes, lesson, perturbation=pert, **kw)
        base = baseline.success_rate
        retention = perturbed.success_rate / base if base > 0 else math.nan
        rows.append(SensitivityRow(name, base, perturbed.success_rate, retention))
    return rows


# -- trajectory profiles --------------------------------------------------------

@dataclass
class TrajectoryProfile:
    t: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    jerk_rms: float


def profile_trajectory(t: Sequence[float], positions: np.ndarray) -> TrajectoryProfile:
    """Boom-tip speed, acceleration magnitude and RMS jerk from sampled positions.

    Speed is the backward difference |p_k - p_(k-1)| / dt (zero at the first
    sample); acceleration is the central second difference, copied to the
    end samples; jerk is the difference of the acceleration vectors.
    """
    t = np.asarray(t, dtype=float)
    p = np.asarray(positions, dtype=float)
    if len(t) < 3 or len(p) != len(t):
        raise ValueError("need at least 3 samples of matching length")
    dt = float(t[1] - t[0])
    if dt <= 0 or not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-12):
        raise ValueError("samples must be uniformly spaced in time")
    speed = np.zeros(len(t))
    speed[1:] = np.linalg.norm(np.diff(p, axis=0), axis=1) / dt
    a_vec = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt ** 2
    accel = np.empty(len(t))
    accel[1:-1] = np.linalg.norm(a_vec, axis=1)
    accel[0], accel[-1] = accel[1], accel[-2]
    if len(a_vec) >= 2:
        jerk = np.diff(a_vec, axis=0) / dt
        jerk_rms = float(np.sqrt(np.mean(np.sum(jerk ** 2, axis=1))))
    else:
        jerk_rms = 0.0
    return TrajectoryProfile(t, speed, accel, jerk_rms)


def record_profile(record: EpisodeRecord) -> TrajectoryProfile:
    t = [e["t"] for e in record.trace]
    p = np.array([e["tip"] for e in record.trace])
    return profile_trajectory(t, p)


# -- scripted controller --------------------------------------------------------

class ScriptedGrasp:
    """Hand-written resolved-rate controller that grasps and lifts the log.

    Moves the boom tip (q1..q3) with damped least squares towards a hover
    point above the log, turns the rotator to put the log across the claws,
    descends, closes and lifts. It reads the true simulator state and the
    observed log pose.
    """

    def __init__(self, gain: float = 1.5, max_tip_speed: float = 0.6, hover: float = 0.4,
                 lift: float = 0.6, clearance: float | None = None, damping: float = 1e-3):
        self.gain = gain
        self.max_tip_speed = max_tip_speed
        self.hover = hover
        self.lift = lift
        self.clearance = clearance
        self.damping = damping

    @staticmethod
    def jacobian(crane: CraneModel, q: np.ndarray) -> np.ndarray:
        """d(tip)/d(q1, q2, q3)."""
        g = crane.geometry
        c1, s1 = math.cos(q[0]), math.sin(q[0])
        e2, e3 = q[1], q[1] + q[2]
        ext = g.L3 + q[3]
        r = g.L2 * math.cos(e2) + ext * math.cos(e3)
        dr2 = -g.L2 * math.sin(e2) - ext * math.sin(e3)
        dz2 = g.L2 * math.cos(e2) + ext * math.cos(e3)
        dr3 = -ext * math.sin(e3)
        dz3 = ext * math.cos(e3)
        return np.array([[-r * s1, dr2 * c1, dr3 * c1],
                         [r * c1, dr2 * s1, dr3 * s1],
                         [0.0, dz2, dz3]])

    def __call__(self, obs, env: CraneEnv) -> np.ndarray:
        crane = env.plant
        st = env.state
        q = st.q
        log = env.log
        clearance = (self.clearance if self.clearance is not None
                     else env.config.reward.grasp_clearance)
        com = log.com + env.obs_offset
        heading = log.heading + env.heading_offset
        pose = crane.grapple_pose(st)
        tip = crane.tip_position(q)
        lg = crane.geometry.pendulum_length
        grasp_tip = com + np.array([0.0, 0.0, lg + clearance])

        action = np.zeros(6)
        # rotator: put the log axis along the closing-plane normal
        yaw_err = (heading - 0.5 * math.pi - pose.yaw + 0.5 * math.pi) % math.pi - 0.5 * math.pi
        action[4] = np.clip(3.0 * yaw_err / crane.v_max[4], -1.0, 1.0)

        if log.attached:
            target = grasp_tip + np.array([0.0, 0.0, self.lift])
            action[5] = -1.0
        else:
            horiz = np.linalg.norm((pose.center - com)[:2])
            if horiz > 0.06 or abs(yaw_err) > math.radians(10.0):
                target = grasp_tip + np.array([0.0, 0.0, self.hover])
                action[5] = 1.0 if q[5] < 0.5 else 0.0
            else:
                target = grasp_tip
                action[5] = -1.0 if env.status != GraspStatus.NONE else 0.0

        err = target - tip
        v = self.gain * err
        speed = np.linalg.norm(v)
        if speed > self.max_tip_speed:
            v *= self.max_tip_speed / speed
        J = self.jacobian(crane, q)
        dq = np.linalg.solve(J.T @ J + self.damping * np.eye(3), J.T @ v)
        action[:3] = np.clip(dq / crane.v_max[:3], -1.0, 1.0)
        return action
