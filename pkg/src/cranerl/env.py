"""Grasping MDP: observations, rewards, termination and episode lifecycle.

The agent decides every ``sim_steps_per_decision`` simulation steps (25 Hz
over a 50 Hz simulation by default). Actions in [-1, 1]^6 are scaled to
servo target speeds and pass through the per-step target rate limit.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crane import (ENERGY_JOINTS, GRAVITY, N_JOINTS, CraneModel, CraneState,
                    clamp_target_rate, work_increment)
from .curriculum import LessonSpec
from .world import (BunkBox, CollisionReport, GraspConfig, GraspStatus, LogSpec, LogState,
                    PerturbationConfig, apply_perturbations, check_collisions, check_success,
                    crane_capsules, detect_grasp, sample_log)

FRAME_SIZE = 23

CAUSES = ("running", "success", "effort_at_limit", "bunk_collision", "timeout")


class EpisodeLifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "energy"
    r_base: float = 1.0
    guidance_coef: float = 5e-4
    energy_ref: float = 50e3
    d0: float = 1.0
    d_near: float = 0.5
    kappa: float = 1.0
    max_heading_dev: float = math.radians(30.0)
    # grapple centre height above the log axis that the guidance steers towards
    grasp_clearance: float = 0.175

    def __post_init__(self):
        if self.mode not in ("plain", "energy"):
            raise ValueError(f"reward mode must be 'plain' or 'energy', got {self.mode!r}")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    sim_steps_per_decision: int = 2
    max_sim_steps: int = 2000
    frame_stack: int = 8
    obs_clip: float = 5.0
    eps_std: float = 1e-8
    nominal_q: tuple = (math.pi, 1.35, -1.749, 0.0, 0.0, 1.2)
    init_perturb_fraction: float = 0.02
    reward: RewardConfig = field(default_factory=RewardConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    log: LogSpec = field(default_factory=LogSpec)
    bunk: BunkBox = field(default_factory=BunkBox)

    @property
    def obs_size(self) -> int:
        return self.frame_stack * FRAME_SIZE


@dataclass
class RewardBreakdown:
    guidance: float = 0.0
    success: float = 0.0
    energy_at_grasp: float = 0.0
    cause: str = "running"
    collisions: CollisionReport | None = None


class RunningStats:
    """Per-dimension running mean and (population) variance.

    Batches are folded in with the pairwise update of Chan et al., which is
    also how statistics from separate environments are merged.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.var = np.zeros(dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        n = batch.shape[0]
        if n == 0:
            return
        self._combine(n, batch.mean(axis=0), batch.var(axis=0))

    def merge(self, other: "RunningStats") -> None:
        if other.count:
            self._combine(other.count, other.mean, other.var)

    def _combine(self, n: int, mean: np.ndarray, var: np.ndarray) -> None:
        total = self.count + n
        delta = mean - self.mean
        m2 = self.var * self.count + var * n + delta * delta * (self.count * n / total)
        self.mean = self.mean + delta * (n / total)
        self.var = np.maximum(m2 / total, 0.0)
        self.count = total

    def normalize(self, x: np.ndarray, eps_std: float = 1e-8, clip: float = 5.0) -> np.ndarray:
        std = np.maximum(np.sqrt(self.var), eps_std)
        return np.clip((x - self.mean) / std, -clip, clip)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.copy(), "var": self.var.copy()}

    def load_state_dict(self, state: dict) -> None:
        self.count = int(state["count"])
        self.mean = np.array(state["mean"], dtype=float)
        self.var = np.array(state["var"], dtype=float)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean))
        out.load_state_dict(self.state_dict())
        return out


def normalize_and_stack(history: Sequence[np.ndarray], stats: RunningStats, n_frames: int = 8,
                        eps_std: float = 1e-8, clip: float = 5.0) -> np.ndarray:
    """Normalize raw frames (oldest first in ``history``) and stack newest first."""
    frames = list(history)[-n_frames:]
    frames = frames[::-1]
    while len(frames) < n_frames:
        frames.append(frames[-1])
    return stats.normalize(np.stack(frames), eps_std, clip).ravel()


def success_reward(energy: float, cfg: RewardConfig = RewardConfig()) -> float:
    if energy < 0:
        raise ValueError("energy must be >= 0")
    if cfg.mode == "plain":
        return cfg.r_base
    return cfg.r_base * cfg.energy_ref / (cfg.energy_ref + energy)


def heading_deviation(log_heading: float, grapple_yaw: float) -> float:
    """Angle between the log axis and the claws' closing-plane normal, modulo pi."""
    diff = (log_heading - grapple_yaw - 0.5 * math.pi) % math.pi
    return min(diff, math.pi - diff)


def grasp_point(log_com: np.ndarray, pendulum_length: float, clearance: float) -> np.ndarray:
    """Boom-tip position that hangs the grapple just above the log C.o.M."""
    return log_com + np.array([0.0, 0.0, pendulum_length + clearance])


def guidance_reward(tip: np.ndarray, log: LogState, grapple_yaw: float, q4: float,
                    q4dot: float, q4_range: tuple[float, float], v_max4: float,
                    pendulum_length: float, cfg: RewardConfig = RewardConfig()) -> float:
    target = grasp_point(log.com, pendulum_length, cfg.grasp_clearance)
    d = float(np.linalg.norm(tip - target))
    if q4 <= q4_range[0] + 1e-9 or q4 >= q4_range[1] - 1e-9:
        return 0.0
    if heading_deviation(log.heading, grapple_yaw) > cfg.max_heading_dev:
        return 0.0
    f_speed = 1.0 + cfg.kappa * (1.0 - abs(q4dot) / v_max4) if d < cfg.d_near else 1.0
    return cfg.guidance_coef * math.exp(-d / cfg.d0) * f_speed


def effort_at_limit(state: CraneState, crane: CraneModel, joints: Sequence[int] = (0, 1, 2)) -> bool:
    """Saturated effort pushing a joint into the range stop it rests on."""
    for j in joints:
        tau = state.tau[j]
        if abs(tau) < crane.effort_max[j]:
            continue
        if (state.q[j] <= crane.range_min[j] and tau < 0) or (state.q[j] >= crane.range_max[j] and tau > 0):
            return True
    return False


class CraneEnv:
    """Single grasping environment.

    ``stats`` may be shared between environments; with ``update_stats`` set,
    each new raw frame is folded in before the stack is normalized.
    """

    def __init__(self, config: EnvConfig | None = None, crane: CraneModel | None = None,
                 seed: int | np.random.SeedSequence | None = None,
                 stats: RunningStats | None = None, update_stats: bool = True,
                 perturbation: PerturbationConfig | None = None, record: bool = False):
        self.config = config or EnvConfig()
        self.crane = crane or CraneModel()
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        env_ss, pert_ss = ss.spawn(2)
        self.rng = np.random.default_rng(env_ss)
        # perturbations draw from their own stream so baseline episodes are unchanged
        self.perturb_rng = np.random.default_rng(pert_ss)
        self.stats = stats if stats is not None else RunningStats(FRAME_SIZE)
        self.update_stats = update_stats
        self.perturbation = perturbation or PerturbationConfig()
        self.record = record
        self.done = True
        self.trace: list[dict] = []

    # -- lifecycle ---------------------------------------------------------

    def reset(self, lesson: LessonSpec, mode: str = "train") -> np.ndarray:
        cfg = self.config
        crane = self.crane
        span = crane.range_max - crane.range_min
        jitter = self.rng.uniform(-1.0, 1.0, N_JOINTS) * cfg.init_perturb_fraction * span
        q = np.clip(np.asarray(cfg.nominal_q, dtype=float) + jitter, crane.range_min, crane.range_max)
        self.state = CraneState(q=q)
        self.lesson = lesson
        self.mode = mode
        self.log = sample_log(lesson, self.rng, mode, cfg.log)

        view = apply_perturbations(self.perturbation, crane, self.perturb_rng)
        self.plant = view.crane
        self.base_gravity = view.gravity
        self.obs_offset = view.position_offset
        self.heading_offset = view.heading_offset
        self.compliance = view.compliance
        if self.compliance is not None:
            self.compliance.reset(self.plant.gravity_moment(q, self.state.pend, self.base_gravity))

        self.energy = 0.0
        self.energy_frozen = False
        self.sim_steps = 0
        self.attach_offset = np.zeros(3)
        self.attach_yaw = 0.0
        self.attach_heading = 0.0
        self.status = GraspStatus.NONE
        self.effort_limit_hit = False
        self.episode_return = 0.0
        self.done = False
        self.last_collisions = CollisionReport()

        frame = self._frame()
        if self.update_stats:
            self.stats.update(frame)
        self.history = deque([frame] * cfg.frame_stack, maxlen=cfg.frame_stack)
        self.trace = []
        if self.record:
            self._record()
        return self._stacked()

    def step(self, action) -> tuple[np.ndarray, float, bool, RewardBreakdown]:
        if self.done:
            raise EpisodeLifecycleError("step() called on a finished episode; call reset()")
        cfg = self.config
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        commanded = action * self.crane.v_max
        for _ in range(cfg.sim_steps_per_decision):
            self._sim_step(commanded)

        pose = self.plant.grapple_pose(self.state)
        frames = self.plant.forward_kinematics(self.state.q, check=False)
        caps = crane_capsules(frames, pose, self.state.q[5], cfg.grasp)
        collisions = check_collisions(caps, cfg.bunk, self.lesson.plane_height,
                                      self.lesson.plane_collision_enabled)
        self.last_collisions = collisions

        success = check_success(self.log, cfg.grasp)
        if success:
            cause = "success"
        elif self.effort_limit_hit:
            cause = "effort_at_limit"
        elif collisions.bunk_collision:
            cause = "bunk_collision"
        elif self.sim_steps >= cfg.max_sim_steps:
            cause = "timeout"
        else:
            cause = "running"

        q, qdot = self.state.q, self.state.qdot
        guidance = guidance_reward(frames.tip, self.log, pose.yaw, q[3], qdot[3],
                                   (self.crane.range_min[3], self.crane.range_max[3]),
                                   self.crane.v_max[3], self.crane.geometry.pendulum_length,
                                   cfg.reward)
        bonus = 0.0
        if cause == "success":
            self.energy_frozen = True
            bonus = success_reward(self.energy, cfg.reward)
            reward = guidance + bonus
        elif cause in ("effort_at_limit", "bunk_collision"):
            guidance = 0.0
            reward = 0.0
        else:
            reward = guidance
        self.done = cause != "running"
        self.episode_return += reward

        frame = self._frame()
        if self.update_stats:
            self.stats.update(frame)
        self.history.append(frame)
        if self.record:
            self._record()
        info = RewardBreakdown(guidance, bonus, self.energy, cause, collisions)
        return self._stacked(), reward, self.done, info

    # -- internals ---------------------------------------------------------

    def _gravity(self) -> np.ndarray:
        if self.compliance is None:
            return self.base_gravity
        return self.compliance.gravity(self.base_gravity)

    def _sim_step(self, commanded: np.ndarray) -> None:
        cfg = self.config
        plant = self.plant
        st = self.state
        v_target = clamp_target_rate(st.v_target, commanded, plant.v_max, plant.rate_fraction)
        gravity = self._gravity()
        if self.log.attached:
            pm, po = self.log.mass, self.attach_offset
        else:
            pm, po = 0.0, np.zeros(3)
        st = plant.step(st, v_target, cfg.dt, gravity, pm, po)
        self.state = st
        self.sim_steps += 1
        if not self.energy_frozen:
            self.energy += work_increment(st.tau, st.qdot, cfg.dt, ENERGY_JOINTS)

        pose = plant.grapple_pose(st)
        log = self.log
        if log.attached:
            log.com = pose.center + self.attach_offset
            log.heading = (self.attach_heading + pose.yaw - self.attach_yaw) % math.pi
        status = detect_grasp(pose, st.q[5], log, cfg.grasp)
        attached = log.attached
        if attached:
            attached = st.q[5] <= cfg.grasp.attach_gap(log.radius)
        else:
            attached = status == GraspStatus.ATTACHED
        if attached and not log.attached:
            self.attach_offset = log.com - pose.center
            self.attach_yaw = pose.yaw
            self.attach_heading = log.heading
        elif log.attached and not attached:
            # released logs drop back onto their support
            log.com = log.com.copy()
            log.com[2] = log.support_height
        log.attached = attached
        self.status = status
        if (not self.energy_frozen and status != GraspStatus.NONE and commanded[5] < 0):
            self.energy_frozen = True
        if effort_at_limit(st, plant):
            self.effort_limit_hit = True
        if self.compliance is not None:
            self.compliance.step(plant.gravity_moment(st.q, st.pend, self.base_gravity, pm, po), cfg.dt)

    def _frame(self) -> np.ndarray:
        st = self.state
        psi = self.log.heading + self.heading_offset
        f = np.empty(FRAME_SIZE)
        f[0:3] = self.log.com + self.obs_offset
        f[3] = math.sin(2.0 * psi)
        f[4] = math.cos(2.0 * psi)
        f[5::3] = st.q
        f[6::3] = st.qdot
        f[7::3] = st.tau
        return f

    def _stacked(self) -> np.ndarray:
        cfg = self.config
        return normalize_and_stack(self.history, self.stats, cfg.frame_stack, cfg.eps_std, cfg.obs_clip)

    def _record(self) -> None:
        st = self.state
        self.trace.append({
            "t": self.sim_steps * self.config.dt,
            "tip": self.plant.tip_position(st.q),
            "q": st.q.copy(), "qdot": st.qdot.copy(), "tau": st.tau.copy(),
            "energy": self.energy,
        })

    def tip_position(self) -> np.ndarray:
        return self.plant.tip_position(self.state.q)

    def grapple_pose(self):
        return self.plant.grapple_pose(self.state)


@dataclass
class EpisodeSummary:
    env_index: int
    lesson: int
    plane_height: float
    ret: float
    length: int
    success: bool
    energy: float
    cause: str


class VecEnv:
    """Fixed set of environments advanced in lock-step with automatic reset.

    All environments share one observation-statistics object, updated in
    environment-index order so results do not depend on scheduling. The
    curriculum tracker is fed at every episode end and picks the lesson for
    the next reset.
    """

    def __init__(self, envs: list[CraneEnv], lessons: list[LessonSpec], tracker,
                 mode: str = "train"):
        self.envs = envs
        self.lessons = lessons
        self.tracker = tracker
        self.mode = mode
        self.obs: np.ndarray | None = None
        self.finished: list[EpisodeSummary] = []

    @property
    def n(self) -> int:
        return len(self.envs)

    def current_lesson(self) -> LessonSpec:
        return self.lessons[self.tracker.lesson]

    def reset(self) -> np.ndarray:
        self.obs = np.stack([e.reset(self.current_lesson(), self.mode) for e in self.envs])
        return self.obs

    def step(self, actions: np.ndarray):
        """Returns next observations, rewards, dones, timeouts and terminal observations.

        ``terminal_obs[i]`` holds the last observation of an episode that
        ended at this step (needed to bootstrap through a timeout); rows for
        running environments repeat the next observation.
        """
        n = self.n
        obs = np.empty_like(self.obs)
        terminal = np.empty_like(self.obs)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        timeouts = np.zeros(n, dtype=bool)
        infos = []
        for i, env in enumerate(self.envs):
            o, r, d, info = env.step(actions[i])
            rewards[i] = r
            dones[i] = d
            terminal[i] = o
            infos.append(info)
            if d:
                timeouts[i] = info.cause == "timeout"
                lesson = env.lesson
                self.finished.append(EpisodeSummary(
                    i, lesson.index, lesson.plane_height, env.episode_return,
                    env.sim_steps, info.cause == "success", info.energy_at_grasp, info.cause))
                self.tracker.record(info.cause == "success")
                o = env.reset(self.current_lesson(), self.mode)
            obs[i] = o
        self.obs = obs
        return obs, rewards, dones, timeouts, terminal, infos

    def pop_finished(self) -> list[EpisodeSummary]:
        out, self.finished = self.finished, []
        return out
