"""Collect/update training loop with curriculum, logging and checkpoint state."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, dump_config, parse_config
from .curriculum import ProgressTracker, build_schedule
from .env import FRAME_SIZE, CraneEnv, RunningStats, VecEnv
from .learner import Adam, GaussianPolicy, collect_rollouts, lr_at, ppo_update

LOG_FIELDS = ("step", "update", "lesson", "plane_height", "episodes", "mean_return",
              "success_rate_20", "policy_loss", "value_loss", "entropy", "clip_fraction",
              "approx_kl", "lr", "aborted")
EPISODE_FIELDS = ("step", "env_index", "lesson", "plane_height", "ret", "length", "success",
                  "energy", "cause")


@dataclass
class EpisodeRow:
    step: int
    env_index: int
    lesson: int
    plane_height: float
    ret: float
    length: int
    success: bool
    energy: float
    cause: str


def build_policy(cfg: RunConfig, rng: np.random.Generator) -> GaussianPolicy:
    p = cfg.ppo
    return GaussianPolicy(cfg.env.obs_size, 6, p.hidden_sizes, p.init_log_std, rng,
                          (p.log_std_min, p.log_std_max))


class Trainer:
    """Owns the policy, optimizer, environments and curriculum state of one run.

    Randomness is split from one seed into independent streams: policy
    initialisation, action sampling, minibatch shuffling and one stream per
    environment.
    """

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        init_ss, sample_ss, shuffle_ss, env_ss = root.spawn(4)
        self.crane = cfg.crane()
        self.lessons = build_schedule(cfg.curriculum, self.crane)
        self.tracker = ProgressTracker(len(self.lessons), cfg.curriculum.window,
                                       cfg.curriculum.advancement_threshold)
        self.stats = RunningStats(FRAME_SIZE)
        self.policy = build_policy(cfg, np.random.default_rng(init_ss))
        p = cfg.ppo
        self.optimizer = Adam(self.policy.params, p.adam_beta1, p.adam_beta2, p.adam_eps)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        envs = [CraneEnv(cfg.env, self.crane, s, self.stats, update_stats=True)
                for s in env_ss.spawn(p.n_envs)]
        self.vec = VecEnv(envs, self.lessons, self.tracker, mode="train")
        self.sim_steps = 0
        self.updates = 0
        self.recent = deque(maxlen=20)
        self.log: list[dict] = []
        self.episodes: list[EpisodeRow] = []
        self._started = False

    @property
    def steps_per_update(self) -> int:
        p = self.cfg.ppo
        return p.n_envs * p.horizon * self.cfg.env.sim_steps_per_decision

    def train(self, total_steps: int, lr_budget: int | None = None, callback=None) -> None:
        """Run updates until at least ``total_steps`` simulation steps have been taken."""
        budget = self.cfg.budget if lr_budget is None else lr_budget
        p = self.cfg.ppo
        if not self._started and self.sim_steps < total_steps:
            self.vec.reset()
            self._started = True
        while self.sim_steps < total_steps:
            lr = lr_at(self.sim_steps, p.learning_rate, budget)
            batch = collect_rollouts(self.policy, self.vec, p.horizon, self.sample_rng,
                                     p.gamma, p.gae_lambda)
            self.sim_steps += self.steps_per_update
            finished = self.vec.pop_finished()
            for e in finished:
                self.recent.append(e.success)
                self.episodes.append(EpisodeRow(self.sim_steps, e.env_index, e.lesson,
                                                e.plane_height, e.ret, e.length, e.success,
                                                e.energy, e.cause))
            stats = ppo_update(self.policy, self.optimizer, batch, p, lr, self.shuffle_rng)
            self.updates += 1
            lesson = self.vec.current_lesson()
            row = {
                "step": self.sim_steps, "update": self.updates, "lesson": lesson.index,
                "plane_height": lesson.plane_height, "episodes": len(finished),
                "mean_return": (float(np.mean([e.ret for e in finished])) if finished else math.nan),
                "success_rate_20": (sum(self.recent) / len(self.recent)) if self.recent else math.nan,
                "policy_loss": stats.get("policy_loss", math.nan),
                "value_loss": stats.get("value_loss", math.nan),
                "entropy": stats.get("entropy", math.nan),
                "clip_fraction": stats.get("clip_fraction", math.nan),
                "approx_kl": stats.get("approx_kl", math.nan),
                "lr": lr, "aborted": int(stats["aborted"]),
            }
            self.log.append(row)
            if callback is not None:
                callback(self, row)

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        arrays = {f"policy/{k}": v for k, v in self.policy.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        arrays["stats/mean"] = self.stats.mean
        arrays["stats/var"] = self.stats.var
        meta = {
            "sim_steps": self.sim_steps,
            "updates": self.updates,
            "adam_t": self.optimizer.t,
            "stats_count": self.stats.count,
            "tracker": self.tracker.state_dict(),
            "recent": [int(s) for s in self.recent],
            "rng": {
                "sample": self.sample_rng.bit_generator.state,
                "shuffle": self.shuffle_rng.bit_generator.state,
                "envs": [[e.rng.bit_generator.state, e.perturb_rng.bit_generator.state]
                         for e in self.vec.envs],
            },
            "policy_shape": {"obs_size": self.policy.obs_size, "act_size": self.policy.act_size,
                             "hidden": list(self.policy.hidden)},
        }
        return ckpt_io.Checkpoint(dump_config(self.cfg), arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: ckpt_io.Checkpoint, cfg: RunConfig | None = None) -> "Trainer":
        """Restore a run. Environments restart their episodes on the next update."""
        saved_cfg = parse_config(ckpt.config_text)
        cfg = cfg or saved_cfg
        if dump_config(cfg) != dump_config(saved_cfg):
            raise ckpt_io.CheckpointError("configuration differs from the one in the checkpoint")
        tr = cls(cfg)
        load_policy_arrays(tr.policy, ckpt)
        for k in tr.optimizer.m:
            tr.optimizer.m[k] = ckpt.arrays[f"adam_m/{k}"].copy()
            tr.optimizer.v[k] = ckpt.arrays[f"adam_v/{k}"].copy()
        m = ckpt.meta
        tr.optimizer.t = int(m["adam_t"])
        tr.stats.load_state_dict({"count": m["stats_count"], "mean": ckpt.arrays["stats/mean"],
                                  "var": ckpt.arrays["stats/var"]})
        tr.tracker.load_state_dict(m["tracker"])
        tr.recent = deque((bool(s) for s in m["recent"]), maxlen=20)
        tr.sim_steps = int(m["sim_steps"])
        tr.updates = int(m["updates"])
        tr.sample_rng.bit_generator.state = m["rng"]["sample"]
        tr.shuffle_rng.bit_generator.state = m["rng"]["shuffle"]
        for env, (a, b) in zip(tr.vec.envs, m["rng"]["envs"]):
            env.rng.bit_generator.state = a
            env.perturb_rng.bit_generator.state = b
        return tr


def load_policy_arrays(policy: GaussianPolicy, ckpt: ckpt_io.Checkpoint) -> None:
    for k in policy.params:
        key = f"policy/{k}"
        if key not in ckpt.arrays:
            raise ckpt_io.CheckpointError(f"checkpoint lacks parameter {k!r}")
        arr = ckpt.arrays[key]
        if arr.shape != policy.params[k].shape:
            raise ckpt_io.CheckpointError(
                f"parameter {k!r} has shape {arr.shape}, expected {policy.params[k].shape}")
        policy.params[k] = arr.copy()


def policy_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> tuple[RunConfig, GaussianPolicy, RunningStats]:
    """Policy and frozen observation statistics for evaluation."""
    cfg = parse_config(ckpt.config_text)
    policy = build_policy(cfg, np.random.default_rng(0))
    load_policy_arrays(policy, ckpt)
    stats = RunningStats(FRAME_SIZE)
    stats.load_state_dict({"count": ckpt.meta["stats_count"], "mean": ckpt.arrays["stats/mean"],
                           "var": ckpt.arrays["stats/var"]})
    return cfg, policy, stats


def episode_dicts(rows: list[EpisodeRow]) -> list[dict]:
    return [asdict(r) for r in rows]
