"""PPO with GAE over a Gaussian MLP policy, in plain numpy.

Policy and value function are separate tanh MLPs; gradients are computed by
hand-written backpropagation and applied with Adam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.3
    entropy_coef: float = 0.01
    gae_lambda: float = 0.95
    gamma: float = 0.995
    learning_rate: float = 1e-3
    n_envs: int = 8
    horizon: int = 1024
    minibatch_size: int = 2048
    epochs: int = 3
    value_coef: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 5.0
    init_log_std: float = 0.0
    hidden_sizes: tuple = (256, 256, 256)
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.entropy_coef < 0 or self.learning_rate < 0 or self.value_coef < 0:
            raise ValueError("coefficients must be >= 0")
        if self.n_envs < 1 or self.horizon < 1 or self.minibatch_size < 1 or self.epochs < 1:
            raise ValueError("n_envs, horizon, minibatch_size and epochs must be >= 1")


# -- networks ----------------------------------------------------------------

def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.normal(size=(max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


class MLP:
    """tanh hidden layers followed by a linear output layer.

    Parameters live in ``params`` under ``{prefix}W{i}`` / ``{prefix}b{i}``.
    """

    def __init__(self, sizes: list[int], prefix: str):
        self.sizes = list(sizes)
        self.prefix = prefix
        self.n_layers = len(sizes) - 1

    def names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out += [f"{self.prefix}W{i}", f"{self.prefix}b{i}"]
        return out

    def init(self, params: dict, rng: np.random.Generator, out_gain: float) -> None:
        for i in range(self.n_layers):
            gain = out_gain if i == self.n_layers - 1 else 1.0
            params[f"{self.prefix}W{i}"] = orthogonal(rng, (self.sizes[i], self.sizes[i + 1]), gain)
            params[f"{self.prefix}b{i}"] = np.zeros(self.sizes[i + 1])

    def forward(self, params: dict, x: np.ndarray):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ params[f"{self.prefix}W{i}"] + params[f"{self.prefix}b{i}"]
            h = z if i == self.n_layers - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, params: dict, acts: list, g_out: np.ndarray, grads: dict) -> None:
        g = g_out
        for i in reversed(range(self.n_layers)):
            grads[f"{self.prefix}W{i}"] = acts[i].T @ g
            grads[f"{self.prefix}b{i}"] = g.sum(axis=0)
            if i > 0:
                g = (g @ params[f"{self.prefix}W{i}"].T) * (1.0 - acts[i] ** 2)


class GaussianPolicy:
    """Diagonal Gaussian over actions with tanh-squashed mean and free log-std."""

    def __init__(self, obs_size: int, act_size: int = 6,
                 hidden: tuple = (256, 256, 256), init_log_std: float = 0.0,
                 rng: np.random.Generator | None = None,
                 log_std_bounds: tuple[float, float] = (-5.0, 2.0)):
        self.obs_size = obs_size
        self.act_size = act_size
        self.hidden = tuple(hidden)
        self.log_std_bounds = log_std_bounds
        self.pi_net = MLP([obs_size, *hidden, act_size], "pi_")
        self.v_net = MLP([obs_size, *hidden, 1], "v_")
        self.params: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pi_net.init(self.params, rng, out_gain=0.01)
        self.v_net.init(self.params, rng, out_gain=1.0)
        self.params["log_std"] = np.full(act_size, float(init_log_std))

    def names(self) -> list[str]:
        return self.pi_net.names() + ["log_std"] + self.v_net.names()

    def forward(self, obs: np.ndarray, with_cache: bool = False):
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        x = np.atleast_2d(obs)
        if x.shape[1] != self.obs_size:
            raise ValueError(f"observation size {x.shape[1]} != {self.obs_size}")
        pre, pi_acts = self.pi_net.forward(self.params, x)
        mean = np.tanh(pre)
        value, v_acts = self.v_net.forward(self.params, x)
        value = value[:, 0]
        log_std = self.params["log_std"]
        if single:
            mean, value = mean[0], value[0]
        if with_cache:
            return mean, log_std, value, (pi_acts, v_acts, mean)
        return mean, log_std, value

    def backward(self, cache, g_mean: np.ndarray, g_value: np.ndarray,
                 g_log_std: np.ndarray) -> dict[str, np.ndarray]:
        pi_acts, v_acts, mean = cache
        grads: dict[str, np.ndarray] = {}
        self.pi_net.backward(self.params, pi_acts, g_mean * (1.0 - mean ** 2), grads)
        self.v_net.backward(self.params, v_acts, np.asarray(g_value)[:, None], grads)
        grads["log_std"] = np.asarray(g_log_std, dtype=float)
        return grads

    def value(self, obs: np.ndarray) -> np.ndarray:
        v, _ = self.v_net.forward(self.params, np.atleast_2d(obs))
        return v[:, 0]

    def act_mean(self, obs: np.ndarray) -> np.ndarray:
        pre, _ = self.pi_net.forward(self.params, np.atleast_2d(obs))
        out = np.tanh(pre)
        return out[0] if np.ndim(obs) == 1 else out

    def clamp_log_std(self) -> None:
        np.clip(self.params["log_std"], *self.log_std_bounds, out=self.params["log_std"])


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (LOG_2PI + 1.0))


def sample_action(mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator,
                  z: np.ndarray | None = None):
    """Draw an action; returns (clamped action, raw sample, log-prob of the raw sample)."""
    if z is None:
        z = rng.standard_normal(np.shape(mean))
    raw = mean + np.exp(log_std) * z
    return np.clip(raw, -1.0, 1.0), raw, gaussian_log_prob(raw, mean, log_std)


# -- advantage estimation ------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimates along axis 0.

    ``values[t]`` estimates the state before step t; ``bootstrap`` is the
    value after the last step. A true ``dones[t]`` cuts both the TD target
    and the advantage recursion after step t.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap, dtype=float)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        last = delta + gamma * lam * notdone[t] * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def lr_at(step: int, base_lr: float, max_steps: int) -> float:
    if max_steps <= 0:
        return 0.0
    return max(0.0, base_lr * (1.0 - step / max_steps))


# -- optimisation ------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray  # raw (pre-clamp) samples
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.obs)


def ppo_loss_and_grads(policy: GaussianPolicy, obs, actions, old_log_probs, advantages,
                       returns, cfg: PPOConfig):
    """Clipped-surrogate loss (to minimize) and its exact gradient."""
    B = len(obs)
    mean, log_std, value, cache = policy.forward(obs, with_cache=True)
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_err = value - returns
    value_loss = float(np.mean(value_err ** 2))
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    active = surr1 <= surr2
    g_logp = np.where(active, -surr1, 0.0) / B
    g_mean = g_logp[:, None] * diff * inv_var
    g_log_std = (g_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - cfg.entropy_coef
    g_value = cfg.value_coef * 2.0 * value_err / B
    grads = policy.backward(cache, g_mean, g_value, g_log_std)
    stats = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - old_log_probs))),
    }
    return loss, grads, stats


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(policy: GaussianPolicy, optimizer: Adam, batch: RolloutBatch, cfg: PPOConfig,
               lr: float, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch Adam steps on the clipped objective.

    A non-finite loss aborts the update and restores the parameters.
    """
    backup = {k: v.copy() for k, v in policy.params.items()}
    adam_backup = ({k: v.copy() for k, v in optimizer.m.items()},
                   {k: v.copy() for k, v in optimizer.v.items()}, optimizer.t)
    adv = normalize_advantages(batch.advantages)
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = order[start:start + mb]
            loss, grads, stats = ppo_loss_and_grads(policy, batch.obs[idx], batch.actions[idx],
                                                    batch.log_probs[idx], adv[idx],
                                                    batch.returns[idx], cfg)
            if not math.isfinite(loss):
                policy.params.update(backup)
                optimizer.m, optimizer.v, optimizer.t = adam_backup
                return {"aborted": True, "loss": loss}
            stats["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.step(policy.params, grads, lr)
            policy.clamp_log_std()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    out = {k: v / count for k, v in totals.items()}
    out["aborted"] = False
    return out


# -- rollouts ----------------------------------------------------------------

def collect_rollouts(policy: GaussianPolicy, vec_env, horizon: int, rng: np.random.Generator,
                     gamma: float, lam: float) -> RolloutBatch:
    """Advance every environment ``horizon`` decisions with a frozen policy.

    Arrays come back flattened in env-major order (all steps of env 0 first).
    Timeouts are treated as terminal with the value of the final observation
    folded into the reward, so the return is bootstrapped rather than cut.
    """
    n = vec_env.n
    obs_size = vec_env.obs.shape[1]
    act = policy.act_size
    O = np.empty((horizon, n, obs_size))
    A = np.empty((horizon, n, act))
    LP = np.empty((horizon, n))
    R = np.empty((horizon, n))
    V = np.empty((horizon, n))
    D = np.empty((horizon, n), dtype=bool)
    obs = vec_env.obs
    for t in range(horizon):
        mean, log_std, value = policy.forward(obs)
        clipped, raw, logp = sample_action(mean, log_std, rng)
        O[t] = obs
        A[t] = raw
        LP[t] = logp
        V[t] = value
        try:
            obs, rew, dones, timeouts, terminal, _ = vec_env.step(clipped)
        except Exception as exc:
            raise RuntimeError(f"environment fault during rollout step {t}: {exc}") from exc
        if timeouts.any():
            rew = rew + gamma * np.where(timeouts, policy.value(terminal), 0.0)
        R[t] = rew
        D[t] = dones
    bootstrap = policy.value(obs)
    adv, ret = compute_gae(R, V, D, bootstrap, gamma, lam)

    def env_major(x):
        return np.swapaxes(x, 0, 1).reshape(n * horizon, *x.shape[2:])

    return RolloutBatch(obs=env_major(O), actions=env_major(A), log_probs=env_major(LP),
                        rewards=env_major(R), values=env_major(V), dones=env_major(D),
                        bootstrap=bootstrap, advantages=env_major(adv), returns=env_major(ret))
