import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cranerl.learner import (Adam, GaussianPolicy, PPOConfig, RolloutBatch, clip_grad_norm,
                             collect_rollouts, compute_gae, gaussian_entropy, gaussian_log_prob,
                             lr_at, orthogonal, ppo_loss_and_grads, ppo_update, sample_action)


# -- advantage estimation ---------------------------------------------------------------

def brute_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Double sum over TD residuals, cut after any terminal step."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    delta = [rewards[t] + gamma * v_next[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for l in range(t, T):
            total += weight * delta[l]
            if dones[l]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 200), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_brute_force_double_sum(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=T)
    v = rng.normal(size=T)
    d = rng.random(T) < 0.1
    boot = float(rng.normal())
    adv, ret = compute_gae(r, v, d, boot, gamma, lam)
    ref = brute_gae(r, v, d, boot, gamma, lam)
    assert np.max(np.abs(adv - ref)) <= 1e-10
    np.testing.assert_allclose(ret, adv + v, atol=1e-12)


def test_gae_vectorised_over_environments():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    d = rng.random((50, 3)) < 0.1
    boot = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, boot, 0.99, 0.95)
    for j in range(3):
        np.testing.assert_allclose(adv[:, j], brute_gae(r[:, j], v[:, j], d[:, j], boot[j], 0.99, 0.95),
                                   atol=1e-10)


def test_gae_lambda_one_is_discounted_return_minus_value():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.1, -0.2])
    adv, ret = compute_gae(r, v, np.zeros(3, bool), 4.0, 0.9, 1.0)
    expected = [1 + 0.9 * 2 + 0.81 * 3 + 0.729 * 4, 2 + 0.9 * 3 + 0.81 * 4, 3 + 0.9 * 4]
    np.testing.assert_allclose(ret, expected, atol=1e-12)


# -- gaussian head -------------------------------------------------------------------------

def test_entropy_formula_exact():
    log_std = np.array([0.1, -0.3, 0.0, 0.5, -1.0, 0.2])
    expected = np.sum(log_std) + 3 * math.log(2 * math.pi * math.e)
    assert gaussian_entropy(log_std) == pytest.approx(expected, abs=1e-14)


def test_log_prob_matches_product_of_univariate_densities():
    rng = np.random.default_rng(0)
    mean = rng.normal(size=6)
    log_std = rng.normal(scale=0.3, size=6)
    x = rng.normal(size=6)
    sd = np.exp(log_std)
    dens = np.prod(np.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi)))
    assert gaussian_log_prob(x, mean, log_std) == pytest.approx(math.log(dens), rel=1e-12)


def test_sampling_moments_monte_carlo():
    rng = np.random.default_rng(3)
    mean = np.array([0.2, -0.4, 0.0, 0.1, 0.3, -0.1])
    log_std = np.log(np.array([0.5, 0.1, 0.3, 0.2, 0.4, 0.25]))
    raws = np.array([sample_action(mean, log_std, rng)[1] for _ in range(40000)])
    np.testing.assert_allclose(raws.mean(axis=0), mean, atol=4 * 0.5 / math.sqrt(40000) + 1e-3)
    np.testing.assert_allclose(raws.std(axis=0), np.exp(log_std), rtol=0.02)


def test_sampled_actions_are_clamped_but_log_prob_uses_raw_sample():
    rng = np.random.default_rng(0)
    mean = np.full(6, 0.9)
    log_std = np.zeros(6)
    clipped, raw, logp = sample_action(mean, log_std, rng)
    assert np.all(np.abs(clipped) <= 1.0)
    assert logp == pytest.approx(gaussian_log_prob(raw, mean, log_std))


def test_orthogonal_init_columns():
    W = orthogonal(np.random.default_rng(0), (16, 8), 2.0)
    np.testing.assert_allclose(W.T @ W, 4.0 * np.eye(8), atol=1e-12)


# -- gradients -------------------------------------------------------------------------------

def toy_problem(seed=0):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(4, 2, hidden=(8,), init_log_std=-0.2, rng=rng)
    # larger output weights so the tanh head is not in its linear regime
    pol.params["pi_W1"] *= 50.0
    pol.params["log_std"] = rng.normal(scale=0.2, size=2)
    B = 32
    obs = rng.normal(size=(B, 4))
    mean, log_std, _ = pol.forward(obs)
    acts = mean + np.exp(log_std) * rng.normal(size=(B, 2))
    old = gaussian_log_prob(acts, mean, log_std) + rng.normal(scale=0.3, size=B)
    adv = rng.normal(size=B)
    ret = rng.normal(size=B)
    return pol, obs, acts, old, adv, ret


def test_backprop_matches_finite_differences_on_toy_network():
    cfg = PPOConfig(clip_eps=0.2, entropy_coef=0.01, value_coef=0.5)
    pol, obs, acts, old, adv, ret = toy_problem()
    _, grads, _ = ppo_loss_and_grads(pol, obs, acts, old, adv, ret, cfg)
    h = 1e-6
    worst = 0.0
    for name, p in pol.params.items():
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + h
            lp = ppo_loss_and_grads(pol, obs, acts, old, adv, ret, cfg)[0]
            p[i] = keep - h
            lm = ppo_loss_and_grads(pol, obs, acts, old, adv, ret, cfg)[0]
            p[i] = keep
            fd = (lp - lm) / (2 * h)
            g = grads[name][i]
            worst = max(worst, abs(g - fd) / max(abs(fd), 1e-3))
    assert worst <= 1e-4


def test_zero_advantages_without_entropy_leave_policy_mean_unchanged():
    cfg = PPOConfig(entropy_coef=0.0, minibatch_size=16, epochs=3)
    pol, obs, acts, old, _, ret = toy_problem(1)
    before = {k: v.copy() for k, v in pol.params.items()}
    mean0 = pol.act_mean(obs)
    batch = RolloutBatch(obs, acts, old, np.zeros(32), np.zeros(32), np.zeros(32, bool), np.zeros(1),
                         advantages=np.zeros(32), returns=ret)
    stats = ppo_update(pol, Adam(pol.params), batch, cfg, 1e-2, np.random.default_rng(0))
    assert not stats["aborted"]
    np.testing.assert_array_equal(pol.act_mean(obs), mean0)
    np.testing.assert_array_equal(pol.params["log_std"], before["log_std"])
    assert any(not np.array_equal(pol.params[k], before[k]) for k in pol.params if k.startswith("v_"))


def test_non_finite_loss_aborts_update_and_restores_parameters():
    cfg = PPOConfig(minibatch_size=16)
    pol, obs, acts, old, adv, ret = toy_problem(2)
    ret = ret.copy()
    ret[3] = np.nan
    before = {k: v.copy() for k, v in pol.params.items()}
    opt = Adam(pol.params)
    batch = RolloutBatch(obs, acts, old, np.zeros(32), np.zeros(32), np.zeros(32, bool), np.zeros(1),
                         advantages=adv, returns=ret)
    stats = ppo_update(pol, opt, batch, cfg, 1e-3, np.random.default_rng(0))
    assert stats["aborted"]
    for k in before:
        np.testing.assert_array_equal(pol.params[k], before[k])
    assert opt.t == 0


def test_log_std_stays_within_bounds():
    cfg = PPOConfig(entropy_coef=10.0, minibatch_size=32)
    pol, obs, acts, old, adv, ret = toy_problem(3)
    opt = Adam(pol.params)
    batch = RolloutBatch(obs, acts, old, np.zeros(32), np.zeros(32), np.zeros(32, bool), np.zeros(1),
                         advantages=adv, returns=ret)
    for _ in range(200):
        ppo_update(pol, opt, batch, cfg, 0.1, np.random.default_rng(0))
    assert np.all(pol.params["log_std"] <= 2.0)


# -- optimisation utilities ---------------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(params)
    opt.step(params, {"w": np.array([0.3, -5.0])}, 0.1)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)


def test_clip_grad_norm_rescales_to_max():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) == pytest.approx(1.0)


def test_lr_schedule():
    assert lr_at(0, 1e-3, 100) == 1e-3
    assert lr_at(50, 1e-3, 100) == pytest.approx(5e-4)
    assert lr_at(100, 1e-3, 100) == 0.0
    assert lr_at(150, 1e-3, 100) == 0.0


def test_ppo_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PPOConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        PPOConfig(gamma=1.5)


# -- rollouts --------------------------------------------------------------------------------------

class CountingVecEnv:
    """Two environments; env j ends by timeout every 3 + j steps with reward 1."""

    def __init__(self):
        self.n = 2
        self.t = np.zeros(2, int)
        self.obs = np.zeros((2, 4))

    def step(self, actions):
        self.t += 1
        ends = self.t >= np.array([3, 4])
        terminal = self.obs + 1.0
        rewards = np.ones(2)
        self.t[ends] = 0
        self.obs = np.where(ends[:, None], 0.0, self.obs + 1.0)
        return self.obs, rewards, ends, ends.copy(), terminal, [None, None]


def test_collect_rollouts_bootstraps_through_timeouts_and_orders_env_major():
    pol = GaussianPolicy(4, 6, hidden=(8,), rng=np.random.default_rng(0))
    vec = CountingVecEnv()
    batch = collect_rollouts(pol, vec, 6, np.random.default_rng(1), 0.9, 0.95)
    assert len(batch) == 12
    # env 0 occupies the first six rows: observations count up and reset after 3 steps
    np.testing.assert_array_equal(batch.obs[:6, 0], [0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(batch.obs[6:, 0], [0, 1, 2, 3, 0, 1])
    assert batch.dones[2] and batch.dones[5] and batch.dones[9]
    v_term = pol.value(np.full((1, 4), 3.0))[0]
    assert batch.rewards[2] == pytest.approx(1.0 + 0.9 * v_term)
    assert batch.rewards[0] == 1.0


def test_ppo_learns_a_one_step_bandit():
    """Reward peaks at action 0.5 on every dimension; the mean should move there."""
    cfg = PPOConfig(minibatch_size=256, epochs=4, entropy_coef=0.0, learning_rate=3e-3)
    rng = np.random.default_rng(0)
    pol = GaussianPolicy(3, 2, hidden=(16,), init_log_std=-1.0, rng=rng)
    opt = Adam(pol.params)
    obs = np.ones((512, 3))
    for _ in range(40):
        mean, log_std, value = pol.forward(obs)
        act, raw, logp = sample_action(mean, log_std, rng)
        rew = -np.sum((act - 0.5) ** 2, axis=1)
        adv = rew - value
        batch = RolloutBatch(obs, raw, logp, rew, value, np.ones(512, bool), np.zeros(1),
                             advantages=adv, returns=rew)
        ppo_update(pol, opt, batch, cfg, cfg.learning_rate, rng)
    np.testing.assert_allclose(pol.act_mean(obs[:1])[0], [0.5, 0.5], atol=0.1)
