from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from girilab.diff import Adam, NumericAbort
from girilab.envs import ActionSpace, GridHazardEnv, MdpSpec, StepResult, VecEnv
from girilab.ppo import (
    ConstantReward,
    PolicyNet,
    PpoConfig,
    RewardStandardizer,
    TrueEnvReward,
    collect_rollout,
    compute_advantages,
    evaluate,
    gae,
    ppo_loss,
    ppo_update,
    standardize,
)


class TwoStateBandit:
    """One-step episodes; the state is one of two one-hot vectors and arm 1 always pays more."""

    env_id = "bandit"

    def __init__(self):
        self.spec = MdpSpec(2, ActionSpace("discrete", n=2), max_episode_steps=1,
                            state_low=(0.0, 0.0), state_high=(1.0, 1.0))
        self.rng = np.random.default_rng(0)

    def reset(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.s = np.eye(2)[int(self.rng.integers(0, 2))]
        return self.s.copy()

    def step(self, action):
        reward = 1.0 if int(action) == 1 else 0.2
        return StepResult(self.s.copy(), reward, True, False, {"truncated": False})


def grid_vec(n=4, seed=0):
    return VecEnv([GridHazardEnv(layout_seed=6, life_steps=8, pellet_oxygen=2) for _ in range(n)], seed)


def double_loop_gae(values, rewards, dones, gamma, lam, last_value):
    T = len(rewards)
    v_next = np.append(values[1:], last_value)
    delta = [rewards[t] + gamma * v_next[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            total += weight * delta[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


# ---------------------------------------------------------------- config / nets


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        PpoConfig(gae_lambda=1.5)
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.0)


def test_policy_head_dims():
    pol = PolicyNet(5, ActionSpace("discrete", n=3), np.random.default_rng(0))
    assert pol.actor.output_dim == 3 and pol.critic.output_dim == 1
    cont = PolicyNet(3, ActionSpace("continuous", dim=2, low=-1, high=1), np.random.default_rng(0))
    assert cont.actor.output_dim == 2 and cont.critic.output_dim == 1
    np.testing.assert_array_equal(cont.log_std.values, [0.0, 0.0])


# ---------------------------------------------------------------- rollouts


def test_true_reward_rollout_reproduces_env_rewards():
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    batch = collect_rollout(pol, grid_vec(seed=3), TrueEnvReward(), 50, np.random.default_rng(1))
    replay = grid_vec(seed=3)
    expected = np.zeros((4, 50))
    for t in range(50):
        results = replay.step([int(a) for a in batch.env_actions[:, t, 0]])
        expected[:, t] = [r.true_reward for r in results]
    np.testing.assert_array_equal(batch.rewards, expected)
    assert expected.sum() > 0


def test_single_step_single_env_batch():
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    batch = collect_rollout(pol, grid_vec(n=1), TrueEnvReward(), 1, np.random.default_rng(0))
    assert batch.size == 1 and batch.states.shape == (1, 1, 78)


def test_constant_reward_source_without_standardizer():
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    batch = collect_rollout(pol, grid_vec(), ConstantReward(0.37), 20, np.random.default_rng(0),
                            RewardStandardizer(4, 0.99, enabled=False))
    assert np.all(batch.rewards == 0.37)


def test_reward_source_shape_mismatch():
    class Bad:
        uses_env_reward = False

        def rewards(self, s, a, s2, results):
            return np.zeros(len(s) + 1)

    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    with pytest.raises(ValueError):
        collect_rollout(pol, grid_vec(), Bad(), 2, np.random.default_rng(0))


def test_life_loss_marks_learner_done():
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))

    def dones(flag):
        batch = collect_rollout(pol, grid_vec(seed=1), ConstantReward(1.0), 60, np.random.default_rng(2),
                                life_loss_done=flag)
        return batch.dones

    plain, episodic = dones(False), dones(True)
    assert np.all(episodic >= plain)  # same actions, so every episode end is still marked
    assert episodic.sum() > plain.sum()


# ---------------------------------------------------------------- GAE


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    v, r = rng.normal(size=10), rng.normal(size=10)
    d = rng.random(10) < 0.2
    adv, ret = gae(v, r, d, 0.9, 0.0, 0.5)
    v_next = np.append(v[1:], 0.5)
    np.testing.assert_array_equal(adv, r + 0.9 * v_next * (1 - d) - v)
    np.testing.assert_array_equal(ret, adv + v)


def test_gae_monte_carlo_limit():
    r = np.random.default_rng(1).normal(size=12)
    adv, _ = gae(np.zeros(12), r, np.zeros(12), 1.0, 1.0, 0.0)
    np.testing.assert_allclose(adv, np.cumsum(r[::-1])[::-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gae_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    v, r = rng.normal(size=20), rng.normal(size=20)
    d = rng.random(20) < 0.15
    adv, _ = gae(v, r, d, 0.99, 0.95, 0.7)
    np.testing.assert_allclose(adv, double_loop_gae(v, r, d, 0.99, 0.95, 0.7), rtol=0, atol=1e-12)


def test_gae_batched_rows_independent():
    rng = np.random.default_rng(3)
    v, r = rng.normal(size=(3, 15)), rng.normal(size=(3, 15))
    d = rng.random((3, 15)) < 0.2
    last = rng.normal(size=3)
    adv, _ = gae(v, r, d, 0.99, 0.95, last)
    for i in range(3):
        np.testing.assert_allclose(adv[i], double_loop_gae(v[i], r[i], d[i], 0.99, 0.95, last[i]),
                                   rtol=0, atol=1e-12)


def test_gae_truncation_bootstrap():
    adv, _ = gae([0.0], [1.0], [True], 0.9, 0.95, 5.0, truncation_values=np.array([2.0]))
    assert adv[0] == pytest.approx(1.0 + 0.9 * 2.0, abs=1e-15)


# ---------------------------------------------------------------- loss / update


def test_fresh_policy_ratio_one_makes_clip_inactive():
    rng = np.random.default_rng(0)
    pol = PolicyNet(4, ActionSpace("discrete", n=3), rng)
    s = rng.normal(size=(8, 4))
    a = rng.integers(0, 3, 8)
    adv = rng.normal(size=8)
    stats = ppo_loss(pol, s, a, pol.log_probs(s, a), adv, np.zeros(8), PpoConfig(), backward=False)
    assert stats["clip_frac"] == 0.0
    assert stats["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-12)


def test_uniform_policy_entropy_is_log_n():
    pol = PolicyNet(4, ActionSpace("discrete", n=5), np.random.default_rng(0))
    pol.actor.layers[-1].weight.values[:] = 0.0
    s = np.random.default_rng(1).normal(size=(6, 4))
    a = np.zeros(6, dtype=int)
    stats = ppo_loss(pol, s, a, pol.log_probs(s, a), np.ones(6), np.zeros(6), PpoConfig(), backward=False)
    assert stats["entropy"] == pytest.approx(np.log(5), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-1.5, 1.5), st.sampled_from([0.1, 0.2, 0.3]))
def test_clipped_surrogate_bounded(adv, shift, eps):
    rng = np.random.default_rng(0)
    pol = PolicyNet(3, ActionSpace("discrete", n=2), rng)
    s = np.array([[0.1, -0.2, 0.3]])
    a = np.array([1])
    logp = pol.log_probs(s, a)
    stats = ppo_loss(pol, s, a, logp - shift, np.array([adv]), np.zeros(1),
                     PpoConfig(clip_eps=eps), backward=False)
    rho = np.exp(shift)
    bound = max(rho * adv, (1 + eps) * adv, (1 - eps) * adv)
    assert -stats["policy_loss"] <= bound + 1e-12


def test_bandit_prefers_better_arm():
    cfg = PpoConfig(lr=3e-3, horizon=8, num_envs=4, entropy_coef=0.0)
    rng = np.random.default_rng(0)
    pol = PolicyNet(2, ActionSpace("discrete", n=2), rng, hidden=16)
    opt = Adam(pol.parameters(), cfg.lr)
    vec = VecEnv([TwoStateBandit() for _ in range(4)], 0)
    for _ in range(200):
        batch = collect_rollout(pol, vec, TrueEnvReward(), cfg.horizon, rng)
        ppo_update(pol, batch, cfg, opt, rng)
    probs = pol.action_probs(np.eye(2))
    assert np.all(probs[:, 1] > 0.95)


def test_nan_loss_aborts():
    rng = np.random.default_rng(0)
    pol = PolicyNet(78, ActionSpace("discrete", n=4), rng)
    batch = collect_rollout(pol, grid_vec(), TrueEnvReward(), 8, rng)
    compute_advantages(batch, PpoConfig())
    batch.advantages[0, 0] = np.nan
    with pytest.raises(NumericAbort):
        ppo_update(pol, batch, PpoConfig(), Adam(pol.parameters(), 1e-3), rng)


def test_true_reward_training_improves_windowed_median():
    cfg = PpoConfig(lr=1e-3, horizon=64, num_envs=8)
    rng = np.random.default_rng(0)
    pol = PolicyNet(78, ActionSpace("discrete", n=4), rng)
    opt = Adam(pol.parameters(), cfg.lr)
    vec = grid_vec(n=8, seed=0)
    running = np.zeros(8)
    windows, current = [], []
    for update in range(60):
        batch = collect_rollout(pol, vec, TrueEnvReward(), cfg.horizon, rng, running_returns=running)
        ppo_update(pol, batch, cfg, opt, rng)
        current.extend(batch.episode_returns)
        if (update + 1) % 10 == 0:
            windows.append(float(np.median(current)) if current else 0.0)
            current = []
    regressions = sum(b < a for a, b in zip(windows, windows[1:]))
    assert regressions <= 1
    assert windows[-1] > windows[0]


# ---------------------------------------------------------------- standardizer


def test_standardizer_disabled_passes_through():
    std = RewardStandardizer(3, enabled=False)
    r = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(standardize(std, r), r)


def test_standardizer_zero_variance_guard():
    std = RewardStandardizer(1, gamma=0.0)
    out = [std([2.0])[0] for _ in range(5)]
    np.testing.assert_array_equal(std.ret, [2.0])
    assert out == [2.0 / 1e-8] * 5


def test_standardizer_matches_closed_form_history():
    c, gamma, T = 0.5, 0.99, 2000
    std = RewardStandardizer(1, gamma)
    outputs = np.array([std([c])[0] for _ in range(T)])
    history = c * (1 - gamma ** np.arange(1, T + 1)) / (1 - gamma)
    assert std.ret[0] == pytest.approx(c / (1 - gamma), rel=1e-6)
    for t in (1, 10, 500, T - 1):
        assert outputs[t] == pytest.approx(c / np.std(history[: t + 1]), rel=1e-9)
    # the late outputs settle: relative change over the last 100 steps is small
    assert abs(outputs[-1] / outputs[-101] - 1) < 0.05


def test_standardizer_deterministic():
    rng = np.random.default_rng(0)
    stream = rng.exponential(size=(300, 4))
    dones = rng.random((300, 4)) < 0.05
    a, b = RewardStandardizer(4), RewardStandardizer(4)
    for r, d in zip(stream, dones):
        np.testing.assert_array_equal(a(r, d), b(r, d))


def test_standardizer_resets_on_done():
    std = RewardStandardizer(2, gamma=0.5)
    std([1.0, 1.0], [True, False])
    np.testing.assert_array_equal(std.ret, [0.0, 1.0])


def test_standardized_returns_have_unit_std_after_ten_thousand_steps():
    rng = np.random.default_rng(7)
    std = RewardStandardizer(1, 0.99)
    history = []
    for _ in range(10_000):
        std(rng.exponential(size=1))
        history.append(std.ret[0])
    scaled = np.asarray(history) / np.sqrt(std.var)
    assert abs(np.std(scaled) - 1.0) < 0.1


# ---------------------------------------------------------------- evaluation


def test_evaluate_deterministic_has_zero_std():
    env = GridHazardEnv(layout_seed=6, life_steps=8, pellet_oxygen=2)
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    res = evaluate(pol, env, episodes=3, seeds=(0,))
    assert res.std == 0.0 and len(res.returns) == 3


def test_evaluate_reproducible_over_five_seeds():
    pol = PolicyNet(78, ActionSpace("discrete", n=4), np.random.default_rng(0))
    a = evaluate(pol, GridHazardEnv(life_steps=8), episodes=2, seeds=range(5))
    b = evaluate(pol, GridHazardEnv(life_steps=8), episodes=2, seeds=range(5))
    assert a.per_seed == b.per_seed and a.returns == b.returns and len(a.per_seed) == 5


def test_evaluate_requires_episodes():
    with pytest.raises(ValueError):
        evaluate(lambda s: 0, GridHazardEnv(), episodes=0)
