"""Proximal policy optimization: actor-critic nets, rollouts, GAE, the clipped
surrogate update, running reward standardization and greedy evaluation."""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .diff import Adam, Mlp, NumericAbort, ParamTensor, clip_grad_norm, log_softmax, softmax_array
from .envs import ActionSpace, VecEnv, sealed_true_reward

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PpoConfig:
    lr: float = 2.5e-4
    clip_eps: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    gamma: float = 0.99
    horizon: int = 128
    num_envs: int = 16
    epochs_per_update: int = 4
    minibatches: int = 4
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


class PolicyNet:
    """Separate actor and critic MLPs.

    Discrete spaces get a categorical over actor logits; continuous spaces a
    diagonal Gaussian with a state-independent learned log-std (starting at 0).
    """

    def __init__(self, state_dim: int, space: ActionSpace, rng: np.random.Generator,
                 hidden: int = 64, layers: int = 2, activation: str = "tanh"):
        self.space = space
        self.state_dim = state_dim
        widths = [state_dim] + [hidden] * layers
        self.actor = Mlp(widths + [space.size], activation, rng, out_scale=0.01)
        self.critic = Mlp(widths + [1], activation, rng)
        self.log_std = None if space.discrete else ParamTensor(np.zeros(space.dim))

    @property
    def discrete(self) -> bool:
        return self.space.discrete

    def parameters(self) -> list[ParamTensor]:
        params = self.actor.parameters() + self.critic.parameters()
        if self.log_std is not None:
            params.append(self.log_std)
        return params

    def named_parameters(self, prefix: str = "policy") -> list[tuple[str, ParamTensor]]:
        named = self.actor.named_parameters(f"{prefix}.actor") + self.critic.named_parameters(f"{prefix}.critic")
        if self.log_std is not None:
            named.append((f"{prefix}.log_std", self.log_std))
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def values(self, states) -> np.ndarray:
        return self.critic.predict(np.atleast_2d(states))[:, 0]

    def sample(self, states, rng: np.random.Generator):
        """Draw actions; returns (actions, log_probs, values)."""
        states = np.atleast_2d(states)
        out = self.actor.predict(states)
        if self.discrete:
            p = softmax_array(out)
            cdf = np.cumsum(p, axis=1)
            cdf[:, -1] = 1.0
            u = rng.random(len(states))
            actions = (cdf > u[:, None]).argmax(axis=1)
            logp = log_softmax(out)[np.arange(len(states)), actions]
        else:
            std = np.exp(self.log_std.values)
            actions = out + std * rng.standard_normal(out.shape)
            logp = gaussian_log_prob(actions, out, self.log_std.values)
        return actions, logp, self.values(states)

    def greedy(self, state):
        """Argmax action (discrete) or Gaussian mean (continuous) for one state."""
        out = self.actor.predict(np.atleast_2d(state))[0]
        if self.discrete:
            return int(np.argmax(out))
        return out.copy()

    def log_probs(self, states, actions) -> np.ndarray:
        out = self.actor.predict(np.atleast_2d(states))
        if self.discrete:
            return log_softmax(out)[np.arange(len(out)), np.asarray(actions, dtype=np.int64)]
        return gaussian_log_prob(np.asarray(actions), out, self.log_std.values)

    def action_probs(self, states) -> np.ndarray:
        return softmax_array(self.actor.predict(np.atleast_2d(states)))


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def env_actions(space: ActionSpace, actions: np.ndarray) -> list:
    """Convert sampled policy actions into what the environments accept."""
    if space.discrete:
        return [int(a) for a in actions]
    return [np.clip(a, space.low, space.high) for a in actions]


# ------------------------------------------------------------- reward sources


class TrueEnvReward:
    name = "true_env_reward"
    uses_env_reward = True

    def rewards(self, states, actions, next_states, results) -> np.ndarray:
        return np.array([r.true_reward for r in results])


class ConstantReward:
    name = "constant"
    uses_env_reward = False

    def __init__(self, value: float):
        self.value = float(value)

    def rewards(self, states, actions, next_states, results) -> np.ndarray:
        return np.full(len(states), self.value)


# --------------------------------------------------------------- standardizer


class RewardStandardizer:
    """Divides rewards by a running std of per-env discounted reward sums.

    Each call: ``R <- gamma * R + r`` per env, every ``R`` is pushed into a
    Welford accumulator, rewards are scaled by ``1 / max(std, 1e-8)`` and ``R``
    is zeroed for envs whose episode just ended.
    """

    def __init__(self, num_envs: int, gamma: float = 0.99, enabled: bool = True):
        self.gamma = gamma
        self.enabled = enabled
        self.ret = np.zeros(num_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    def _push(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def __call__(self, rewards, dones=None) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        if not self.enabled:
            return rewards.copy()
        self.ret = self.gamma * self.ret + rewards
        for r in self.ret:
            self._push(float(r))
        out = rewards / max(np.sqrt(self.var), 1e-8)
        if dones is not None:
            self.ret[np.asarray(dones, dtype=bool)] = 0.0
        return out


def standardize(std: RewardStandardizer, rewards, dones=None) -> np.ndarray:
    return std(rewards, dones)


# ------------------------------------------------------------------- rollouts


@dataclass
class RolloutBatch:
    """Arrays share the leading [num_envs, horizon] shape."""

    states: np.ndarray
    actions: np.ndarray
    env_actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    dones: np.ndarray
    truncation_values: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rewards.size


def collect_rollout(policy: PolicyNet, vec: VecEnv, reward_source, horizon: int,
                    rng: np.random.Generator, standardizer: RewardStandardizer | None = None,
                    running_returns: np.ndarray | None = None, life_loss_done: bool = False) -> RolloutBatch:
    """Step ``vec`` for ``horizon`` steps, scoring transitions with ``reward_source``.

    When the source is not the environment reward, environment rewards are
    sealed for the whole collection. ``running_returns`` (per env, mutated)
    accumulates undiscounted raw rewards to report finished-episode returns.
    With ``life_loss_done`` a lost life ends the return for the learner (no
    bootstrapping across it) although the environment itself carries on.
    """
    n, space = len(vec), vec.spec.action_space
    act_w = 1 if space.discrete else space.dim
    d = vec.spec.state_dim
    states = np.zeros((n, horizon, d))
    actions = np.zeros((n, horizon, act_w))
    applied = np.zeros((n, horizon, act_w))
    logps = np.zeros((n, horizon))
    values = np.zeros((n, horizon))
    rewards = np.zeros((n, horizon))
    raw = np.zeros((n, horizon))
    dones = np.zeros((n, horizon), dtype=bool)
    trunc_v = np.zeros((n, horizon))
    finished = []
    guard = nullcontext() if reward_source.uses_env_reward else sealed_true_reward()
    with guard:
        for t in range(horizon):
            s = vec.states.copy()
            a, lp, v = policy.sample(s, rng)
            acts = env_actions(space, a)
            results = vec.step(acts)
            nxt = np.stack([r.next_state for r in results])
            done = np.array([r.episode_done for r in results])
            learner_done = done | np.array([r.life_lost for r in results]) if life_loss_done else done
            acts_arr = np.asarray(acts, dtype=np.float64).reshape(n, act_w)
            act_in = acts_arr[:, 0].astype(np.int64) if space.discrete else acts_arr
            r = np.asarray(reward_source.rewards(s, act_in, nxt, results), dtype=np.float64)
            if r.shape != (n,):
                raise ValueError(f"reward source returned shape {r.shape}, expected ({n},)")
            truncated = [i for i, res in enumerate(results) if res.episode_done and res.info.get("truncated")
                         and not (life_loss_done and res.life_lost)]
            if truncated:
                trunc_v[truncated, t] = policy.values(nxt[truncated])
            states[:, t] = s
            actions[:, t] = a.reshape(n, act_w)
            applied[:, t] = acts_arr
            logps[:, t] = lp
            values[:, t] = v
            raw[:, t] = r
            rewards[:, t] = standardizer(r, learner_done) if standardizer is not None else r
            dones[:, t] = learner_done
            if running_returns is not None:
                running_returns += r
                for i in np.flatnonzero(done):
                    finished.append(float(running_returns[i]))
                    running_returns[i] = 0.0
    batch = RolloutBatch(
        states=states,
        actions=actions[..., 0].astype(np.int64) if space.discrete else actions,
        env_actions=applied,
        log_probs=logps,
        values=values,
        rewards=rewards,
        raw_rewards=raw,
        dones=dones,
        truncation_values=trunc_v,
        last_values=policy.values(vec.states),
        episode_returns=finished,
    )
    return batch


def gae(values, rewards, dones, gamma: float, lam: float, last_value, truncation_values=None):
    """Generalized advantage estimation along the last axis.

    ``delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t`` and
    ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``; ``V_T`` is
    ``last_value``. ``truncation_values`` adds ``gamma * V(s_final)`` on steps
    where an episode was cut by a time limit rather than terminated.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    next_v = np.asarray(last_value, dtype=np.float64)
    next_a = np.zeros(rewards.shape[:-1])
    for t in range(T - 1, -1, -1):
        delta = rewards[..., t] + gamma * next_v * notdone[..., t] - values[..., t]
        if truncation_values is not None:
            delta = delta + gamma * truncation_values[..., t]
        next_a = delta + gamma * lam * notdone[..., t] * next_a
        adv[..., t] = next_a
        next_v = values[..., t]
    return adv, adv + values


def compute_advantages(batch: RolloutBatch, cfg: PpoConfig) -> RolloutBatch:
    batch.advantages, batch.returns = gae(
        batch.values, batch.rewards, batch.dones, cfg.gamma, cfg.gae_lambda,
        batch.last_values, batch.truncation_values,
    )
    return batch


# --------------------------------------------------------------------- update


def ppo_loss(policy: PolicyNet, states, actions, old_logp, adv, returns, cfg: PpoConfig,
             backward: bool = True) -> dict:
    """Clipped-surrogate loss (to minimize) and, optionally, its gradients.

    loss = -mean(min(rho A, clip(rho) A)) + value_coef * mean((V - R)^2)
           - entropy_coef * mean(H)
    """
    B = len(states)
    out = policy.actor.forward(states) if backward else policy.actor.predict(states)
    v = (policy.critic.forward(states) if backward else policy.critic.predict(states))[:, 0]
    if policy.discrete:
        logp_all = log_softmax(out)
        p = np.exp(logp_all)
        idx = np.asarray(actions, dtype=np.int64)
        logp = logp_all[np.arange(B), idx]
        ent = -np.sum(p * logp_all, axis=1)
    else:
        log_std = policy.log_std.values
        logp = gaussian_log_prob(actions, out, log_std)
        ent = np.full(B, np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1, surr2 = ratio * adv, clipped * adv
    use_unclipped = surr1 <= surr2
    surrogate = np.minimum(surr1, surr2)
    verr = v - returns
    loss = -surrogate.mean() + cfg.value_coef * np.mean(verr**2) - cfg.entropy_coef * ent.mean()
    stats = {
        "loss": float(loss),
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float(np.mean(verr**2)),
        "entropy": float(ent.mean()),
        "approx_kl": float(np.mean(old_logp - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    if not backward:
        return stats
    # d loss / d logp
    g_logp = -np.where(use_unclipped, ratio * adv, 0.0) / B
    if policy.discrete:
        onehot = np.zeros_like(p)
        onehot[np.arange(B), idx] = 1.0
        g_out = g_logp[:, None] * (onehot - p)
        # dH/dlogits_j = -p_j (log p_j + H)
        g_out += (cfg.entropy_coef / B) * p * (logp_all + ent[:, None])
    else:
        inv_var = np.exp(-2.0 * log_std)
        diff = actions - out
        g_out = g_logp[:, None] * diff * inv_var
        g_logstd = np.sum(g_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
        g_logstd -= cfg.entropy_coef
        policy.log_std.grad += g_logstd
    policy.actor.backward(g_out)
    g_v = (2.0 * cfg.value_coef / B) * verr
    policy.critic.backward(g_v[:, None])
    return stats


def ppo_update(policy: PolicyNet, batch: RolloutBatch, cfg: PpoConfig, opt: Adam,
               rng: np.random.Generator) -> dict:
    """Several epochs of minibatch Adam steps on the clipped surrogate."""
    if batch.advantages is None:
        compute_advantages(batch, cfg)
    n = batch.size
    states = batch.states.reshape(n, -1)
    actions = batch.actions.reshape(n) if policy.discrete else batch.actions.reshape(n, -1)
    old_logp = batch.log_probs.reshape(n)
    adv = batch.advantages.reshape(n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    returns = batch.returns.reshape(n)
    mb = max(1, n // cfg.minibatches)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start : start + mb]
            opt.zero_grad()
            stats = ppo_loss(policy, states[idx], actions[idx], old_logp[idx], adv[idx], returns[idx], cfg)
            if not np.isfinite(stats["loss"]):
                raise NumericAbort("non-finite PPO loss", stats)
            clip_grad_norm(opt.params, cfg.max_grad_norm)
            opt.step()
            for k, val in stats.items():
                totals[k] = totals.get(k, 0.0) + val
            count += 1
    return {k: val / count for k, val in totals.items()}


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    per_seed: list
    returns: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))


def run_episode(policy_fn, env, seed: int) -> float:
    s = env.reset(seed)
    total = 0.0
    while True:
        res = env.step(policy_fn(s))
        total += res.true_reward
        if res.episode_done:
            return total
        s = res.next_state


def evaluate(policy, env, episodes: int = 10, seeds=(0,)) -> EvalResult:
    """Greedy rollouts: ``episodes`` per seed, reset seeds drawn from each seed."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    act = policy.greedy if hasattr(policy, "greedy") else policy
    per_seed, all_returns = [], []
    for seed in seeds:
        stream = np.random.default_rng(seed)
        rets = [run_episode(act, env, int(stream.integers(0, 2**31 - 1))) for _ in range(episodes)]
        per_seed.append(float(np.mean(rets)))
        all_returns.extend(rets)
    return EvalResult(per_seed, all_returns)
