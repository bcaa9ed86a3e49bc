"""Comparison baselines: behavioral cloning, GAIL and VAIL.

The discriminator outputs ``D(s, a)``, the probability that a pair came from
the learner's policy rather than the demonstration. Its loss is

    -1/2 [ mean log(1 - D(demo)) + mean log D(policy) ]

which equals ln 2 when both batches look alike to it. VAIL routes the input
through a Gaussian bottleneck and adds ``lagrange_beta * KL(bottleneck || N(0, I))``,
with ``lagrange_beta`` following a projected dual ascent on ``KL - i_c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demo import Demonstration
from .diff import (
    Adam,
    DimensionError,
    Mlp,
    NumericAbort,
    kl_std_normal_from_log_sigma,
    log_softmax,
    softmax_array,
    split_mu_log_sigma,
)
from .envs import ActionSpace
from .girl import Normalizer
from .ppo import PolicyNet, gaussian_log_prob

D_CLAMP = 1e-8
DEFAULT_DUAL_STEP = 1e-5


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-_softplus(-x))


def action_vectors(actions, action_dim: int, discrete: bool) -> np.ndarray:
    if discrete:
        idx = np.asarray(actions, dtype=np.int64).reshape(-1)
        if np.any(idx < 0) or np.any(idx >= action_dim):
            raise DimensionError("discrete action index out of range")
        out = np.zeros((len(idx), action_dim))
        out[np.arange(len(idx)), idx] = 1.0
        return out
    return np.asarray(actions, dtype=np.float64).reshape(-1, action_dim)


class Discriminator:
    """GAIL discriminator, or the VAIL variant when ``bottleneck`` is set."""

    def __init__(self, state_dim: int, action_dim: int, discrete: bool, rng: np.random.Generator,
                 hidden: int = 100, bottleneck: int | None = None, i_c: float = 0.5,
                 dual_step: float = DEFAULT_DUAL_STEP, activation: str = "tanh"):
        if not i_c > 0:
            raise ValueError("i_c must be positive")
        self.state_dim, self.action_dim, self.discrete = state_dim, action_dim, discrete
        in_dim = state_dim + action_dim
        self.vail = bottleneck is not None
        if self.vail:
            self.encoder = Mlp([in_dim, hidden, 2 * bottleneck], activation, rng)
            self.head = Mlp([bottleneck, 1], "identity", rng)
            self.net = None
        else:
            self.net = Mlp([in_dim, hidden, hidden, 1], activation, rng)
        self.bottleneck = bottleneck
        self.i_c = float(i_c)
        self.dual_step = float(dual_step)
        self.lagrange_beta = 0.0
        self.rng = rng

    def nets(self) -> list[Mlp]:
        return [self.encoder, self.head] if self.vail else [self.net]

    def parameters(self):
        return [p for net in self.nets() for p in net.parameters()]

    def named_parameters(self, prefix: str = "disc"):
        if self.vail:
            return self.encoder.named_parameters(f"{prefix}.encoder") + self.head.named_parameters(f"{prefix}.head")
        return self.net.named_parameters(f"{prefix}.net")

    def zero_grad(self) -> None:
        for net in self.nets():
            net.zero_grad()

    def inputs(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if s.shape[1] != self.state_dim:
            raise DimensionError(f"state dim {s.shape[1]} != {self.state_dim}")
        a = action_vectors(actions, self.action_dim, self.discrete)
        if len(a) != len(s):
            raise DimensionError("action and state batches differ in length")
        return np.hstack([s, a])

    def logits(self, states, actions) -> np.ndarray:
        """Deterministic logits; VAIL uses the bottleneck mean."""
        x = self.inputs(states, actions)
        if not self.vail:
            return self.net.predict(x)[:, 0]
        mu, _, _ = split_mu_log_sigma(self.encoder.predict(x))
        return self.head.predict(mu)[:, 0]

    def prob(self, states, actions) -> np.ndarray:
        return _sigmoid(self.logits(states, actions))


@dataclass
class DiscLoss:
    loss: float
    bce: float
    kl: float


def disc_loss(disc: Discriminator, demo_states, demo_actions, pol_states, pol_actions,
              noise=None, backward: bool = True) -> DiscLoss:
    """Binary logistic loss (policy = 1, demo = 0), plus the VAIL KL penalty.

    ``noise`` fixes the bottleneck samples (rows: demo batch then policy batch);
    when omitted it is drawn from ``disc.rng``.
    """
    xd = disc.inputs(demo_states, demo_actions)
    xp = disc.inputs(pol_states, pol_actions)
    nd, npol = len(xd), len(xp)
    if nd == 0 or npol == 0:
        raise ValueError("both batches must be nonempty")
    x = np.vstack([xd, xp])
    run = (lambda net, v: net.forward(v)) if backward else (lambda net, v: net.predict(v))
    kl = 0.0
    if disc.vail:
        mu, log_sigma, live = split_mu_log_sigma(run(disc.encoder, x))
        sigma = np.exp(log_sigma)
        if noise is None:
            noise = disc.rng.standard_normal(mu.shape)
        noise = np.asarray(noise, dtype=np.float64).reshape(mu.shape)
        zb = mu + sigma * noise
        logit = run(disc.head, zb)[:, 0]
        kl = float(np.mean(kl_std_normal_from_log_sigma(mu, log_sigma)))
    else:
        logit = run(disc.net, x)[:, 0]
    ld, lp = logit[:nd], logit[nd:]
    # -log(1 - D) = softplus(l), -log D = softplus(-l)
    bce = 0.5 * (float(np.mean(_softplus(ld))) + float(np.mean(_softplus(-lp))))
    loss = bce + disc.lagrange_beta * kl if disc.vail else bce
    out = DiscLoss(loss, bce, kl)
    if not backward:
        return out
    g_logit = np.concatenate([0.5 * _sigmoid(ld) / nd, -0.5 * _sigmoid(-lp) / npol])[:, None]
    if not disc.vail:
        disc.net.backward(g_logit)
        return out
    g_z = disc.head.backward(g_logit)
    n = len(x)
    g_mu = g_z + disc.lagrange_beta * mu / n
    g_ls = g_z * sigma * noise + disc.lagrange_beta * (sigma * sigma - 1.0) / n
    disc.encoder.backward(np.hstack([g_mu, g_ls * live]))
    return out


def disc_update(disc: Discriminator, opt: Adam, demo_states, demo_actions, pol_states, pol_actions) -> DiscLoss:
    """One Adam step on the discriminator, then the dual step for VAIL."""
    opt.zero_grad()
    out = disc_loss(disc, demo_states, demo_actions, pol_states, pol_actions)
    if not np.isfinite(out.loss):
        raise NumericAbort("non-finite discriminator loss", out)
    opt.step()
    if disc.vail:
        disc.lagrange_beta = max(0.0, disc.lagrange_beta + disc.dual_step * (out.kl - disc.i_c))
    return out


def gail_reward(disc: Discriminator, states, actions, variant: int = 1) -> np.ndarray:
    """``-log D`` (variant 1) or ``-log(1 - D)`` (variant 2), with D clamped."""
    if variant not in (1, 2):
        raise ValueError("variant must be 1 or 2")
    d = np.clip(disc.prob(states, actions), D_CLAMP, 1.0 - D_CLAMP)
    return -np.log(d) if variant == 1 else -np.log1p(-d)


class GailReward:
    """Reward source that also trains the discriminator on every rollout.

    ``update`` receives the rollout's (states, actions) and takes one
    discriminator step against a demo minibatch of the same size.
    """

    uses_env_reward = False

    def __init__(self, disc: Discriminator, demo: Demonstration, normalizer: Normalizer,
                 rng: np.random.Generator, variant: int = 1, lr: float = 1e-3, batch_size: int = 256):
        self.disc = disc
        self.normalizer = normalizer
        self.rng = rng
        self.variant = variant
        self.batch_size = batch_size
        self.opt = Adam(disc.parameters(), lr)
        self.demo_states = normalizer.normalize_states(demo.states)
        self.demo_actions = demo.actions if demo.discrete else normalizer.normalize_actions(demo.actions)
        self.name = "vail" if disc.vail else "gail"
        self.last: DiscLoss | None = None

    def _prep(self, states, actions):
        a = actions if self.disc.discrete else self.normalizer.normalize_actions(actions)
        return self.normalizer.normalize_states(states), a

    def rewards(self, states, actions, next_states=None, results=None) -> np.ndarray:
        s, a = self._prep(states, actions)
        return gail_reward(self.disc, s, a, self.variant)

    def update(self, states, actions) -> DiscLoss:
        s, a = self._prep(states, actions)
        n = min(self.batch_size, len(s))
        pi = self.rng.choice(len(s), n, replace=False)
        di = self.rng.choice(len(self.demo_states), n, replace=len(self.demo_states) < n)
        self.last = disc_update(self.disc, self.opt, self.demo_states[di], self.demo_actions[di], s[pi], a[pi])
        return self.last


# ---------------------------------------------------------- behavioral cloning


class BcPolicy(PolicyNet):
    """A PolicyNet trained by supervised learning on demonstrated actions."""


def bc_loss(policy: PolicyNet, states, actions, backward: bool = True) -> float:
    """Mean negative log-likelihood of ``actions`` under the actor."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B = len(s)
    out = policy.actor.forward(s) if backward else policy.actor.predict(s)
    if policy.discrete:
        a = action_vectors(actions, policy.space.n, True)
        nll = float(np.mean(-np.sum(log_softmax(out) * a, axis=1)))
        if backward:
            policy.actor.backward((softmax_array(out) - a) / B)
        return nll
    a = np.asarray(actions, dtype=np.float64).reshape(B, -1)
    log_std = policy.log_std.values
    nll = float(-np.mean(gaussian_log_prob(a, out, log_std)))
    if backward:
        inv_var = np.exp(-2.0 * log_std)
        diff = a - out
        policy.actor.backward(-diff * inv_var / B)
        policy.log_std.grad += np.mean(1.0 - diff * diff * inv_var, axis=0)
    return nll


def train_bc(demo: Demonstration, space: ActionSpace, epochs: int = 1000, lr: float = 1e-3,
             batch_size: int = 32, rng: np.random.Generator | None = None, hidden: int = 64,
             log_interval: int = 100) -> tuple[BcPolicy, list[dict]]:
    if len(demo) == 0:
        raise ValueError("demonstration is empty")
    if space.discrete != demo.discrete:
        raise ValueError("action space does not match the demonstration")
    rng = rng if rng is not None else np.random.default_rng(0)
    policy = BcPolicy(demo.state_dim, space, rng, hidden=hidden)
    params = policy.actor.parameters() + ([policy.log_std] if policy.log_std is not None else [])
    opt = Adam(params, lr)
    log = []
    for epoch in range(1, epochs + 1):
        idx = rng.choice(len(demo), min(batch_size, len(demo)), replace=False)
        opt.zero_grad()
        nll = bc_loss(policy, demo.states[idx], demo.actions[idx])
        if not np.isfinite(nll):
            raise NumericAbort(f"non-finite BC loss at epoch {epoch}", nll)
        opt.step()
        if epoch % log_interval == 0 or epoch == epochs:
            log.append({"epoch": epoch, "nll": nll})
    return policy, log
