"""Generative intrinsic reward learning.

A conditional VAE over transitions. The encoder maps ``(s_t, s_{t+1})`` to a
Gaussian over an action-sized latent ``z`` (backward action encoding); the
decoder maps ``(action vector, s_t)`` to a prediction of ``s_{t+1}`` (forward
transition). Training maximizes

    -lambda * ||s_hat - s_{t+1}||^2  -  KL(q(z | s_t, s_{t+1}) || prior)
    -  alpha * policy_term

where the policy term is ``-log softmax(z)[a_t]`` for discrete actions and
``||z - a_t||^2`` for continuous ones. After training, the reward of a
transition is ``lambda * ||s_hat - s_{t+1}||^2`` with the decoder fed the
blend ``beta * a_t + (1 - beta) * softmax(z)`` (or ``z`` when continuous) and a
fresh ``z`` drawn from the encoder on every query.

All states entering this module are normalized to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demo import Demonstration, sample_indices
from .diff import (
    Adam,
    DimensionError,
    Mlp,
    NumericAbort,
    kl_diag_gaussians,
    kl_std_normal_from_log_sigma,
    log_softmax,
    softmax_array,
    softmax_backward,
    split_mu_log_sigma,
)

NORMALIZED_TOL = 1e-6


class ContractViolation(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Normalizer:
    """Affine per-dimension map from [low, high] onto [-1, 1].

    Continuous actions get the same treatment from the action bounds.
    """

    def __init__(self, state_low, state_high, action_low=None, action_high=None):
        self.low = np.asarray(state_low, dtype=np.float64)
        self.high = np.asarray(state_high, dtype=np.float64)
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ConfigError("state bounds must be matching vectors")
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise ConfigError("every state dimension needs finite bounds to be normalized")
        if np.any(self.high <= self.low):
            raise ConfigError("state upper bounds must exceed lower bounds")
        self.action_low = None if action_low is None else float(action_low)
        self.action_high = None if action_high is None else float(action_high)

    @classmethod
    def from_spec(cls, spec) -> "Normalizer":
        space = spec.action_space
        if space.discrete:
            return cls(spec.state_low, spec.state_high)
        return cls(spec.state_low, spec.state_high, space.low, space.high)

    def normalize_states(self, x) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.low) / (self.high - self.low) - 1.0

    def denormalize_states(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5 * (self.high - self.low) + self.low

    def normalize_actions(self, a) -> np.ndarray:
        if self.action_low is None:
            return a
        span = self.action_high - self.action_low
        return 2.0 * (np.asarray(a, dtype=np.float64) - self.action_low) / span - 1.0


def normalize_states(x, low, high) -> np.ndarray:
    return Normalizer(low, high).normalize_states(x)


@dataclass
class GirlLossBreakdown:
    """Terms of the maximized objective; ``total = recon - kl - alpha * policy``."""

    recon: float
    kl: float
    policy: float
    total: float


class GirlModule:
    def __init__(self, state_dim: int, action_dim: int, discrete: bool, rng: np.random.Generator,
                 hidden: int = 100, alpha: float | None = None, lam: float = 1.0, beta: float = 1.0,
                 prior: str = "standard_normal", activation: str | None = None):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if prior not in ("standard_normal", "learned"):
            raise ValueError(f"unknown prior {prior!r}")
        if alpha is None:
            alpha = 100.0 if discrete else 1.0
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        act = activation or ("leaky_relu" if discrete else "tanh")
        self.state_dim, self.latent_dim = state_dim, action_dim
        self.discrete = discrete
        self.alpha, self.lam, self.beta = float(alpha), float(lam), float(beta)
        self.prior = prior
        self.encoder = Mlp([2 * state_dim, hidden, hidden, 2 * action_dim], act, rng)
        self.decoder = Mlp([action_dim + state_dim, hidden, hidden, state_dim], [act, act, "tanh"], rng)
        self.prior_net = Mlp([state_dim, hidden, 2 * action_dim], act, rng) if prior == "learned" else None
        self.normalizer: Normalizer | None = None

    @property
    def action_dim(self) -> int:
        return self.latent_dim

    def nets(self) -> list[Mlp]:
        return [self.encoder, self.decoder] + ([self.prior_net] if self.prior_net else [])

    def parameters(self):
        return [p for net in self.nets() for p in net.parameters()]

    def named_parameters(self, prefix: str = "girl"):
        named = self.encoder.named_parameters(f"{prefix}.encoder") + self.decoder.named_parameters(f"{prefix}.decoder")
        if self.prior_net is not None:
            named += self.prior_net.named_parameters(f"{prefix}.prior")
        return named

    def zero_grad(self) -> None:
        for net in self.nets():
            net.zero_grad()

    def action_vectors(self, actions) -> np.ndarray:
        if self.discrete:
            idx = np.asarray(actions, dtype=np.int64).reshape(-1)
            if np.any(idx < 0) or np.any(idx >= self.latent_dim):
                raise DimensionError("discrete action index out of range")
            out = np.zeros((len(idx), self.latent_dim))
            out[np.arange(len(idx)), idx] = 1.0
            return out
        a = np.asarray(actions, dtype=np.float64).reshape(-1, self.latent_dim)
        return a


def _check_normalized(*arrays) -> None:
    for x in arrays:
        if np.any(np.abs(x) > 1.0 + NORMALIZED_TOL):
            raise ContractViolation("states must be normalized to [-1, 1]")


def _check_batch(module: GirlModule, states, next_states) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    if s.shape != s2.shape or s.shape[1] != module.state_dim:
        raise DimensionError(f"state batches {s.shape}/{s2.shape} do not match state_dim {module.state_dim}")
    return s, s2


def girl_objective(module: GirlModule, states, actions, next_states, noise,
                   backward: bool = True) -> GirlLossBreakdown:
    """Evaluate the objective on one batch with the given reparameterization noise.

    With ``backward`` the gradients of ``-total`` (the loss minimized by Adam)
    are accumulated into the module parameters.
    """
    s, s2 = _check_batch(module, states, next_states)
    _check_normalized(s, s2)
    B, k = len(s), module.latent_dim
    noise = np.asarray(noise, dtype=np.float64).reshape(B, k)
    a_vec = module.action_vectors(actions)
    run = (lambda net, x: net.forward(x)) if backward else (lambda net, x: net.predict(x))

    enc = run(module.encoder, np.hstack([s, s2]))
    mu, log_sigma, live = split_mu_log_sigma(enc)
    sigma = np.exp(log_sigma)
    z = mu + sigma * noise
    if module.discrete:
        p = softmax_array(z)
        dec_action = p
    else:
        dec_action = z
    s_hat = run(module.decoder, np.hstack([dec_action, s]))
    err = s_hat - s2
    recon = -module.lam * float(np.mean(np.sum(err * err, axis=1)))

    if module.prior_net is None:
        kl_each = kl_std_normal_from_log_sigma(mu, log_sigma)
    else:
        pri = run(module.prior_net, s)
        mu_p, ls_p, live_p = split_mu_log_sigma(pri)
        kl_each = kl_diag_gaussians(mu, log_sigma, mu_p, ls_p)
    kl = float(np.mean(kl_each))

    if module.discrete:
        logp = log_softmax(z)
        pol = float(np.mean(-np.sum(logp * a_vec, axis=1)))
    else:
        diff = z - a_vec
        pol = float(np.mean(np.sum(diff * diff, axis=1)))
    total = recon - kl - module.alpha * pol
    out = GirlLossBreakdown(recon, kl, pol, total)
    if not backward:
        return out

    g_dec_in = module.decoder.backward((2.0 * module.lam / B) * err)
    g_action = g_dec_in[:, :k]
    if module.discrete:
        g_z = softmax_backward(p, g_action) + (module.alpha / B) * (p - a_vec)
    else:
        g_z = g_action + (2.0 * module.alpha / B) * diff
    g_mu = g_z.copy()
    g_ls = g_z * sigma * noise
    if module.prior_net is None:
        g_mu += mu / B
        g_ls += (sigma * sigma - 1.0) / B
    else:
        var_q, var_p = sigma * sigma, np.exp(2.0 * ls_p)
        dmu = mu - mu_p
        g_mu += dmu / var_p / B
        g_ls += (var_q / var_p - 1.0) / B
        g_mu_p = -dmu / var_p / B
        g_ls_p = (1.0 - (var_q + dmu * dmu) / var_p) / B
        module.prior_net.backward(np.hstack([g_mu_p, g_ls_p * live_p]))
    module.encoder.backward(np.hstack([g_mu, g_ls * live]))
    return out


def train_girl(module: GirlModule, demo: Demonstration, epochs: int = 50000, batch_size: int = 32,
               lr: float = 3e-5, stride: int = 4, rng: np.random.Generator | None = None,
               log_interval: int = 100, normalizer: Normalizer | None = None) -> list[dict]:
    """One minibatch, one objective evaluation and one Adam step per epoch."""
    if demo.discrete != module.discrete:
        raise ValueError("demonstration action kind does not match the module mode")
    rng = rng if rng is not None else np.random.default_rng(0)
    norm = normalizer or module.normalizer
    states = norm.normalize_states(demo.states) if norm else demo.states
    next_states = norm.normalize_states(demo.next_states) if norm else demo.next_states
    actions = demo.actions if module.discrete or norm is None else norm.normalize_actions(demo.actions)
    opt = Adam(module.parameters(), lr)
    log = []
    for epoch in range(1, epochs + 1):
        idx = sample_indices(len(demo), batch_size, stride, rng)
        noise = rng.standard_normal((len(idx), module.latent_dim))
        opt.zero_grad()
        terms = girl_objective(module, states[idx], actions[idx], next_states[idx], noise)
        if not np.isfinite(terms.total):
            raise NumericAbort(f"non-finite objective at epoch {epoch}", terms)
        opt.step()
        if epoch % log_interval == 0 or epoch == epochs:
            log.append({"epoch": epoch, "recon": terms.recon, "kl": terms.kl,
                        "policy": terms.policy, "total": terms.total})
    return log


def infer_reward(module: GirlModule, states, actions, next_states, rng: np.random.Generator) -> np.ndarray:
    """Sampled reconstruction-error reward for a batch of normalized transitions."""
    s, s2 = _check_batch(module, states, next_states)
    a_vec = module.action_vectors(actions)
    if len(a_vec) != len(s):
        raise DimensionError("action and state batches differ in length")
    mu, log_sigma, _ = split_mu_log_sigma(module.encoder.predict(np.hstack([s, s2])))
    z = mu + np.exp(log_sigma) * rng.standard_normal(mu.shape)
    enc_action = softmax_array(z) if module.discrete else z
    blended = module.beta * a_vec + (1.0 - module.beta) * enc_action
    s_hat = module.decoder.predict(np.hstack([blended, s]))
    err = s_hat - s2
    return module.lam * np.sum(err * err, axis=1)


class GirlReward:
    """Reward source for rollouts: normalizes raw env tensors, then ``infer_reward``."""

    name = "girl"
    uses_env_reward = False

    def __init__(self, module: GirlModule, normalizer: Normalizer, rng: np.random.Generator):
        self.module = module
        self.normalizer = normalizer
        self.rng = rng

    def rewards(self, states, actions, next_states, results=None) -> np.ndarray:
        norm = self.normalizer
        a = actions if self.module.discrete else norm.normalize_actions(actions)
        return infer_reward(self.module, norm.normalize_states(states), a,
                            norm.normalize_states(next_states), self.rng)
