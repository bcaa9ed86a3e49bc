"""Intrinsic curiosity module used as the CDIL reward learner.

Feature net ``phi``, inverse model ``(phi(s), phi(s')) -> action`` and forward
model ``(phi(s), action) -> phi(s')``, trained jointly on ``L_I + L_F``. The
feature net receives gradients from both losses, including through the
``phi(s')`` target of the forward loss. The curiosity reward
``lambda * ||phi_hat(s') - phi(s')||^2`` is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demo import Demonstration, sample_indices
from .diff import Adam, DimensionError, Mlp, NumericAbort, log_softmax, softmax_array
from .girl import Normalizer


@dataclass
class IcmLoss:
    inverse: float
    forward: float
    total: float


class IcmModule:
    def __init__(self, state_dim: int, action_dim: int, discrete: bool, rng: np.random.Generator,
                 feature_dim: int = 32, hidden: int = 100, lam: float = 1.0, activation: str | None = None):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        act = activation or ("leaky_relu" if discrete else "tanh")
        self.state_dim, self.action_dim, self.feature_dim = state_dim, action_dim, feature_dim
        self.discrete = discrete
        self.lam = float(lam)
        self.feature_net = Mlp([state_dim, hidden, feature_dim], act, rng)
        self.inverse_net = Mlp([2 * feature_dim, hidden, action_dim], act, rng)
        self.forward_net = Mlp([feature_dim + action_dim, hidden, feature_dim], act, rng)
        self.normalizer: Normalizer | None = None

    def nets(self) -> list[Mlp]:
        return [self.feature_net, self.inverse_net, self.forward_net]

    def parameters(self):
        return [p for net in self.nets() for p in net.parameters()]

    def named_parameters(self, prefix: str = "icm"):
        return (self.feature_net.named_parameters(f"{prefix}.feature")
                + self.inverse_net.named_parameters(f"{prefix}.inverse")
                + self.forward_net.named_parameters(f"{prefix}.forward"))

    def zero_grad(self) -> None:
        for net in self.nets():
            net.zero_grad()

    def action_vectors(self, actions) -> np.ndarray:
        if self.discrete:
            idx = np.asarray(actions, dtype=np.int64).reshape(-1)
            out = np.zeros((len(idx), self.action_dim))
            out[np.arange(len(idx)), idx] = 1.0
            return out
        return np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dim)

    def predict_actions(self, states, next_states) -> np.ndarray:
        f = self.feature_net.predict(np.vstack([states, next_states]))
        n = len(states)
        out = self.inverse_net.predict(np.hstack([f[:n], f[n:]]))
        return out.argmax(axis=1) if self.discrete else out


def _check(module: IcmModule, states, next_states):
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    if s.shape != s2.shape or s.shape[1] != module.state_dim:
        raise DimensionError(f"state batches {s.shape}/{s2.shape} do not match state_dim {module.state_dim}")
    return s, s2


def icm_objective(module: IcmModule, states, actions, next_states, backward: bool = True) -> IcmLoss:
    """``L_I`` (cross-entropy or MSE) plus ``L_F`` (mean squared feature error), minimized."""
    s, s2 = _check(module, states, next_states)
    if module.discrete and np.asarray(actions).dtype.kind == "f" and np.asarray(actions).ndim > 1:
        raise ValueError("continuous actions given to a discrete ICM")
    B, F = len(s), module.feature_dim
    a_vec = module.action_vectors(actions)
    run = (lambda net, x: net.forward(x)) if backward else (lambda net, x: net.predict(x))
    phi = run(module.feature_net, np.vstack([s, s2]))
    phi_s, phi_s2 = phi[:B], phi[B:]
    inv = run(module.inverse_net, np.hstack([phi_s, phi_s2]))
    if module.discrete:
        l_inv = float(np.mean(-np.sum(log_softmax(inv) * a_vec, axis=1)))
    else:
        inv_err = inv - a_vec
        l_inv = float(np.mean(np.sum(inv_err * inv_err, axis=1)))
    phi_hat = run(module.forward_net, np.hstack([phi_s, a_vec]))
    ferr = phi_hat - phi_s2
    l_fwd = float(np.mean(np.sum(ferr * ferr, axis=1)))
    out = IcmLoss(l_inv, l_fwd, l_inv + l_fwd)
    if not backward:
        return out
    g_inv = (softmax_array(inv) - a_vec) / B if module.discrete else 2.0 * inv_err / B
    g_inv_in = module.inverse_net.backward(g_inv)
    g_phihat = 2.0 * ferr / B
    g_fwd_in = module.forward_net.backward(g_phihat)
    g_phi_s = g_inv_in[:, :F] + g_fwd_in[:, :F]
    g_phi_s2 = g_inv_in[:, F:] - g_phihat
    module.feature_net.backward(np.vstack([g_phi_s, g_phi_s2]))
    return out


def train_icm(module: IcmModule, demo: Demonstration, epochs: int = 50000, batch_size: int = 32,
              lr: float = 3e-5, stride: int = 4, rng: np.random.Generator | None = None,
              log_interval: int = 100, normalizer: Normalizer | None = None) -> list[dict]:
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
        opt.zero_grad()
        loss = icm_objective(module, states[idx], actions[idx], next_states[idx])
        if not np.isfinite(loss.total):
            raise NumericAbort(f"non-finite ICM loss at epoch {epoch}", loss)
        opt.step()
        if epoch % log_interval == 0 or epoch == epochs:
            log.append({"epoch": epoch, "inverse": loss.inverse, "forward": loss.forward, "total": loss.total})
    return log


def icm_reward(module: IcmModule, states, actions, next_states) -> np.ndarray:
    s, s2 = _check(module, states, next_states)
    a_vec = module.action_vectors(actions)
    if len(a_vec) != len(s):
        raise DimensionError("action and state batches differ in length")
    phi = module.feature_net.predict(np.vstack([s, s2]))
    B = len(s)
    phi_hat = module.forward_net.predict(np.hstack([phi[:B], a_vec]))
    err = phi_hat - phi[B:]
    return module.lam * np.sum(err * err, axis=1)


class IcmReward:
    name = "icm"
    uses_env_reward = False

    def __init__(self, module: IcmModule, normalizer: Normalizer):
        self.module = module
        self.normalizer = normalizer

    def rewards(self, states, actions, next_states, results=None) -> np.ndarray:
        norm = self.normalizer
        a = actions if self.module.discrete else norm.normalize_actions(actions)
        return icm_reward(self.module, norm.normalize_states(states), a, norm.normalize_states(next_states))
