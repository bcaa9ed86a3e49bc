"""Central finite-difference checks of every analytic gradient in the package.

``gradient_suite`` builds small random instances of each loss (GIRL
objective, ICM objective, discriminator losses, BC likelihood, PPO surrogate)
and compares the backpropagated parameter gradients with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .adversarial import Discriminator, bc_loss, disc_loss
from .diff import ParamTensor
from .envs import ActionSpace
from .girl import GirlModule, girl_objective
from .icm import IcmModule, icm_objective
from .ppo import PolicyNet, PpoConfig, ppo_loss

FD_STEP = 1e-5


@dataclass(frozen=True)
class GradCheck:
    name: str
    rel_error: float
    n_params: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(p: ParamTensor, loss: Callable[[], float], h: float = FD_STEP) -> np.ndarray:
    num = np.zeros_like(p.values)
    for i in np.ndindex(p.values.shape):
        orig = p.values[i]
        p.values[i] = orig + h
        fp = loss()
        p.values[i] = orig - h
        fm = loss()
        p.values[i] = orig
        num[i] = (fp - fm) / (2.0 * h)
    return num


def check_gradients(name: str, params: Sequence[ParamTensor], loss: Callable[[], float],
                    backward: Callable[[], object], h: float = FD_STEP) -> GradCheck:
    """Worst per-tensor relative error between ``backward`` grads and differences of ``loss``."""
    for p in params:
        p.zero_grad()
    backward()
    worst, count = 0.0, 0
    for p in params:
        analytic = p.grad.copy()
        worst = max(worst, relative_error(analytic, numeric_gradient(p, loss, h)))
        count += p.values.size
    return GradCheck(name, worst, count)


def _actions(rng, discrete: bool, k: int, n: int):
    return rng.integers(0, k, n) if discrete else rng.uniform(-1.0, 1.0, (n, k))


def gradient_suite(seed: int = 0, batch: int = 3, state_dim: int = 4) -> list[GradCheck]:
    rng = np.random.default_rng(seed)
    B, d = batch, state_dim
    s = rng.uniform(-1.0, 1.0, (B, d))
    s2 = rng.uniform(-1.0, 1.0, (B, d))
    out: list[GradCheck] = []

    for discrete, k, prior in ((True, 3, "standard_normal"), (False, 2, "standard_normal"), (True, 3, "learned")):
        m = GirlModule(d, k, discrete, np.random.default_rng(seed + 1), hidden=8, prior=prior)
        a = _actions(rng, discrete, k, B)
        noise = rng.standard_normal((B, k))
        out.append(check_gradients(
            f"girl[{'discrete' if discrete else 'continuous'},{prior}]", m.parameters(),
            lambda: -girl_objective(m, s, a, s2, noise, backward=False).total,
            lambda: girl_objective(m, s, a, s2, noise)))

    for discrete, k in ((True, 3), (False, 2)):
        m = IcmModule(d, k, discrete, np.random.default_rng(seed + 1), hidden=8, feature_dim=5)
        a = _actions(rng, discrete, k, B)
        out.append(check_gradients(
            f"icm[{'discrete' if discrete else 'continuous'}]", m.parameters(),
            lambda: icm_objective(m, s, a, s2, backward=False).total,
            lambda: icm_objective(m, s, a, s2)))

    for discrete, k in ((True, 3), (False, 2)):
        for bottleneck in (None, 4):
            disc = Discriminator(d, k, discrete, np.random.default_rng(seed + 1), hidden=8, bottleneck=bottleneck)
            disc.lagrange_beta = 0.3
            a = _actions(rng, discrete, k, B)
            a2 = _actions(rng, discrete, k, B)
            noise = rng.standard_normal((2 * B, 4))
            kind = "gail" if bottleneck is None else "vail"
            out.append(check_gradients(
                f"{kind}[{'discrete' if discrete else 'continuous'}]", disc.parameters(),
                lambda: disc_loss(disc, s, a, s2, a2, noise, backward=False).loss,
                lambda: disc_loss(disc, s, a, s2, a2, noise)))

    for space in (ActionSpace("discrete", n=3), ActionSpace("continuous", dim=2, low=-2.0, high=2.0)):
        pol = PolicyNet(d, space, np.random.default_rng(seed + 1), hidden=8)
        a = _actions(rng, space.discrete, space.size, B)
        if not space.discrete:
            pol.log_std.values[:] = [0.2, -0.3]
        # sharpen the actor so the check is not taken at a near-uniform policy
        pol.actor.layers[-1].weight.values *= 100.0
        out.append(check_gradients(f"bc[{space.kind}]", pol.parameters(),
                                   lambda: bc_loss(pol, s, a, backward=False),
                                   lambda: bc_loss(pol, s, a)))
        cfg = PpoConfig(entropy_coef=0.05, clip_eps=0.2)
        old = pol.log_probs(s, a) + rng.normal(0.0, 0.05, B)
        adv = rng.standard_normal(B)
        ret = rng.standard_normal(B)
        out.append(check_gradients(f"ppo[{space.kind}]", pol.parameters(),
                                   lambda: ppo_loss(pol, s, a, old, adv, ret, cfg, backward=False)["loss"],
                                   lambda: ppo_loss(pol, s, a, old, adv, ret, cfg)))
    return out
