"""Deterministic desk-scale MDPs.

``GridHazardEnv`` is a multi-life pellet gridworld. A life ends either on a
hazard cell or when the agent's oxygen runs out; every move costs one unit and
every pellet eaten refills some. The agent respawns at the start cell and the
episode continues until all lives are spent. This is what makes a "one-life"
prefix of an expert episode strictly poorer than the full episode.

``PendulumEnv`` is a torque-controlled pendulum whose upright position is the
zero-cost fixed point.
"""

from __future__ import annotations

import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_GAMMA = 0.99

# up, down, left, right
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


class RewardLeakError(RuntimeError):
    """Raised when environment reward is read inside a sealed (learning) region."""


_seal = threading.local()


@contextmanager
def sealed_true_reward():
    """Forbid reading ``StepResult.true_reward`` within the block (this thread)."""
    prev = getattr(_seal, "on", False)
    _seal.on = True
    try:
        yield
    finally:
        _seal.on = prev


def true_reward_sealed() -> bool:
    return getattr(_seal, "on", False)


class StepResult:
    __slots__ = ("next_state", "_true_reward", "episode_done", "life_lost", "reset_state", "info")

    def __init__(self, next_state, true_reward, episode_done, life_lost, info=None):
        self.next_state = next_state
        self._true_reward = float(true_reward)
        self.episode_done = bool(episode_done)
        self.life_lost = bool(life_lost)
        # filled by VecEnv when the env was reset after this step
        self.reset_state = None
        self.info = info or {}

    @property
    def true_reward(self) -> float:
        if true_reward_sealed():
            raise RewardLeakError("environment reward read outside evaluation")
        return self._true_reward

    def __eq__(self, other) -> bool:
        if not isinstance(other, StepResult):
            return NotImplemented
        same_reset = (self.reset_state is None) == (other.reset_state is None) and (
            self.reset_state is None or np.array_equal(self.reset_state, other.reset_state)
        )
        return (
            np.array_equal(self.next_state, other.next_state)
            and self._true_reward == other._true_reward
            and self.episode_done == other.episode_done
            and self.life_lost == other.life_lost
            and same_reset
        )

    def __repr__(self) -> str:
        return (f"StepResult(reward={self._true_reward}, done={self.episode_done}, "
                f"life_lost={self.life_lost})")


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int = 0
    dim: int = 0
    low: float = 0.0
    high: float = 0.0

    @property
    def size(self) -> int:
        """Width of the action vector fed to networks (one-hot width when discrete)."""
        return self.n if self.kind == "discrete" else self.dim

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    def contains(self, action) -> bool:
        if self.discrete:
            return isinstance(action, (int, np.integer)) and 0 <= int(action) < self.n
        a = np.asarray(action, dtype=np.float64)
        return a.shape == (self.dim,) and bool(np.all(np.isfinite(a)))


@dataclass(frozen=True)
class MdpSpec:
    state_dim: int
    action_space: ActionSpace
    gamma: float = DEFAULT_GAMMA
    max_episode_steps: int = 1000
    state_low: tuple = field(default=())
    state_high: tuple = field(default=())

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_episode_steps <= 0:
            raise ValueError("max_episode_steps must be positive")


# ----------------------------------------------------------------- GridHazard


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    start: tuple[int, int]
    pellets: tuple[tuple[int, int], ...]
    hazards: frozenset


def _reachable(width, height, start, hazards) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in MOVES:
            nxt = (x + dx, y + dy)
            if 0 <= nxt[0] < width and 0 <= nxt[1] < height and nxt not in hazards and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def make_layout(width: int, height: int, n_pellets: int, n_hazards: int, seed: int) -> GridLayout:
    """Random layout; every pellet is reachable from the start without touching a hazard."""
    rng = np.random.default_rng(seed)
    cells = [(x, y) for y in range(height) for x in range(width)]
    if n_pellets + n_hazards + 1 > len(cells):
        raise ValueError("grid too small for the requested pellets and hazards")
    while True:
        order = rng.permutation(len(cells))
        start = cells[order[0]]
        hazards = frozenset(cells[i] for i in order[1 : 1 + n_hazards])
        pellets = tuple(cells[i] for i in order[1 + n_hazards : 1 + n_hazards + n_pellets])
        reach = _reachable(width, height, start, hazards)
        if all(p in reach for p in pellets):
            return GridLayout(width, height, start, pellets, hazards)


class GridHazardEnv:
    """Pellet-collecting gridworld with hazards, lives and an oxygen supply.

    Each life starts with ``life_steps`` units of oxygen. A move uses one unit,
    a pellet adds ``pellet_oxygen`` (capped at ``life_steps``), and the life is
    lost when the supply reaches zero. Staying alive therefore means eating.

    State vector: one-hot agent cell, pellet-present bits (layout order),
    lives / max_lives, and oxygen used / life_steps. Every entry lies in [0, 1].

    With ``layout_seed`` set the board is the same for every reset (like a
    fixed game level); otherwise ``reset(seed)`` draws a new board.
    """

    n_actions = 4

    def __init__(self, width=8, height=8, lives=3, n_pellets=12, n_hazards=6,
                 life_steps=8, pellet_oxygen=2, max_episode_steps=None, layout_seed=None,
                 gamma=DEFAULT_GAMMA):
        if width < 2 or height < 2:
            raise ValueError("grid must be at least 2x2")
        if lives < 1 or life_steps < 1:
            raise ValueError("lives and life_steps must be positive")
        if pellet_oxygen < 0:
            raise ValueError("pellet_oxygen must be nonnegative")
        self.width, self.height = width, height
        self.max_lives = lives
        self.n_pellets, self.n_hazards = n_pellets, n_hazards
        self.life_steps = life_steps
        self.pellet_oxygen = pellet_oxygen
        # long enough that the cap never cuts an episode short
        self.max_episode_steps = max_episode_steps or lives * life_steps + n_pellets * pellet_oxygen
        self.layout_seed = layout_seed
        n_cells = width * height
        dim = n_cells + n_pellets + 2
        self.spec = MdpSpec(
            state_dim=dim,
            action_space=ActionSpace("discrete", n=4),
            gamma=gamma,
            max_episode_steps=self.max_episode_steps,
            state_low=(0.0,) * dim,
            state_high=(1.0,) * dim,
        )
        self.layout: GridLayout | None = None
        self.seed = None
        if layout_seed is not None:
            self.layout = make_layout(width, height, n_pellets, n_hazards, layout_seed)
        self._needs_reset = True

    @property
    def env_id(self) -> str:
        return "grid_hazard"

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.seed = seed
        if self.layout_seed is None:
            self.layout = make_layout(self.width, self.height, self.n_pellets, self.n_hazards,
                                      0 if seed is None else seed)
        self.pos = self.layout.start
        self.pellet_alive = np.ones(self.n_pellets, dtype=bool)
        self._pellet_index = {p: i for i, p in enumerate(self.layout.pellets)}
        self.lives = self.max_lives
        self.oxygen = self.life_steps
        self.steps = 0
        self._needs_reset = False
        return self.state()

    def state(self) -> np.ndarray:
        n_cells = self.width * self.height
        s = np.zeros(self.spec.state_dim)
        s[self.pos[1] * self.width + self.pos[0]] = 1.0
        s[n_cells : n_cells + self.n_pellets] = self.pellet_alive
        s[-2] = self.lives / self.max_lives
        s[-1] = 1.0 - self.oxygen / self.life_steps
        return s

    @property
    def pellets_remaining(self) -> int:
        return int(self.pellet_alive.sum())

    def step(self, action) -> StepResult:
        if self._needs_reset:
            raise RuntimeError("step() on a finished episode; call reset()")
        if not self.spec.action_space.contains(action):
            raise ValueError(f"action {action!r} outside discrete({self.n_actions})")
        dx, dy = MOVES[int(action)]
        x, y = self.pos[0] + dx, self.pos[1] + dy
        if 0 <= x < self.width and 0 <= y < self.height:
            self.pos = (x, y)
        self.steps += 1
        self.oxygen -= 1
        reward = 0.0
        life_lost = False
        if self.pos in self.layout.hazards:
            life_lost = True
        else:
            idx = self._pellet_index.get(self.pos)
            if idx is not None and self.pellet_alive[idx]:
                self.pellet_alive[idx] = False
                reward = 1.0
                self.oxygen = min(self.life_steps, self.oxygen + self.pellet_oxygen)
            if self.oxygen <= 0:
                life_lost = True
        if life_lost:
            self.lives -= 1
            self.pos = self.layout.start
            self.oxygen = self.life_steps
        terminal = self.lives == 0 or not self.pellet_alive.any()
        done = terminal or self.steps >= self.max_episode_steps
        self._needs_reset = done
        return StepResult(self.state(), reward, done, life_lost, {"truncated": done and not terminal})


def grid_optimal_return(env: GridHazardEnv) -> int:
    """Most pellets any action sequence can collect over all lives (exhaustive search).

    For each life the search tracks, per (cell, eaten-set), the most oxygen
    left on arrival; more oxygen never hurts, so that is all that matters.
    Any eaten-set reachable while alive can also end the life (walk until the
    oxygen runs out), so ending early on a hazard never needs exploring. The
    default step cap is never binding; a smaller cap is rejected.
    """
    if env.layout is None:
        env.reset(0)
    lay = env.layout
    w, h, n_p = lay.width, lay.height, len(lay.pellets)
    if env.max_episode_steps < env.max_lives * env.life_steps + n_p * env.pellet_oxygen:
        raise ValueError("exhaustive search assumes the step cap never ends an episode")
    n_cells, n_masks = w * h, 1 << n_p
    bit = np.zeros(n_cells, dtype=np.int64)
    for i, (px, py) in enumerate(lay.pellets):
        bit[py * w + px] = 1 << i
    succ = []
    for c in range(n_cells):
        x, y = c % w, c // w
        outs = set()
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h):
                nx, ny = x, y
            if (nx, ny) not in lay.hazards:
                outs.add(ny * w + nx)
        succ.append(sorted(outs))
    masks = np.arange(n_masks, dtype=np.int64)
    full = n_masks - 1
    start = lay.start[1] * w + lay.start[0]
    cap, bonus = env.life_steps, env.pellet_oxygen
    start_masks = np.zeros(n_masks, dtype=bool)
    start_masks[0] = True
    for _ in range(env.max_lives):
        oxy = np.full((n_cells, n_masks), -1, dtype=np.int64)
        oxy[start, start_masks] = cap
        ended = start_masks.copy()
        frontier = oxy.copy()
        while True:
            new = np.full_like(oxy, -1)
            for c in range(n_cells):
                live = (frontier[c] > 0) & (masks != full)
                if not live.any():
                    continue
                src, o = masks[live], frontier[c, live] - 1
                for nc in succ[c]:
                    fresh = (src & bit[nc]) == 0 if bit[nc] else np.zeros(len(src), dtype=bool)
                    o2 = np.where(fresh, np.minimum(cap, o + bonus), o)
                    dst = src | bit[nc]
                    ended[dst] = True
                    np.maximum.at(new[nc], dst, o2)
            improved = new > oxy
            if not improved.any():
                break
            oxy = np.maximum(oxy, new)
            frontier = np.where(improved, new, -1)
        start_masks = ended
        if start_masks[full]:
            break
    return max(bin(int(m)).count("1") for m in masks[start_masks])


# ------------------------------------------------------------------- Pendulum


class PendulumEnv:
    """Torque-limited pendulum; angle 0 is upright.

    Dynamics use semi-implicit Euler with ``dt = 0.05``:
    ``w += dt * (g/l * sin(th) + u / (m l^2))`` then ``th += dt * w``.
    Reward is ``-(th^2 + 0.1 w^2 + 0.001 u^2)`` with ``th`` wrapped into
    [-pi, pi), evaluated on the pre-step state. The initial angle is uniform on
    [-init_angle, init_angle) (default the whole circle [-pi, pi)) and the
    initial velocity uniform on [-init_speed, init_speed].
    """

    def __init__(self, max_torque=2.0, max_speed=8.0, gravity=10.0, mass=1.0, length=1.0,
                 dt=0.05, init_angle=np.pi, init_speed=1.0, max_episode_steps=200,
                 gamma=DEFAULT_GAMMA):
        self.max_torque = float(max_torque)
        self.max_speed = float(max_speed)
        self.g, self.m, self.l = float(gravity), float(mass), float(length)
        self.dt = float(dt)
        self.init_angle = float(init_angle)
        self.init_speed = float(init_speed)
        self.max_episode_steps = int(max_episode_steps)
        self.spec = MdpSpec(
            state_dim=3,
            action_space=ActionSpace("continuous", dim=1, low=-self.max_torque, high=self.max_torque),
            gamma=gamma,
            max_episode_steps=self.max_episode_steps,
            state_low=(-1.0, -1.0, -self.max_speed),
            state_high=(1.0, 1.0, self.max_speed),
        )
        self.theta = 0.0
        self.omega = 0.0
        self.steps = 0
        self.seed = None
        self._needs_reset = True

    @property
    def env_id(self) -> str:
        return "pendulum"

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.theta = float(rng.uniform(-self.init_angle, self.init_angle))
        self.omega = float(rng.uniform(-self.init_speed, self.init_speed))
        self.steps = 0
        self._needs_reset = False
        return self.state()

    def set_state(self, theta: float, omega: float) -> np.ndarray:
        self.theta, self.omega = float(theta), float(omega)
        self.steps = 0
        self._needs_reset = False
        return self.state()

    def state(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), self.omega])

    def step(self, action) -> StepResult:
        if self._needs_reset:
            raise RuntimeError("step() on a finished episode; call reset()")
        if not self.spec.action_space.contains(action):
            raise ValueError(f"action {action!r} outside continuous(1)")
        u = float(np.clip(np.asarray(action, dtype=np.float64)[0], -self.max_torque, self.max_torque))
        th = wrap_angle(self.theta)
        reward = -(th * th + 0.1 * self.omega**2 + 0.001 * u * u)
        acc = self.g / self.l * np.sin(self.theta) + u / (self.m * self.l**2)
        self.omega = float(np.clip(self.omega + self.dt * acc, -self.max_speed, self.max_speed))
        self.theta = wrap_angle(self.theta + self.dt * self.omega)
        self.steps += 1
        done = self.steps >= self.max_episode_steps
        self._needs_reset = done
        return StepResult(self.state(), reward, done, False, {"torque": u, "truncated": done})


def wrap_angle(theta: float) -> float:
    return float((theta + np.pi) % (2.0 * np.pi) - np.pi)


# --------------------------------------------------------------- vectorized


class VecEnv:
    """Steps a list of envs in lockstep and resets finished ones.

    Reset seeds come from one master stream, consumed in env order, so results
    do not depend on how the individual steps are scheduled.
    """

    def __init__(self, envs: Sequence, seed: int):
        if not envs:
            raise ValueError("VecEnv needs at least one environment")
        self.envs = list(envs)
        self.spec = self.envs[0].spec
        self._seeds = np.random.default_rng(seed)
        self.states = np.stack([env.reset(self._next_seed()) for env in self.envs])

    def _next_seed(self) -> int:
        return int(self._seeds.integers(0, 2**31 - 1))

    def __len__(self) -> int:
        return len(self.envs)

    def step(self, actions) -> list[StepResult]:
        results = vec_step(self.envs, actions)
        for i, res in enumerate(results):
            self.states[i] = res.next_state
            if res.episode_done:
                res.reset_state = self.envs[i].reset(self._next_seed())
                self.states[i] = res.reset_state
        return results


def vec_step(envs: Sequence, actions: Sequence) -> list[StepResult]:
    if len(envs) != len(actions):
        raise ValueError(f"{len(envs)} envs but {len(actions)} actions")
    return [env.step(a) for env, a in zip(envs, actions)]


def discounted_return(rewards, gamma: float) -> float:
    total = 0.0
    for r in reversed(list(rewards)):
        total = float(r) + gamma * total
    return total


def make_env(env_id: str, **kwargs):
    if env_id == "grid_hazard":
        return GridHazardEnv(**kwargs)
    if env_id == "pendulum":
        return PendulumEnv(**kwargs)
    raise ValueError(f"unknown env {env_id!r}")
