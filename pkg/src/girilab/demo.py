"""Recording, truncating, storing and sampling expert demonstrations."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DEMO_MAGIC = b"IILDEMO1\0"
ONE_LIFE = "one_life"
FULL_EPISODE = "full_episode"
_PROVENANCE = {ONE_LIFE: 0, FULL_EPISODE: 1}
_KINDS = {"discrete": 0, "continuous": 1}

FLAG_LIFE_LOST = 1
FLAG_EPISODE_END = 2


class DemoFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int | np.ndarray
    next_state: np.ndarray


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray  # int indices (discrete) or [batch, dim] (continuous)
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> list[Transition]:
        return [Transition(s, a, n) for s, a, n in zip(self.states, self.actions, self.next_states)]


@dataclass
class Demonstration:
    """Ordered expert transitions plus provenance metadata.

    ``flags`` marks, per transition, a lost life (bit 0) and the last
    transition of a recorded episode segment (bit 1).
    """

    env_id: str
    action_kind: str
    action_dim: int
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    flags: np.ndarray
    provenance: str
    seed: int
    true_return: float = 0.0
    segment_returns: list = field(default_factory=list)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        if self.action_kind == "discrete":
            self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        else:
            self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.states), -1)
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if self.provenance not in _PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def discrete(self) -> bool:
        return self.action_kind == "discrete"

    @property
    def n_segments(self) -> int:
        return int(np.count_nonzero(self.flags & FLAG_EPISODE_END))

    def transitions(self) -> list[Transition]:
        return [Transition(s, a, n) for s, a, n in zip(self.states, self.actions, self.next_states)]

    def batch(self, idx) -> TransitionBatch:
        return TransitionBatch(self.states[idx], self.actions[idx], self.next_states[idx])

    def segment_bounds(self) -> list[tuple[int, int]]:
        ends = np.flatnonzero(self.flags & FLAG_EPISODE_END)
        bounds, start = [], 0
        for e in ends:
            bounds.append((start, int(e) + 1))
            start = int(e) + 1
        if start < len(self):
            bounds.append((start, len(self)))
        return bounds

    def chained(self) -> bool:
        for lo, hi in self.segment_bounds():
            if not np.array_equal(self.next_states[lo : hi - 1], self.states[lo + 1 : hi]):
                return False
        return True


def record(policy: Callable, env, mode: str = ONE_LIFE, episodes: int = 1, seed: int = 0,
           reward_log: list | None = None) -> Demonstration:
    """Roll ``policy`` (already greedy) in ``env`` and keep the transitions.

    ``one_life`` stops each episode right after the first lost life;
    ``full_episode`` runs until the episode ends. ``reward_log`` receives the
    per-transition environment rewards when given.
    """
    if mode not in _PROVENANCE:
        raise ValueError(f"unknown demonstration mode {mode!r}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    space = env.spec.action_space
    seeds = np.random.default_rng(seed)
    states, actions, next_states, flags, rewards = [], [], [], [], []
    seg_returns = []
    for _ in range(episodes):
        s = env.reset(int(seeds.integers(0, 2**31 - 1)))
        seg = 0.0
        while True:
            a = policy(s)
            if not space.contains(a):
                raise ValueError(f"policy action {a!r} does not fit the {space.kind} action space")
            if not space.discrete:
                a = np.clip(np.asarray(a, dtype=np.float64), space.low, space.high)
            res = env.step(a)
            states.append(s)
            actions.append(a)
            next_states.append(res.next_state)
            rewards.append(res.true_reward)
            seg += res.true_reward
            stop = res.episode_done or (mode == ONE_LIFE and res.life_lost)
            flags.append((FLAG_LIFE_LOST if res.life_lost else 0) | (FLAG_EPISODE_END if stop else 0))
            s = res.next_state
            if stop:
                break
        seg_returns.append(seg)
    if reward_log is not None:
        reward_log.extend(rewards)
    return Demonstration(
        env_id=env.env_id,
        action_kind=space.kind,
        action_dim=space.n if space.discrete else space.dim,
        states=np.array(states),
        actions=np.array(actions),
        next_states=np.array(next_states),
        flags=np.array(flags),
        provenance=mode,
        seed=seed,
        true_return=float(sum(rewards)),
        segment_returns=seg_returns,
    )


def strided_indices(n: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.arange(0, n, stride)


def sample_indices(n: int, batch_size: int, stride: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from {0, stride, 2*stride, ...}; without replacement when it fits."""
    if n < 1:
        raise ValueError("cannot sample from an empty demonstration")
    pool = strided_indices(n, stride)
    if len(pool) >= batch_size:
        return rng.choice(pool, size=batch_size, replace=False)
    return rng.choice(pool, size=batch_size, replace=True)


def sample_minibatch(demo: Demonstration, batch_size: int = 32, stride: int = 4,
                     rng: np.random.Generator | None = None) -> TransitionBatch:
    rng = rng if rng is not None else np.random.default_rng()
    return demo.batch(sample_indices(len(demo), batch_size, stride, rng))


def default_stride(discrete: bool) -> int:
    return 4 if discrete else 20


# ------------------------------------------------------------------ file I/O


def encode_demo(demo: Demonstration) -> bytes:
    env_raw = demo.env_id.encode("utf-8")
    act_cols = 1 if demo.discrete else demo.action_dim
    header = b"".join([
        DEMO_MAGIC,
        struct.pack("<I", len(env_raw)),
        env_raw,
        struct.pack("<III", demo.state_dim, _KINDS[demo.action_kind], demo.action_dim),
        struct.pack("<Q", len(demo)),
        struct.pack("<B", _PROVENANCE[demo.provenance]),
        struct.pack("<Q", demo.seed),
    ])
    rows = np.hstack([
        demo.states,
        demo.actions.astype(np.float64).reshape(len(demo), act_cols),
        demo.next_states,
    ]) if len(demo) else np.zeros((0, 2 * demo.state_dim + act_cols))
    trailer = struct.pack("<d", demo.true_return) + demo.flags.astype(np.uint8).tobytes()
    return header + np.ascontiguousarray(rows, dtype="<f8").tobytes() + trailer


def decode_demo(data: bytes) -> Demonstration:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DemoFormatError(f"truncated file while reading {what}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if data[: len(DEMO_MAGIC)] != DEMO_MAGIC:
        raise DemoFormatError("bad demonstration magic", 0)
    pos = len(DEMO_MAGIC)
    (name_len,) = struct.unpack("<I", take(4, "env id length"))
    env_id = take(name_len, "env id").decode("utf-8")
    dims_at = pos
    state_dim, kind_code, action_dim = struct.unpack("<III", take(12, "dimensions"))
    kinds = {v: k for k, v in _KINDS.items()}
    if kind_code not in kinds or state_dim == 0 or action_dim == 0:
        raise DemoFormatError("invalid state/action dimensions", dims_at)
    kind = kinds[kind_code]
    (count,) = struct.unpack("<Q", take(8, "transition count"))
    prov_at = pos
    (prov_code,) = struct.unpack("<B", take(1, "provenance"))
    provs = {v: k for k, v in _PROVENANCE.items()}
    if prov_code not in provs:
        raise DemoFormatError("invalid provenance code", prov_at)
    (seed,) = struct.unpack("<Q", take(8, "seed"))
    act_cols = 1 if kind == "discrete" else action_dim
    width = 2 * state_dim + act_cols
    rows_at = pos
    rows = np.frombuffer(take(8 * width * count, "transition rows"), dtype="<f8")
    rows = rows.astype(np.float64).reshape(count, width)
    (true_return,) = struct.unpack("<d", take(8, "reward metadata"))
    flags = np.frombuffer(take(count, "flags"), dtype=np.uint8).copy()
    if pos != len(data):
        raise DemoFormatError("trailing bytes after demonstration", pos)
    actions = rows[:, state_dim : state_dim + act_cols]
    if kind == "discrete":
        idx = actions[:, 0]
        bad = np.flatnonzero((idx != np.floor(idx)) | (idx < 0) | (idx >= action_dim))
        if len(bad):
            raise DemoFormatError("discrete action outside the action space",
                                  rows_at + 8 * (int(bad[0]) * width + state_dim))
        actions = idx.astype(np.int64)
    return Demonstration(
        env_id=env_id,
        action_kind=kind,
        action_dim=action_dim,
        states=rows[:, :state_dim],
        actions=actions,
        next_states=rows[:, state_dim + act_cols :],
        flags=flags,
        provenance=provs[prov_code],
        seed=seed,
        true_return=true_return,
    )


def save(demo: Demonstration, path) -> None:
    Path(path).write_bytes(encode_demo(demo))


def load(path) -> Demonstration:
    return decode_demo(Path(path).read_bytes())
