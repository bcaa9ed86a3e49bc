"""Dense float64 tensors, feed-forward MLPs with hand-written backprop,
a few closed-form distribution helpers and Adam.

Networks here are strictly layer stacks: ``forward`` caches what ``backward``
needs, ``predict`` does not touch any state and is safe to call from several
threads on a frozen parameter set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 4.0
PARAM_MAGIC = b"IILPARAM1"


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


class NumericAbort(RuntimeError):
    """A training loop produced a non-finite loss; ``stats`` holds the last values seen."""

    def __init__(self, message: str, stats=None):
        super().__init__(message)
        self.stats = stats if stats is not None else {}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParamTensor:
    """A learnable array together with its accumulated gradient."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim == 0 or 0 in self.values.shape:
            raise DimensionError(f"bad parameter shape {self.values.shape}")
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"ParamTensor(shape={self.shape})"


# ---------------------------------------------------------------- activations

ACTIVATIONS = ("tanh", "leaky_relu", "relu", "identity")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - post * post)
    if name == "leaky_relu":
        return np.where(pre > 0, g, LEAKY_SLOPE * g)
    if name == "relu":
        return np.where(pre > 0, g, 0.0)
    return g


@dataclass
class Layer:
    weight: ParamTensor
    bias: ParamTensor
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class Mlp:
    """Stack of affine layers, each followed by an activation.

    ``sizes`` lists the widths including input and output; ``activations`` has
    one entry per layer. ``out_scale`` shrinks the initial weights of the last
    layer (used for policy heads).
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str] | str,
        rng: np.random.Generator,
        out_scale: float = 1.0,
    ):
        if len(sizes) < 2:
            raise DimensionError("an Mlp needs at least an input and an output width")
        n_layers = len(sizes) - 1
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise DimensionError(f"{n_layers} layers but {len(activations)} activations")
        self.layers: list[Layer] = []
        for i, (fan_in, fan_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == n_layers - 1:
                w *= out_scale
            self.layers.append(Layer(ParamTensor(w), ParamTensor(np.zeros(fan_out)), act))
        self._cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected [batch, {self.input_dim}] input, got {x.shape}")
        return x

    def predict(self, x) -> np.ndarray:
        h = self._check(x)
        for layer in self.layers:
            h = _act(layer.activation, h @ layer.weight.values + layer.bias.values)
        return h

    def forward(self, x) -> np.ndarray:
        h = self._check(x)
        cache = []
        for layer in self.layers:
            pre = h @ layer.weight.values + layer.bias.values
            post = _act(layer.activation, pre)
            cache.append((h, pre, post))
            h = post
        self._cache = cache
        return h

    def backward(self, grad_out) -> np.ndarray:
        """Accumulate parameter gradients for the cached pass; return dLoss/dx."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        for layer, (inp, pre, post) in zip(reversed(self.layers), reversed(self._cache)):
            g = _act_grad(layer.activation, pre, post, g)
            layer.weight.grad += inp.T @ g
            layer.bias.grad += g.sum(axis=0)
            g = g @ layer.weight.values.T
        return g

    def parameters(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def named_parameters(self, prefix: str) -> list[tuple[str, ParamTensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}.{i}.weight", layer.weight))
            out.append((f"{prefix}.{i}.bias", layer.bias))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def zero_grad(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


# -------------------------------------------------------------- distributions


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise DimensionError(f"mu {mu.shape} and sigma {sigma.shape} differ")
        if not np.all(sigma > 0):
            raise DomainError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_log_sigma(cls, mu, log_sigma) -> "DiagGaussian":
        return cls(mu, np.exp(np.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)))


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
            raise DomainError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    def entropy(self) -> np.ndarray:
        p = self.probs
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def kl_gaussian_std_normal(q: DiagGaussian) -> np.ndarray:
    """KL(q || N(0, I)), summed over the last axis."""
    mu, s2 = q.mu, q.sigma**2
    return 0.5 * np.sum(mu * mu + s2 - 1.0 - np.log(s2), axis=-1)


def kl_std_normal_from_log_sigma(mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu * mu + np.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=-1)


def kl_diag_gaussians(mu_q, log_sigma_q, mu_p, log_sigma_p) -> np.ndarray:
    """KL(N(mu_q, sigma_q) || N(mu_p, sigma_p)), summed over the last axis."""
    var_q = np.exp(2.0 * log_sigma_q)
    var_p = np.exp(2.0 * log_sigma_p)
    terms = log_sigma_p - log_sigma_q + (var_q + (mu_q - mu_p) ** 2) / (2.0 * var_p) - 0.5
    return np.sum(terms, axis=-1)


def softmax_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z) -> Categorical:
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise DomainError("softmax of NaN")
    return Categorical(softmax_array(z))


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax, given its output ``p``."""
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def reparameterize(q: DiagGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mu.shape:
        raise DimensionError(f"noise {noise.shape} does not match {q.mu.shape}")
    return q.mu + q.sigma * noise


def split_mu_log_sigma(out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a head output into (mu, clamped log sigma, mask of unclamped entries)."""
    k = out.shape[-1] // 2
    mu, raw = out[..., :k], out[..., k:]
    log_sigma = np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    live = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
    return mu, log_sigma, live


# ---------------------------------------------------------------------- Adam


class Adam:
    def __init__(self, params: Sequence[ParamTensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_norm(params: Iterable[ParamTensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    total = grad_norm(params)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ----------------------------------------------------------------- checkpoints


def encode_params(named: Sequence[tuple[str, ParamTensor | np.ndarray]]) -> bytes:
    chunks = [PARAM_MAGIC]
    for name, tensor in named:
        arr = tensor.values if isinstance(tensor, ParamTensor) else np.asarray(tensor, np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_params(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic", 0)
    pos = len(PARAM_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError("truncated checkpoint", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        start = pos
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor {name!r}", start)
        out[name] = arr
    return out


def save_params(path, named: Sequence[tuple[str, ParamTensor | np.ndarray]]) -> None:
    Path(path).write_bytes(encode_params(named))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def assign_params(named: Sequence[tuple[str, ParamTensor]], stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into live parameters; names and shapes must match."""
    for name, p in named:
        if name not in stored:
            raise KeyError(f"checkpoint has no tensor {name!r}")
        if stored[name].shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {stored[name].shape} != {p.shape}")
        p.values[...] = stored[name]
