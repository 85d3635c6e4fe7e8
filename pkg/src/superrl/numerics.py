"""Dense numerics substrate: a two-layer tanh MLP with hand-written backprop,
categorical helpers, seeded random streams, Adam, and a finite-difference
gradient checker.

Everything runs in float64; the gradient checks rely on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


class Rng:
    """Seeded random stream with reproducible child streams.

    A child is derived from ``(seed, path + (child_id,))`` through
    :class:`numpy.random.SeedSequence`, so ``split`` never depends on how many
    draws the parent has already made.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, child_id: int) -> "Rng":
        return Rng(self.seed, self.path + (child_id,))

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


@dataclass
class MlpParams:
    """Weights of ``W2 @ tanh(W1 @ x + b1) + b2``."""

    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (output, hidden)
    b2: np.ndarray  # (output,)

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=DTYPE)
        self.b1 = np.asarray(self.b1, dtype=DTYPE)
        self.W2 = np.asarray(self.W2, dtype=DTYPE)
        self.b2 = np.asarray(self.b2, dtype=DTYPE)
        h, _ = self.W1.shape
        o, h2 = self.W2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (o,):
            raise ShapeError(
                f"inconsistent MLP shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls(*(np.zeros_like(a) for a in other.arrays().values()))


def init_mlp(n_in: int, n_hidden: int, n_out: int, rng: Rng, out_scale: float = 0.1) -> MlpParams:
    """Gaussian init with 1/sqrt(fan_in) scaling; the output layer is shrunk
    by ``out_scale`` so a fresh network is close to uniform."""
    W1 = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_hidden, n_in))
    W2 = rng.normal(0.0, out_scale / np.sqrt(n_hidden), (n_out, n_hidden))
    return MlpParams(W1, np.zeros(n_hidden), W2, np.zeros(n_out))


@dataclass
class MlpCache:
    params: MlpParams
    x: np.ndarray
    h: np.ndarray
    squeeze: bool


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on a single vector ``(n_in,)`` or a batch ``(N, n_in)``."""
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 1
    xb = x[None, :] if squeeze else x
    if xb.ndim != 2 or xb.shape[1] != params.n_in:
        raise ShapeError(f"input shape {x.shape} does not match W1 cols {params.n_in}")
    # einsum keeps each row's summation order independent of the batch size, so a
    # sequence scored alone and inside a batch gets bit-identical log-probs
    h = np.tanh(np.einsum("nj,ij->ni", xb, params.W1) + params.b1)
    logits = np.einsum("nj,ij->ni", h, params.W2) + params.b2
    cache = MlpCache(params, xb, h, squeeze)
    return (logits[0] if squeeze else logits), cache


def mlp_backward(cache: MlpCache, grad_logits: np.ndarray) -> MlpParams:
    """Gradient of ``sum(logits * grad_logits)`` with respect to every weight."""
    g = np.asarray(grad_logits, dtype=DTYPE)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache.x.shape[0], cache.params.n_out):
        raise ShapeError(
            f"grad_logits shape {np.shape(grad_logits)} does not match cached "
            f"forward ({cache.x.shape[0]}, {cache.params.n_out})"
        )
    p = cache.params
    dW2 = g.T @ cache.h
    db2 = g.sum(axis=0)
    da = (g @ p.W2) * (1.0 - cache.h**2)
    dW1 = da.T @ cache.x
    db1 = da.sum(axis=0)
    return MlpParams(dW1, db1, dW2, db2)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities along the last axis, max-shifted for stability."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(log_probs: np.ndarray, rng: Rng) -> int:
    """Draw one index from ``exp(log_probs)`` by inverse CDF (temperature 1, no truncation)."""
    return int(sample_categorical_batch(np.asarray(log_probs)[None, :], rng.random(1))[0])


def sample_categorical_batch(log_probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling given pre-drawn uniforms in [0, 1)."""
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    idx = (uniforms[:, None] >= cdf).sum(axis=-1)
    # rounding can leave cdf[-1] slightly below 1
    return np.minimum(idx, log_probs.shape[-1] - 1)


def check_gradients(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn`` maps a dict of arrays to ``(loss, grads)`` where ``grads`` has
    the same keys and shapes. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over every coordinate.
    """
    base = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    loss0, grads = loss_fn(base)
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the base point")
    worst = 0.0
    for name, arr in base.items():
        analytic = np.asarray(grads[name], dtype=DTYPE)
        if analytic.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} has shape {analytic.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_fn(base)
            flat[i] = orig - eps
            lm, _ = loss_fn(base)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss is not finite when perturbing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst


class Adam:
    """Adam over a flat dict of named arrays. Updates are applied in place."""

    def __init__(self, lr: float = 1e-2, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
