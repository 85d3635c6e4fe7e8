"""Autoregressive categorical policy with a value head.

The state at step ``t`` is featurized as

    one-hot(prompt token per slot) ++ one-hot(t) ++ one-hot(previous token or BOS)

and fed to a tanh MLP producing ``vocab_size`` logits. The critic is a second
MLP on the same features with a scalar output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import TaskInstance
from .errors import ConfigError, ShapeError
from .numerics import (
    DTYPE,
    MlpCache,
    MlpParams,
    Rng,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    sample_categorical_batch,
)


@dataclass(frozen=True)
class PolicyShape:
    vocab_size: int
    prompt_len: int
    max_len: int

    @property
    def n_features(self) -> int:
        return self.prompt_len * self.vocab_size + self.max_len + self.vocab_size + 1

    @property
    def bos(self) -> int:
        return self.vocab_size


@dataclass
class PolicyParams:
    shape: PolicyShape
    net: MlpParams
    value_net: MlpParams
    sigma_pg: np.ndarray = field(default_factory=lambda: np.array(0.0))
    sigma_sft: np.ndarray = field(default_factory=lambda: np.array(0.0))

    def __post_init__(self):
        self.sigma_pg = np.asarray(self.sigma_pg, dtype=DTYPE).reshape(())
        self.sigma_sft = np.asarray(self.sigma_sft, dtype=DTYPE).reshape(())
        if self.net.n_in != self.shape.n_features or self.net.n_out != self.shape.vocab_size:
            raise ShapeError("policy net does not match the featurization")
        if self.value_net.n_in != self.shape.n_features or self.value_net.n_out != 1:
            raise ShapeError("value net does not match the featurization")

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (no copies)."""
        out = {f"net.{k}": v for k, v in self.net.arrays().items()}
        out.update({f"value.{k}": v for k, v in self.value_net.arrays().items()})
        out["sigma_pg"] = self.sigma_pg
        out["sigma_sft"] = self.sigma_sft
        return out

    @classmethod
    def from_arrays(cls, shape: PolicyShape, arrays: dict[str, np.ndarray]) -> "PolicyParams":
        net = MlpParams(*(arrays[f"net.{k}"] for k in ("W1", "b1", "W2", "b2")))
        value = MlpParams(*(arrays[f"value.{k}"] for k in ("W1", "b1", "W2", "b2")))
        return cls(shape, net, value, arrays["sigma_pg"], arrays["sigma_sft"])

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.shape, self.net.copy(), self.value_net.copy(), self.sigma_pg.copy(), self.sigma_sft.copy()
        )


def init_policy(
    shape: PolicyShape,
    rng: Rng,
    hidden: int = 32,
    sigma_init: tuple[float, float] = (0.0, 0.0),
) -> PolicyParams:
    """Fresh actor and critic. The critic reuses the actor's first layer and
    starts with a zero output layer, so its initial estimate is exactly 0."""
    net = init_mlp(shape.n_features, hidden, shape.vocab_size, rng.split(0))
    value = MlpParams(net.W1.copy(), net.b1.copy(), np.zeros((1, hidden)), np.zeros(1))
    return PolicyParams(shape, net, value, np.array(sigma_init[0]), np.array(sigma_init[1]))


def policy_shape_for(instance: TaskInstance, vocab_size: int) -> PolicyShape:
    return PolicyShape(vocab_size, len(instance.prompt_tokens), len(instance.oracle_trace))


def _check_tokens(shape: PolicyShape, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= shape.vocab_size):
        raise ConfigError(f"token outside vocabulary of size {shape.vocab_size}")


def featurize(shape: PolicyShape, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Teacher-forced features ``(N, T, D)`` for prompts ``(N, P)`` and tokens ``(N, T)``."""
    prompts = np.asarray(prompts, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    N, T = tokens.shape
    if T > shape.max_len:
        raise ShapeError(f"sequence length {T} exceeds max_len {shape.max_len}")
    V, P = shape.vocab_size, shape.prompt_len
    X = np.zeros((N, T, shape.n_features), dtype=DTYPE)
    rows = np.arange(N)
    for s in range(P):
        X[rows, :, s * V + prompts[:, s]] = 1.0
    base = P * V
    X[:, np.arange(T), base + np.arange(T)] = 1.0
    prev = np.concatenate([np.full((N, 1), shape.bos), tokens[:, :-1]], axis=1) if T else tokens
    X[rows[:, None], np.arange(T)[None, :], base + shape.max_len + prev] = 1.0
    return X


def step_features(shape: PolicyShape, prompts: np.ndarray, t: int, prev: np.ndarray) -> np.ndarray:
    """Features ``(N, D)`` for a single decoding step."""
    N = prompts.shape[0]
    V, P = shape.vocab_size, shape.prompt_len
    X = np.zeros((N, shape.n_features), dtype=DTYPE)
    rows = np.arange(N)
    for s in range(P):
        X[rows, s * V + prompts[:, s]] = 1.0
    X[:, P * V + t] = 1.0
    X[rows, P * V + shape.max_len + prev] = 1.0
    return X


@dataclass
class TokenForward:
    """Log-probabilities of a teacher-forced batch plus what backprop needs."""

    logp_all: np.ndarray  # (N, T, V)
    logp: np.ndarray  # (N, T) at the realized tokens
    tokens: np.ndarray
    cache: MlpCache

    def backward(self, grad_logits: np.ndarray) -> MlpParams:
        N, T, V = self.logp_all.shape
        return mlp_backward(self.cache, grad_logits.reshape(N * T, V))


def token_forward(net: MlpParams, X: np.ndarray, tokens: np.ndarray) -> TokenForward:
    N, T, D = X.shape
    logits, cache = mlp_forward(net, X.reshape(N * T, D))
    logp_all = log_softmax(logits).reshape(N, T, -1)
    tokens = np.asarray(tokens, dtype=np.int64)
    logp = np.take_along_axis(logp_all, tokens[..., None], axis=-1)[..., 0]
    return TokenForward(logp_all, logp, tokens, cache)


def sequence_logprob(params: PolicyParams, instance: TaskInstance, tokens: Sequence[int]):
    """Log-probability of ``tokens`` as a response to ``instance``.

    Returns ``(total, per_step, forward)``; ``forward`` is the cache set for backprop.
    """
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    _check_tokens(params.shape, toks)
    X = featurize(params.shape, np.asarray(instance.prompt_tokens)[None, :], toks)
    fwd = token_forward(params.net, X, toks)
    per_step = fwd.logp[0]
    return float(per_step.sum()), per_step, fwd


@dataclass
class Trajectory:
    prompt_id: int
    tokens: tuple[int, ...]
    logprobs: np.ndarray
    ref_logprobs: np.ndarray
    rewards: np.ndarray
    total_reward: float
    advantage: float
    group_id: int


@dataclass
class RolloutBatch:
    """A vectorized group of sampled responses, ``N = n_prompts * G`` rows."""

    prompts: np.ndarray  # (N, P)
    tokens: np.ndarray  # (N, T)
    X: np.ndarray  # (N, T, D) teacher-forced features
    logp: np.ndarray  # (N, T) at sampling time
    group_ids: np.ndarray  # (N,)
    instance_index: np.ndarray  # (N,) index into the prompt list that was sampled
    ref_logp: np.ndarray | None = None
    rewards: np.ndarray | None = None  # (N, T)
    advantages: np.ndarray | None = None  # (N, T)
    returns: np.ndarray | None = None  # (N, T)

    @property
    def total_rewards(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _decode(params: PolicyParams, prompts: np.ndarray, length: int, uniforms: np.ndarray | None):
    shape = params.shape
    N = prompts.shape[0]
    tokens = np.zeros((N, length), dtype=np.int64)
    logp = np.zeros((N, length))
    prev = np.full(N, shape.bos, dtype=np.int64)
    for t in range(length):
        lp = log_softmax(mlp_forward(params.net, step_features(shape, prompts, t, prev))[0])
        if uniforms is None:
            tok = lp.argmax(axis=1)
        else:
            tok = sample_categorical_batch(lp, uniforms[:, t])
        tokens[:, t] = tok
        logp[:, t] = lp[np.arange(N), tok]
        prev = tok
    return tokens, logp


def sample_batch(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    G: int,
    rng: Rng,
    length: int | None = None,
) -> RolloutBatch:
    """Sample ``G`` responses per instance at temperature 1.

    Row ``i*G + g`` is candidate ``g`` for ``instances[i]`` and carries group id ``i``.
    Logged log-probs are recomputed teacher-forced so they match
    :func:`sequence_logprob` exactly.
    """
    if G < 1:
        raise ConfigError("group size must be at least 1")
    length = params.shape.max_len if length is None else length
    prompts = np.repeat(np.array([inst.prompt_tokens for inst in instances], dtype=np.int64), G, axis=0)
    uniforms = rng.random((prompts.shape[0], length))
    tokens, _ = _decode(params, prompts, length, uniforms)
    X = featurize(params.shape, prompts, tokens)
    fwd = token_forward(params.net, X, tokens)
    idx = np.repeat(np.arange(len(instances)), G)
    return RolloutBatch(prompts, tokens, X, fwd.logp.copy(), idx.copy(), idx)


def sample_group(
    params: PolicyParams,
    instance: TaskInstance,
    G: int,
    rng: Rng,
    group_id: int = 0,
) -> list[Trajectory]:
    """``G`` independent candidates for one prompt, all tagged ``group_id``.

    Rewards and advantages are left at zero; the trainer fills them in.
    """
    batch = sample_batch(params, [instance], G, rng)
    T = batch.tokens.shape[1]
    return [
        Trajectory(
            prompt_id=instance.prompt_id,
            tokens=tuple(int(t) for t in batch.tokens[g]),
            logprobs=batch.logp[g].copy(),
            ref_logprobs=np.zeros(T),
            rewards=np.zeros(T),
            total_reward=0.0,
            advantage=0.0,
            group_id=group_id,
        )
        for g in range(G)
    ]


def greedy_decode(params: PolicyParams, instances: Sequence[TaskInstance]) -> np.ndarray:
    """Argmax decoding, one response per instance."""
    prompts = np.array([inst.prompt_tokens for inst in instances], dtype=np.int64)
    return _decode(params, prompts, params.shape.max_len, None)[0]


def value_forward(value_net: MlpParams, X: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    N, T, D = X.shape
    v, cache = mlp_forward(value_net, X.reshape(N * T, D))
    return v.reshape(N, T), cache


def value_estimate(params: PolicyParams, instance: TaskInstance, step: int, prefix: Sequence[int] = ()) -> float:
    """Critic's baseline at decoding ``step``; ``prefix`` holds the tokens emitted so far."""
    if not 0 <= step < params.shape.max_len:
        raise ConfigError(f"step {step} outside [0, {params.shape.max_len})")
    prev = np.array([prefix[step - 1] if step > 0 and len(prefix) >= step else params.shape.bos])
    X = step_features(params.shape, np.asarray(instance.prompt_tokens)[None, :], step, prev)
    return float(mlp_forward(params.value_net, X)[0][0, 0])


@dataclass(frozen=True)
class ReferencePolicy:
    """Frozen copy of the actor network."""

    shape: PolicyShape
    net: MlpParams

    def token_logp(self, X: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        return token_forward(self.net, X, tokens).logp

    def token_forward(self, X: np.ndarray, tokens: np.ndarray) -> TokenForward:
        return token_forward(self.net, X, tokens)


def snapshot_reference(params: PolicyParams) -> ReferencePolicy:
    net = params.net.copy()
    for arr in net.arrays().values():
        arr.flags.writeable = False
    return ReferencePolicy(params.shape, net)


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Exact KL(p || q) along the last axis."""
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


def save_checkpoint(path: str | Path, params: PolicyParams) -> None:
    """Flat JSON map of named arrays (nested lists) plus the sigma scalars."""
    payload = {
        "shape": {
            "vocab_size": params.shape.vocab_size,
            "prompt_len": params.shape.prompt_len,
            "max_len": params.shape.max_len,
        }
    }
    for name, arr in params.arrays().items():
        payload[name] = float(arr) if arr.ndim == 0 else arr.tolist()
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> PolicyParams:
    payload = json.loads(Path(path).read_text())
    shape = PolicyShape(**payload.pop("shape"))
    arrays = {k: np.asarray(v, dtype=DTYPE) for k, v in payload.items()}
    return PolicyParams.from_arrays(shape, arrays)
