"""Training objectives with exact analytic gradients.

Every gradient-bearing function returns ``(loss, grads)`` where ``grads`` is a
dict keyed like :meth:`PolicyParams.arrays` (only the keys the loss touches).

Sign convention: the actor maximizes ``J = clipped surrogate + ent_coef * entropy``
and we minimize ``-J + kl_coef * KL``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .envs import TaskInstance
from .errors import ConfigError, NumericError
from .numerics import MlpParams, mlp_backward
from .policy import PolicyParams, RolloutBatch, featurize, token_forward, value_forward

FUSIONS = ("LogSigma", "Theta", "PerStep", "ExpertInject")


@dataclass(frozen=True)
class HybridConfig:
    fusion: str = "LogSigma"
    sigma_init: tuple[float, float] = (0.0, 0.0)
    alpha: float = 0.0
    lam: float = 1.0
    clip_eps: float = 0.2
    ent_coef: float = 0.01
    kl_coef: float = 0.001

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be non-negative")
        object.__setattr__(self, "sigma_init", tuple(float(s) for s in self.sigma_init))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_init"] = list(self.sigma_init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HybridConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown hybrid config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    l_actor: float | None = None
    l_sft: float | None = None
    l_kl: float | None = None
    l_value: float | None = None
    l_total: float | None = None
    w_pg: float | None = None
    w_sft: float | None = None


def _prefixed(prefix: str, g: MlpParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in g.arrays().items()}


# ---------------------------------------------------------------- supervised


@dataclass
class DemoBatch:
    prompts: np.ndarray
    tokens: np.ndarray
    X: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


def demo_batch(params: PolicyParams, demos: Sequence[TaskInstance]) -> DemoBatch:
    if len(demos) == 0:
        raise ConfigError("SFT batch is empty")
    prompts = np.array([d.prompt_tokens for d in demos], dtype=np.int64)
    tokens = np.array([d.oracle_trace for d in demos], dtype=np.int64)
    return DemoBatch(prompts, tokens, featurize(params.shape, prompts, tokens))


def sft_loss(params: PolicyParams, demos: Sequence[TaskInstance] | DemoBatch):
    """Mean per-token negative log-likelihood of the expert traces."""
    batch = demos if isinstance(demos, DemoBatch) else demo_batch(params, demos)
    if len(batch) == 0:
        raise ConfigError("SFT batch is empty")
    fwd = token_forward(params.net, batch.X, batch.tokens)
    n = fwd.logp.size
    loss = -float(fwd.logp.sum()) / n
    g = np.exp(fwd.logp_all)
    np.put_along_axis(g, batch.tokens[..., None], np.take_along_axis(g, batch.tokens[..., None], -1) - 1.0, -1)
    g /= n
    return loss, _prefixed("net", fwd.backward(g))


# ---------------------------------------------------------------- advantages


def grpo_advantages(group_rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within one group (population std).

    Degenerate groups (one member, or zero spread) get all-zero advantages.
    """
    r = np.asarray(group_rewards, dtype=np.float64)
    # test equality on the rewards themselves: centering a constant group can
    # leave rounding residue that a std == 0 check would miss
    if r.size <= 1 or np.all(r == r[0]):
        return np.zeros_like(r)
    centered = r - r.mean()
    # scale before squaring so tiny spreads do not underflow to a zero std
    scale = np.abs(centered).max()
    u = centered / scale
    return u / np.sqrt(np.mean(u**2))


def grpo_batch_advantages(total_rewards: np.ndarray, group_ids: np.ndarray) -> np.ndarray:
    out = np.zeros(len(total_rewards))
    for gid in np.unique(group_ids):
        mask = group_ids == gid
        out[mask] = grpo_advantages(total_rewards[mask])
    return out


def mc_returns(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted return-to-go along the last axis."""
    return np.flip(np.cumsum(np.flip(rewards, -1), -1), -1)


# ---------------------------------------------------------------- KL


def kl_estimate_k3(logp_cur, logp_ref):
    """Low-variance KL sample estimate ``(r - 1) - log r`` with ``r = p_ref / p_cur``."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_cur, dtype=np.float64)
    out = np.expm1(d) - d
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- PPO


def clipped_surrogate(ratio, advantage, clip_eps: float = 0.2):
    """Per-token ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def _entropy_terms(logp_all: np.ndarray):
    p = np.exp(logp_all)
    H = -(p * logp_all).sum(-1)
    # dH/dz_j = -p_j (log p_j + H)
    dH = -p * (logp_all + H[..., None])
    return H, dH


def ppo_objective(params: PolicyParams, batch: RolloutBatch, config: HybridConfig):
    """Clipped surrogate with entropy bonus and k3 KL penalty, averaged per token.

    Uses ``batch.logp`` as the behaviour log-probs, ``batch.advantages`` (N, T),
    and ``batch.ref_logp`` for the KL term. Returns ``(loss, grads, info)``.
    """
    fwd = token_forward(params.net, batch.X, batch.tokens)
    log_ratio = fwd.logp - batch.logp
    ratio = np.exp(log_ratio)
    bad = ~np.isfinite(ratio)
    if bad.any():
        t = int(np.argwhere(bad)[0][1])
        raise NumericError(f"non-finite importance ratio at token {t}")
    A = batch.advantages
    n = ratio.size
    eps = config.clip_eps
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_branch = ratio * A <= clipped * A
    surr = np.where(unclipped_branch, ratio * A, clipped * A)
    # the clipped branch is constant in the log-prob whenever it is strictly smaller
    dsurr = np.where(unclipped_branch, ratio * A, 0.0)
    in_range = (ratio >= 1.0 - eps) & (ratio <= 1.0 + eps)

    H, dH = _entropy_terms(fwd.logp_all)

    if batch.ref_logp is None or config.kl_coef == 0.0:
        k3 = np.zeros_like(ratio)
        dk3 = np.zeros_like(ratio)
    else:
        k3 = kl_estimate_k3(fwd.logp, batch.ref_logp)
        dk3 = 1.0 - np.exp(batch.ref_logp - fwd.logp)

    l_surr = float(surr.sum()) / n
    l_ent = float(H.sum()) / n
    l_kl = float(k3.sum()) / n
    loss = -l_surr - config.ent_coef * l_ent + config.kl_coef * l_kl
    if not np.isfinite(loss):
        raise NumericError("PPO loss is not finite")

    # gradient w.r.t. token log-prob, then through log-softmax
    dlogp = (-dsurr + config.kl_coef * dk3) / n
    p = np.exp(fwd.logp_all)
    g = -dlogp[..., None] * p
    np.put_along_axis(
        g, batch.tokens[..., None], np.take_along_axis(g, batch.tokens[..., None], -1) + dlogp[..., None], -1
    )
    g -= config.ent_coef * dH / n
    info = {
        "surrogate": l_surr,
        "entropy": l_ent,
        "kl": l_kl,
        "clip_frac": float((~in_range).mean()),
    }
    return loss, _prefixed("net", fwd.backward(g)), info


def value_loss(params: PolicyParams, batch: RolloutBatch):
    """Half mean squared error between the critic and Monte-Carlo returns."""
    v, cache = value_forward(params.value_net, batch.X)
    diff = v - batch.returns
    n = diff.size
    loss = 0.5 * float((diff**2).sum()) / n
    g = (diff / n).reshape(-1, 1)
    return loss, _prefixed("value", mlp_backward(cache, g))


# ---------------------------------------------------------------- fusion


class LogSigmaResult(NamedTuple):
    l_total: float
    d_sigma_pg: float
    d_sigma_sft: float
    w_pg: float
    w_sft: float


def hybrid_log_sigma(l_actor: float, l_sft: float, sigma_pg: float, sigma_sft: float) -> LogSigmaResult:
    """Uncertainty-weighted sum ``e^{-2 s_pg} L_a + e^{-2 s_sft} L_s + s_pg + s_sft``."""
    w_pg = float(np.exp(-2.0 * sigma_pg))
    w_sft = float(np.exp(-2.0 * sigma_sft))
    total = w_pg * l_actor + w_sft * l_sft + float(sigma_pg) + float(sigma_sft)
    return LogSigmaResult(total, -2.0 * w_pg * l_actor + 1.0, -2.0 * w_sft * l_sft + 1.0, w_pg, w_sft)


class ThetaResult(NamedTuple):
    l_total: float
    w_pg: float
    w_sft: float
    d_alpha: float


def hybrid_theta(l_actor: float, l_sft: float, alpha: float) -> ThetaResult:
    """Convex mix with ``w_pg = sigmoid(alpha)``."""
    if alpha >= 0:
        w_pg = 1.0 / (1.0 + np.exp(-alpha))
    else:
        e = np.exp(alpha)
        w_pg = e / (1.0 + e)
    w_pg = float(w_pg)
    w_sft = 1.0 - w_pg
    total = w_pg * l_actor + w_sft * l_sft
    return ThetaResult(total, w_pg, w_sft, w_pg * w_sft * (l_actor - l_sft))


def weighted_sft(l_sft: float, sigma_sft: float) -> tuple[float, float, float]:
    """``(e^{-2s} L + s, d/ds, e^{-2s})`` for the sequential SFT step."""
    w = float(np.exp(-2.0 * sigma_sft))
    return w * l_sft + float(sigma_sft), -2.0 * w * l_sft + 1.0, w


def per_step_sft_update(params: PolicyParams, demos, optimizer) -> LossBreakdown:
    """Second optimizer step of a batch: descend ``e^{-2 s_sft} L_sft + s_sft``.

    Updates ``params`` in place through ``optimizer`` (an :class:`Adam`).
    Must run after the policy-gradient step on the same batch.
    """
    l_sft, g = sft_loss(params, demos)
    total, d_sigma, w = weighted_sft(l_sft, float(params.sigma_sft))
    grads = {k: w * v for k, v in g.items()}
    grads["sigma_sft"] = np.array(d_sigma)
    optimizer.step(params.arrays(), grads)
    return LossBreakdown(l_sft=l_sft, l_total=total, w_sft=w)


# ---------------------------------------------------------------- expert injection


@dataclass
class MixedBatch:
    rollouts: RolloutBatch
    expert: DemoBatch | None
    expert_weights: np.ndarray  # (n_expert,) = lam * r / n_expert


def expert_injection_batch(
    policy_batch: RolloutBatch,
    params: PolicyParams,
    experts: Sequence[tuple[TaskInstance, float]],
    lam: float,
) -> MixedBatch:
    """Attach scored expert traces to a rollout batch.

    ``experts`` holds ``(instance, reward)`` pairs scored by the environment.
    Each contributes ``lam * reward * log pi(trace | prompt)`` to the objective,
    averaged over the expert items.
    """
    if not experts:
        return MixedBatch(policy_batch, None, np.zeros(0))
    db = demo_batch(params, [inst for inst, _ in experts])
    r = np.array([float(rw) for _, rw in experts])
    return MixedBatch(policy_batch, db, lam * r / len(experts))


def expert_injection_objective(params: PolicyParams, mixed: MixedBatch, config: HybridConfig):
    """Rollout PPO loss minus the weighted expert sequence log-likelihood."""
    loss, grads, info = ppo_objective(params, mixed.rollouts, config)
    expert_term = 0.0
    if mixed.expert is not None and np.any(mixed.expert_weights != 0):
        fwd = token_forward(params.net, mixed.expert.X, mixed.expert.tokens)
        seq_lp = fwd.logp.sum(axis=1)
        expert_term = float((mixed.expert_weights * seq_lp).sum())
        # d(-w * logp_tok)/dz = -w (onehot - p)
        w = mixed.expert_weights[:, None, None]
        g = w * np.exp(fwd.logp_all)
        tok = mixed.expert.tokens[..., None]
        np.put_along_axis(g, tok, np.take_along_axis(g, tok, -1) - w, -1)
        for k, v in _prefixed("net", fwd.backward(g)).items():
            grads[k] = grads[k] + v
    info = dict(info, expert_term=expert_term)
    return loss - expert_term, grads, info
