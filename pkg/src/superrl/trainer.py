"""Training regimes, evaluation and run telemetry.

Regimes:

``RL``           pure policy-gradient updates (GRPO or PPO)
``SFT``          epochs over the demo set with per-epoch eval and best-checkpoint pick
``SFT_then_RL``  the SFT baseline followed by RL from its best checkpoint
``Hybrid``       every update fuses the PG loss with the SFT loss
``SuperRL``      a reward-density probe, then RL or Hybrid for the rest of the budget
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import (
    Dataset,
    EnvConfig,
    TaskInstance,
    make_dataset,
    make_transfer_set,
    solves,
    step_rewards,
)
from .errors import ConfigError, NumericError
from .losses import (
    HybridConfig,
    LossBreakdown,
    demo_batch,
    expert_injection_batch,
    expert_injection_objective,
    grpo_batch_advantages,
    hybrid_log_sigma,
    hybrid_theta,
    kl_estimate_k3,
    mc_returns,
    per_step_sft_update,
    ppo_objective,
    sft_loss,
    value_loss,
)
from .numerics import Adam, Rng
from .policy import (
    PolicyParams,
    PolicyShape,
    RolloutBatch,
    categorical_kl,
    greedy_decode,
    init_policy,
    sample_batch,
    snapshot_reference,
    token_forward,
    value_forward,
)
from .switch import (
    HYBRID,
    SwitchConfig,
    decide_actor,
    default_config,
    probe_statistics,
    run_probe,
    switch_config_from_dict,
    switch_config_to_dict,
)

ALGOS = ("GRPO", "PPO")
REGIMES = ("RL", "SFT", "SFT_then_RL", "Hybrid", "SuperRL")
CSV_HEADER = ("regime", "env", "em", "kl_min", "kl_max", "kl_var")


@dataclass(frozen=True)
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    algo: str = "GRPO"
    regime: str = "SuperRL"
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    batch_size: int = 32
    group_size: int = 5
    steps: int = 500
    eval_every: int = 5
    lr: float = 1e-2
    seed: int = 0
    n_train: int = 1024
    n_test: int = 256
    n_transfer: int = 128
    hidden: int = 32
    sft_epochs: int = 25
    update_epochs: int = 1
    switch: SwitchConfig | None = None
    # experimental: re-run the switch decision every N steps after the probe (0 = never)
    reprobe_every: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.group_size < 1:
            raise ConfigError("group_size must be at least 1")
        if self.algo == "GRPO" and self.group_size < 2 and self.regime != "SFT":
            raise ConfigError("GRPO needs group_size >= 2 for non-degenerate advantages")
        if self.batch_size < 1 or self.eval_every < 1 or self.update_epochs < 1:
            raise ConfigError("batch_size, eval_every and update_epochs must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    @property
    def switch_config(self) -> SwitchConfig:
        return self.switch if self.switch is not None else default_config(self.batch_size)

    @property
    def label(self) -> str:
        if self.regime == "Hybrid" and self.hybrid.fusion != "LogSigma":
            return f"Hybrid-{self.hybrid.fusion}"
        return self.regime

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["env"] = self.env.to_dict()
        d["hybrid"] = self.hybrid.to_dict()
        d["switch"] = None if self.switch is None else switch_config_to_dict(self.switch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "env" in d:
            d["env"] = EnvConfig.from_dict(d["env"])
        if "hybrid" in d:
            d["hybrid"] = HybridConfig.from_dict(d["hybrid"])
        if d.get("switch") is not None:
            d["switch"] = switch_config_from_dict(d["switch"])
        return cls(**d)


def _f(x):
    return None if x is None else float(x)


@dataclass
class RunLog:
    config: dict
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    probe: dict | None = None
    final_params: PolicyParams | None = field(default=None, repr=False, compare=False)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        if self.probe is not None:
            lines.append(json.dumps({"type": "probe", **self.probe}, sort_keys=True))
        lines += [json.dumps({"type": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"type": "eval", **r}, sort_keys=True) for r in self.evals]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunLog":
        log = cls(config={})
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "config":
                log.config = rec
            elif kind == "probe":
                log.probe = rec
            elif kind == "step":
                log.steps.append(rec)
            elif kind == "eval":
                log.evals.append(rec)
        return log

    @property
    def final_em(self) -> float:
        return self.evals[-1]["em_accuracy"] if self.evals else float("nan")

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.steps if r.get(key) is not None], dtype=float)


def evaluate(params: PolicyParams, testset: Sequence[TaskInstance], env: EnvConfig | None = None) -> float:
    """Exact-match accuracy under greedy decoding."""
    if len(testset) == 0:
        raise ConfigError("test set is empty")
    env = env or EnvConfig()
    responses = greedy_decode(params, testset)
    hits = sum(solves(env, resp, inst) for resp, inst in zip(responses, testset))
    return hits / len(testset)


def kl_stats(log: RunLog) -> tuple[float, float, float]:
    """(min, max, population variance) of the per-step KL series."""
    kl = log.series("kl_mean")
    if kl.size < 2:
        raise ConfigError("need at least two logged steps for KL statistics")
    return float(kl.min()), float(kl.max()), float(kl.var())


def kl_delta(rl_log: RunLog, hybrid_log: RunLog) -> dict:
    """Relative change (percent) of the hybrid KL maximum and variance versus RL."""
    _, rl_max, rl_var = kl_stats(rl_log)
    _, hy_max, hy_var = kl_stats(hybrid_log)
    return {
        "max_delta_pct": 100.0 * (hy_max - rl_max) / rl_max if rl_max else float("nan"),
        "var_delta_pct": 100.0 * (hy_var - rl_var) / rl_var if rl_var else float("nan"),
    }


def smooth_ema(series: Sequence[float], decay: float) -> np.ndarray:
    """``s_t = decay * s_{t-1} + (1 - decay) * x_t`` seeded with ``s_0 = x_0``."""
    if not 0.0 < decay < 1.0:
        raise ConfigError("decay must lie in (0, 1)")
    x = np.asarray(series, dtype=float)
    out = np.empty_like(x)
    for i, v in enumerate(x):
        out[i] = v if i == 0 else decay * out[i - 1] + (1.0 - decay) * v
    return out


class Trainer:
    """Mutable training state for one run.

    Holds the policy, the optimizer, the frozen reference, and the log. The
    regime functions below drive it; :func:`run_probe` only needs ``rl_step``.
    """

    def __init__(self, config: TrainConfig, dataset: Dataset | None = None):
        self.config = config
        self.root = Rng(config.seed)
        env = config.env
        needs_demos = config.regime in ("SFT", "SFT_then_RL", "Hybrid", "SuperRL")
        if dataset is None:
            dataset = make_dataset(env, config.n_train, config.n_test, self.root.split(0), require_demos=needs_demos)
        self.train_set, self.test_set, self.demos = dataset
        if needs_demos and len(self.demos) == 0:
            raise ConfigError(f"regime {config.regime} needs a non-empty demo set")
        self.shape = PolicyShape(env.vocab_size, env.answer_len, env.trace_len)
        self.params = init_policy(self.shape, self.root.split(1), config.hidden, config.hybrid.sigma_init)
        self.opt = Adam(config.lr)
        self.ref = snapshot_reference(self.params)
        self.log = RunLog(config=config.to_dict())
        self.step = 0
        self._draws = 0

    # -- bookkeeping -------------------------------------------------------

    def _rng(self, stream: int) -> Rng:
        self._draws += 1
        return self.root.split(stream).split(self._draws)

    def arrays(self) -> dict[str, np.ndarray]:
        return self.params.arrays()

    def _apply(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}", step=self.step + 1)
        self.opt.step(self.arrays(), grads)

    def _record(self, mean_reward, kl_mean, lb: LossBreakdown, actor: str) -> None:
        for name in ("l_actor", "l_sft", "l_total"):
            v = getattr(lb, name)
            if v is not None and not math.isfinite(v):
                raise NumericError(f"{name} is not finite", step=self.step + 1)
        self.step += 1
        self.log.steps.append(
            {
                "step": self.step,
                "actor": actor,
                "mean_reward": _f(mean_reward),
                "kl_mean": _f(kl_mean),
                "l_actor": _f(lb.l_actor),
                "l_sft": _f(lb.l_sft),
                "l_value": _f(lb.l_value),
                "w_pg": _f(lb.w_pg),
                "w_sft": _f(lb.w_sft),
                "sigma_pg": float(self.params.sigma_pg),
                "sigma_sft": float(self.params.sigma_sft),
            }
        )
        if self.step % self.config.eval_every == 0:
            self.record_eval()

    def record_eval(self) -> float:
        em = evaluate(self.params, self.test_set, self.config.env)
        if self.log.evals and self.log.evals[-1]["step"] == self.step:
            self.log.evals[-1]["em_accuracy"] = em
        else:
            self.log.evals.append({"step": self.step, "em_accuracy": em})
        return em

    # -- rollouts ----------------------------------------------------------

    def rollout(self) -> RolloutBatch:
        cfg = self.config
        n = len(self.train_set)
        pick = self._rng(3).choice(n, size=min(cfg.batch_size, n), replace=False)
        instances = [self.train_set[i] for i in pick]
        batch = sample_batch(self.params, instances, cfg.group_size, self._rng(2))
        batch.rewards = np.stack(
            [step_rewards(cfg.env, batch.tokens[r], instances[batch.instance_index[r]]) for r in range(len(batch))]
        )
        batch.ref_logp = self.ref.token_logp(batch.X, batch.tokens)
        if cfg.algo == "GRPO":
            adv = grpo_batch_advantages(batch.total_rewards, batch.group_ids)
            batch.advantages = np.repeat(adv[:, None], batch.tokens.shape[1], axis=1)
        else:
            batch.returns = mc_returns(batch.rewards)
            values, _ = value_forward(self.params.value_net, batch.X)
            batch.advantages = batch.returns - values
        return batch

    def _actor_loss(self, batch: RolloutBatch):
        """PG loss and grads; PPO adds the (separately parameterized) critic loss."""
        hc = self.config.hybrid
        loss, grads, info = ppo_objective(self.params, batch, hc)
        l_value = None
        if self.config.algo == "PPO":
            l_value, vg = value_loss(self.params, batch)
            grads.update(vg)
        return loss, grads, info, l_value

    def _demo_batch(self):
        n = len(self.demos)
        pick = self._rng(4).choice(n, size=min(self.config.batch_size, n), replace=False)
        self._demo_instances = [self.demos.entries[i] for i in pick]
        return demo_batch(self.params, self._demo_instances)

    # -- update steps ------------------------------------------------------

    def rl_step(self) -> float:
        batch = self.rollout()
        kl_mean = float(np.mean(kl_estimate_k3(batch.logp, batch.ref_logp)))
        for _ in range(self.config.update_epochs):
            loss, grads, _, l_value = self._actor_loss(batch)
            self._apply(grads)
        mean_reward = float(batch.total_rewards.mean())
        self._record(mean_reward, kl_mean, LossBreakdown(l_actor=loss, l_value=l_value, l_total=loss), "RL")
        return mean_reward

    def hybrid_step(self) -> float:
        fusion = self.config.hybrid.fusion
        batch = self.rollout()
        kl_mean = float(np.mean(kl_estimate_k3(batch.logp, batch.ref_logp)))
        demos = self._demo_batch()
        for _ in range(self.config.update_epochs):
            if fusion == "LogSigma":
                lb = self._log_sigma_update(batch, demos)
            elif fusion == "Theta":
                lb = self._theta_update(batch, demos)
            elif fusion == "PerStep":
                lb = self._per_step_update(batch, demos)
            else:
                lb = self._expert_inject_update(batch, demos)
        mean_reward = float(batch.total_rewards.mean())
        self._record(mean_reward, kl_mean, lb, f"Hybrid-{fusion}")
        return mean_reward

    def _log_sigma_update(self, batch, demos) -> LossBreakdown:
        l_a, g_a, _, l_value = self._actor_loss(batch)
        l_s, g_s = sft_loss(self.params, demos)
        res = hybrid_log_sigma(l_a, l_s, float(self.params.sigma_pg), float(self.params.sigma_sft))
        grads = {k: res.w_pg * g_a[k] + res.w_sft * g_s[k] for k in g_s}
        grads.update({k: v for k, v in g_a.items() if k.startswith("value.")})
        grads["sigma_pg"] = np.array(res.d_sigma_pg)
        grads["sigma_sft"] = np.array(res.d_sigma_sft)
        self._apply(grads)
        return LossBreakdown(l_a, l_s, None, l_value, res.l_total, res.w_pg, res.w_sft)

    def _theta_update(self, batch, demos) -> LossBreakdown:
        l_a, g_a, _, l_value = self._actor_loss(batch)
        l_s, g_s = sft_loss(self.params, demos)
        res = hybrid_theta(l_a, l_s, self.config.hybrid.alpha)
        grads = {k: res.w_pg * g_a[k] + res.w_sft * g_s[k] for k in g_s}
        grads.update({k: v for k, v in g_a.items() if k.startswith("value.")})
        self._apply(grads)
        return LossBreakdown(l_a, l_s, None, l_value, res.l_total, res.w_pg, res.w_sft)

    def _per_step_update(self, batch, demos) -> LossBreakdown:
        l_a, g_a, _, l_value = self._actor_loss(batch)
        self._apply(g_a)
        sft = per_step_sft_update(self.params, demos, _CheckedOptimizer(self))
        return LossBreakdown(l_a, sft.l_sft, None, l_value, l_a + sft.l_total, 1.0, sft.w_sft)

    def _expert_inject_update(self, batch, demos) -> LossBreakdown:
        env = self.config.env
        experts = [
            (inst, float(step_rewards(env, inst.oracle_trace, inst).sum())) for inst in self._demo_instances
        ]
        mixed = expert_injection_batch(batch, self.params, experts, self.config.hybrid.lam)
        loss, grads, info = expert_injection_objective(self.params, mixed, self.config.hybrid)
        l_value = None
        if self.config.algo == "PPO":
            l_value, vg = value_loss(self.params, batch)
            grads.update(vg)
        self._apply(grads)
        return LossBreakdown(l_actor=loss + info["expert_term"], l_total=loss, l_value=l_value, w_pg=1.0,
                             w_sft=self.config.hybrid.lam)

    def sft_step(self, demos) -> float:
        db = demos if not isinstance(demos, list) else demo_batch(self.params, demos)
        fwd = token_forward(self.params.net, db.X, db.tokens)
        ref = self.ref.token_forward(db.X, db.tokens)
        # no rollouts here: log the exact per-state KL on demo prefixes
        kl_mean = float(categorical_kl(fwd.logp_all, ref.logp_all).mean())
        loss, grads = sft_loss(self.params, db)
        self._apply(grads)
        self._record(None, kl_mean, LossBreakdown(l_sft=loss, l_total=loss), "SFT")
        return loss

    def set_reference(self) -> None:
        self.ref = snapshot_reference(self.params)


class _CheckedOptimizer:
    """Adapter so the sequential SFT step goes through the trainer's NaN guard."""

    def __init__(self, trainer: Trainer):
        self.trainer = trainer

    def step(self, params, grads):
        self.trainer._apply(grads)


# ---------------------------------------------------------------- regimes


def _finish(tr: Trainer) -> RunLog:
    tr.record_eval()
    tr.log.final_params = tr.params
    return tr.log


def _sft_stage(tr: Trainer) -> None:
    """Epochs over the demos, eval each epoch, then restore the best checkpoint."""
    cfg = tr.config
    entries = list(tr.demos.entries)
    best_em, best_params, best_epoch = -1.0, tr.params.copy(), 0
    for epoch in range(cfg.sft_epochs):
        order = tr.root.split(5).split(epoch).permutation(len(entries))
        for start in range(0, len(entries), cfg.batch_size):
            chunk = [entries[i] for i in order[start:start + cfg.batch_size]]
            tr.sft_step(chunk)
        em = tr.record_eval()
        tr.log.evals[-1]["epoch"] = epoch + 1
        if em > best_em:  # ties keep the earliest epoch
            best_em, best_params, best_epoch = em, tr.params.copy(), epoch + 1
    # the final eval re-scores this step with the restored checkpoint, so keep the raw value
    tr.log.evals[-1].update(best_epoch=best_epoch, last_epoch_em=tr.log.evals[-1]["em_accuracy"])
    for k, v in best_params.arrays().items():
        tr.params.arrays()[k][...] = v


def train_rl(tr: Trainer, steps: int) -> None:
    for _ in range(steps):
        tr.rl_step()


def _guarded(tr: Trainer, body) -> RunLog:
    """Run a regime body; numeric failures abort with the index of the failing update."""
    try:
        body()
    except NumericError as exc:
        if exc.step is None:
            raise NumericError(str(exc), step=tr.step + 1) from exc
        raise
    return _finish(tr)


def train_sft_then_rl(config: TrainConfig, rl_steps: int | None = None, dataset: Dataset | None = None) -> RunLog:
    """SFT baseline, then RL initialized (and KL-anchored) at the best SFT checkpoint."""
    tr = Trainer(config, dataset)
    tr.record_eval()

    def body():
        _sft_stage(tr)
        tr.set_reference()
        train_rl(tr, config.steps if rl_steps is None else rl_steps)

    return _guarded(tr, body)


def _superrl(tr: Trainer) -> None:
    cfg = tr.config
    sw = cfg.switch_config
    if sw.k > cfg.steps:
        raise ConfigError(f"probe length {sw.k} exceeds the step budget {cfg.steps}")
    stats, choice = run_probe(tr, sw)
    tr.log.probe = choice.report()
    hybrid = choice.is_hybrid
    for i in range(cfg.steps - sw.k):
        tr.hybrid_step() if hybrid else tr.rl_step()
        if cfg.reprobe_every and (i + 1) % cfg.reprobe_every == 0:
            recent = [r["mean_reward"] for r in tr.log.steps[-sw.k:]]
            hybrid = decide_actor(probe_statistics(recent, sw.m), sw).choice == HYBRID


def train(config: TrainConfig, dataset: Dataset | None = None) -> RunLog:
    """Run the configured regime and return its log (``final_params`` attached)."""
    if config.regime == "SFT_then_RL":
        return train_sft_then_rl(config, dataset=dataset)
    tr = Trainer(config, dataset)
    tr.record_eval()

    def body():
        if config.regime == "RL":
            train_rl(tr, config.steps)
        elif config.regime == "SFT":
            _sft_stage(tr)
        elif config.regime == "Hybrid":
            for _ in range(config.steps):
                tr.hybrid_step()
        else:
            _superrl(tr)

    return _guarded(tr, body)


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r[c] for c in CSV_HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True)


def summarize(config: TrainConfig, log: RunLog) -> dict:
    kmin, kmax, kvar = kl_stats(log)
    transfer = make_transfer_set(config.env, config.n_transfer, Rng(config.seed).split(0))
    ems = [e["em_accuracy"] for e in log.evals]
    return {
        "regime": config.label,
        "env": config.env.kind,
        "seed": config.seed,
        "em": log.final_em,
        "smoothed_em": float(smooth_ema(ems, 0.8)[-1]),
        "transfer_em": evaluate(log.final_params, transfer, config.env) if transfer else None,
        "kl_min": kmin,
        "kl_max": kmax,
        "kl_var": kvar,
        "choice": None if log.probe is None else log.probe["choice"],
    }


def run_and_summarize(config: TrainConfig) -> dict:
    return summarize(config, train(config))


def compare_regimes(configs: Sequence[TrainConfig], workers: int = 1) -> ComparisonTable:
    """Train each config and tabulate EM (in-domain and transfer) with KL stats.

    Rows are sorted by regime label; all configs must share one environment.
    With ``workers > 1`` the runs go to separate processes; the table is the same.
    """
    if not configs:
        raise ConfigError("no configs to compare")
    env = configs[0].env
    if any(c.env != env for c in configs):
        raise ConfigError("configs must share the same environment")
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_and_summarize, configs))
    else:
        rows = [run_and_summarize(c) for c in configs]
    rows.sort(key=lambda r: (r["regime"], r["seed"]))
    return ComparisonTable(rows)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
