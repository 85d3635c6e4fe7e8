"""Reward-density probe that picks the training actor.

A short run of pure RL steps records the mean batch reward per step. If the
reward rarely increases *and* the recent average stays low, the task is treated
as sparse and the hybrid actor takes over; otherwise vanilla RL continues.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError

VANILLA = "VanillaRL"
HYBRID = "HybridActor"


@dataclass(frozen=True)
class SwitchConfig:
    k: int
    m: int
    increase_threshold: int
    avg_threshold: float

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("probe length k must be at least 1")
        if not 1 <= self.m <= self.k:
            raise ConfigError("recent window m must satisfy 1 <= m <= k")
        if self.increase_threshold < 0 or self.avg_threshold < 0:
            raise ConfigError("thresholds must be non-negative")


@dataclass(frozen=True)
class ProbeStats:
    avg_rewards: tuple[float, ...]
    increase_num: int
    recent_avg_reward: float


@dataclass(frozen=True)
class ActorChoice:
    choice: str
    stats: ProbeStats
    config: SwitchConfig

    @property
    def is_hybrid(self) -> bool:
        return self.choice == HYBRID

    def report(self) -> dict:
        return {
            "avg_rewards": list(self.stats.avg_rewards),
            "increase_num": self.stats.increase_num,
            "recent_avg_reward": self.stats.recent_avg_reward,
            "thresholds": {
                "k": self.config.k,
                "m": self.config.m,
                "increase_threshold": self.config.increase_threshold,
                "avg_threshold": self.config.avg_threshold,
            },
            "choice": self.choice,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True)


def default_config(batch_size: int) -> SwitchConfig:
    """Thresholds tuned per batch-size regime (strictly above 32 counts as large)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if batch_size > 32:
        return SwitchConfig(k=10, m=10, increase_threshold=3, avg_threshold=0.1)
    return SwitchConfig(k=50, m=10, increase_threshold=20, avg_threshold=0.2)


def probe_statistics(avg_rewards: Sequence[float], m: int) -> ProbeStats:
    """Count strict step-over-step increases and average the last ``m`` entries."""
    r = [float(x) for x in avg_rewards]
    if m < 1 or len(r) < m:
        raise ConfigError(f"need at least m={m} probe rewards, got {len(r)}")
    increases = sum(1 for a, b in zip(r, r[1:]) if b > a)
    recent = float(np.mean(r[-m:]))
    return ProbeStats(tuple(r), increases, recent)


def decide_actor(stats: ProbeStats, config: SwitchConfig) -> ActorChoice:
    sparse = stats.increase_num < config.increase_threshold and stats.recent_avg_reward < config.avg_threshold
    return ActorChoice(HYBRID if sparse else VANILLA, stats, config)


class ProbeTarget(Protocol):
    def rl_step(self) -> float:
        """Run one pure-RL update and return the mean batch reward."""


def run_probe(trainer: ProbeTarget, config: SwitchConfig) -> tuple[ProbeStats, ActorChoice]:
    """Run ``config.k`` RL updates on ``trainer`` and classify reward density."""
    if config.k < 1:
        raise ConfigError("probe length k must be at least 1")
    rewards = [trainer.rl_step() for _ in range(config.k)]
    stats = probe_statistics(rewards, config.m)
    return stats, decide_actor(stats, config)


def switch_config_from_dict(d: dict) -> SwitchConfig:
    unknown = set(d) - set(SwitchConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown switch config keys: {sorted(unknown)}")
    return SwitchConfig(**d)


def switch_config_to_dict(c: SwitchConfig) -> dict:
    return asdict(c)
