"""Adaptive switching between vanilla policy-gradient training and an
uncertainty-weighted SFT+RL hybrid actor, on synthetic lock tasks."""

from .envs import DENSE, SPARSE, EnvConfig, make_dataset
from .losses import HybridConfig
from .switch import HYBRID, VANILLA, default_config
from .trainer import RunLog, TrainConfig, compare_regimes, evaluate, kl_stats, train

__all__ = [
    "DENSE",
    "SPARSE",
    "HYBRID",
    "VANILLA",
    "EnvConfig",
    "HybridConfig",
    "RunLog",
    "TrainConfig",
    "compare_regimes",
    "default_config",
    "evaluate",
    "kl_stats",
    "make_dataset",
    "train",
]
