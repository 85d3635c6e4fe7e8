"""The reward-density probe: published probe sequences, then live probes on both tasks."""

from superrl.envs import EnvConfig
from superrl.switch import SwitchConfig, decide_actor, probe_statistics, run_probe
from superrl.trainer import Trainer, TrainConfig

thresholds = SwitchConfig(k=10, m=10, increase_threshold=3, avg_threshold=0.1)

gsm8k = [0.0617, 0.0570, 0.0828, 0.1305, 0.1820, 0.2398, 0.3148, 0.3695, 0.4609, 0.4984]
hitab = [0.0008, 0.0008, 0.0023, 0, 0, 0, 0, 0, 0, 0]
for name, seq in (("GSM8K", gsm8k), ("HiTab", hitab)):
    choice = decide_actor(probe_statistics(seq, 10), thresholds)
    print(name, choice.to_json())

# live probes use the small-batch defaults (50 steps, window 10, thresholds 20 / 0.2)
for kind in ("DenseChain", "SparseLock"):
    cfg = TrainConfig(env=EnvConfig(kind=kind))
    stats, choice = run_probe(Trainer(cfg), cfg.switch_config)
    print(f"{kind:10s} increases={stats.increase_num:2d} recent_avg={stats.recent_avg_reward:.4f} -> {choice.choice}")
