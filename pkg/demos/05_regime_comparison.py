"""Regime table on both tasks, plus the KL range/variance comparison of RL and Hybrid."""

import sys

from superrl.envs import EnvConfig
from superrl.trainer import TrainConfig, compare_regimes, kl_delta, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

for kind in ("SparseLock", "DenseChain"):
    env = EnvConfig(kind=kind)
    configs = [TrainConfig(env=env, regime=r, seed=seed) for r in ("RL", "SFT", "SFT_then_RL", "Hybrid", "SuperRL")]
    table = compare_regimes(configs)
    print(table.to_csv())
    for row in table.rows:
        print(f"  {row['regime']:12s} transfer EM={row['transfer_em']:.3f}  probe={row['choice']}")

sparse = EnvConfig(kind="SparseLock")
rl = train(TrainConfig(env=sparse, regime="RL", seed=seed))
hy = train(TrainConfig(env=sparse, regime="Hybrid", seed=seed))
print("KL delta, Hybrid vs RL (percent):", kl_delta(rl, hy))
