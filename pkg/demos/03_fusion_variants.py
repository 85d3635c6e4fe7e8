"""Four ways to mix the policy-gradient loss with SFT on the sparse lock."""

import numpy as np

from superrl.envs import EnvConfig
from superrl.losses import HybridConfig, hybrid_log_sigma
from superrl.trainer import TrainConfig, train

# the uncertainty weights settle where d/dsigma = 0, i.e. exp(-2 sigma) = 1 / (2 L)
for loss in (0.5, 2.0, 8.0):
    star = 0.5 * np.log(2 * loss)
    res = hybrid_log_sigma(loss, 1.0, star, 0.0)
    print(f"L={loss}: sigma*={star:+.4f}  weight={res.w_pg:.4f}  d/dsigma={res.d_sigma_pg:.1e}")

env = EnvConfig(kind="SparseLock")
for fusion in ("LogSigma", "Theta", "PerStep", "ExpertInject"):
    log = train(TrainConfig(env=env, regime="Hybrid", hybrid=HybridConfig(fusion=fusion), seed=0))
    last = log.steps[-1]
    print(f"{fusion:12s} EM={log.final_em:.3f}  w_pg={last['w_pg']:.3f}  w_sft={last['w_sft']:.3f}")
