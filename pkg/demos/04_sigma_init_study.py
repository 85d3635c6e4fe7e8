"""Initial log-deviations (sigma_pg, sigma_sft) in {0, 1}^2 and where they drift."""

from superrl.envs import EnvConfig
from superrl.losses import HybridConfig
from superrl.trainer import TrainConfig, train

env = EnvConfig(kind="SparseLock")
for s_pg in (0.0, 1.0):
    for s_sft in (0.0, 1.0):
        cfg = TrainConfig(env=env, regime="Hybrid", hybrid=HybridConfig(sigma_init=(s_pg, s_sft)))
        log = train(cfg)
        sp, ss = log.series("sigma_pg"), log.series("sigma_sft")
        half = next((e["step"] for e in log.evals if e["em_accuracy"] >= 0.5), None)
        print(
            f"init {int(s_pg)}{int(s_sft)}: EM={log.final_em:.3f}  first EM>=0.5 at step {half}  "
            f"sigma_pg {sp[0]:+.2f}->{sp[-1]:+.2f}  sigma_sft {ss[0]:+.2f}->{ss[-1]:+.2f}"
        )
