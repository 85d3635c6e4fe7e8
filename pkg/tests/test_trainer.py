import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from superrl.envs import EnvConfig, make_dataset
from superrl.errors import ConfigError, NumericError
from superrl.losses import HybridConfig
from superrl.numerics import Rng
from superrl.switch import HYBRID, VANILLA, decide_actor, probe_statistics
from superrl.trainer import (
    CSV_HEADER,
    RunLog,
    Trainer,
    TrainConfig,
    compare_regimes,
    evaluate,
    kl_delta,
    kl_stats,
    smooth_ema,
    train,
    train_sft_then_rl,
)


SPARSE = EnvConfig(kind="SparseLock")
DENSE = EnvConfig(kind="DenseChain")


def short(**kw):
    base = dict(steps=12, eval_every=4, n_train=64, n_test=16, n_transfer=8, sft_epochs=2)
    base.update(kw)
    return TrainConfig(**base)


def log_with_kl(values):
    return RunLog(config={}, steps=[{"step": i + 1, "kl_mean": v} for i, v in enumerate(values)])


# ---------------------------------------------------------------- oracles


def test_kl_stats_examples():
    assert kl_stats(log_with_kl([0.3, 0.3, 0.3])) == (0.3, 0.3, 0.0)
    assert kl_stats(log_with_kl([0.0, 1.0])) == (0.0, 1.0, 0.25)
    with pytest.raises(ConfigError):
        kl_stats(log_with_kl([0.5]))


def test_kl_delta_percentages():
    d = kl_delta(log_with_kl([0.0, 2.0]), log_with_kl([0.0, 1.0]))
    assert d["var_delta_pct"] == pytest.approx(100 * (0.25 - 1.0) / 1.0)
    assert d["max_delta_pct"] == pytest.approx(100 * (1.0 - 2.0) / 2.0)


def test_smooth_ema_examples():
    assert np.array_equal(smooth_ema([2.0] * 5, 0.9), [2.0] * 5)
    x = [0.3, 1.0, -2.0]
    assert np.allclose(smooth_ema(x, 1e-12), x)
    s = smooth_ema([0.0] + [1.0] * 20, 0.9)
    assert np.allclose(1.0 - s[1:], 0.9 ** np.arange(1, 21))
    with pytest.raises(ConfigError):
        smooth_ema(x, 1.0)


def test_sft_with_zero_lr_keeps_initial_params():
    cfg = short(env=DENSE, regime="SFT", lr=0.0)
    log = train(cfg)
    init = Trainer(cfg).params
    for k, v in init.arrays().items():
        assert np.array_equal(log.final_params.arrays()[k], v)


def test_superrl_dense_runs_vanilla_without_sft_entries():
    log = train(short(env=DENSE, regime="SuperRL", steps=60))
    assert log.probe["choice"] == VANILLA
    assert all(r["l_sft"] is None and r["actor"] == "RL" for r in log.steps)
    assert len(log.steps) == 60


def test_superrl_sparse_runs_hybrid_with_weights():
    log = train(short(env=SPARSE, regime="SuperRL", steps=60))
    assert log.probe["choice"] == HYBRID
    post = log.steps[50:]
    assert len(post) == 10 and all(r["w_pg"] is not None and r["w_sft"] is not None for r in post)
    # the executed actor matches a replay of the recorded probe rewards
    stats = probe_statistics(log.probe["avg_rewards"], log.probe["thresholds"]["m"])
    replay = decide_actor(stats, short().switch_config)
    assert replay.choice == log.probe["choice"]


def test_reprobe_keeps_hybrid_while_rewards_stay_flat():
    # sparse rewards stay at zero, so the re-decision keeps the hybrid actor
    base = train(short(env=SPARSE, regime="SuperRL", steps=60))
    again = train(short(env=SPARSE, regime="SuperRL", steps=60, reprobe_every=5))
    assert again.probe == base.probe
    assert all(r["w_pg"] is not None for r in again.steps[50:])


def test_probe_longer_than_budget_is_rejected():
    with pytest.raises(ConfigError):
        train(short(env=DENSE, regime="SuperRL", steps=20))


def test_sft_stage_fits_dense_demos():
    log = train(TrainConfig(env=DENSE, regime="SFT"))
    epochs = [e for e in log.evals if "epoch" in e]
    assert len(epochs) == 25
    ems = [e["em_accuracy"] for e in epochs[:-1]] + [epochs[-1]["last_epoch_em"]]
    assert max(ems) >= 0.9
    best = epochs[-1]["best_epoch"]
    # argmax with ties going to the earliest epoch, and the run reports that checkpoint
    assert best == ems.index(max(ems)) + 1
    assert log.final_em == max(ems)


def test_sft_then_rl_with_zero_rl_steps_is_the_sft_baseline():
    cfg = short(env=DENSE, regime="SFT_then_RL")
    a = train_sft_then_rl(cfg, rl_steps=0)
    b = train(short(env=DENSE, regime="SFT"))
    assert a.final_em == b.final_em
    for k, v in b.final_params.arrays().items():
        assert np.array_equal(a.final_params.arrays()[k], v)


def test_evaluate_scores_greedy_outputs(monkeypatch):
    import superrl.trainer as trainer_mod

    data = make_dataset(SPARSE, 20, 5, Rng(0))
    params = Trainer(short(env=SPARSE, regime="RL")).params
    replay = np.array([inst.oracle_trace for inst in data.test])
    monkeypatch.setattr(trainer_mod, "greedy_decode", lambda p, insts: replay)
    assert evaluate(params, data.test, SPARSE) == 1.0
    replay = replay.copy()
    replay[:2, -1] = (replay[:2, -1] + 1) % 8
    assert evaluate(params, data.test, SPARSE) == pytest.approx(3 / 5)
    with pytest.raises(ConfigError):
        evaluate(params, [], SPARSE)


def test_evaluate_is_deterministic():
    tr = Trainer(short(env=DENSE, regime="RL"))
    assert evaluate(tr.params, tr.test_set, DENSE) == evaluate(tr.params, tr.test_set, DENSE)


def test_grpo_group_advantages_are_centered():
    tr = Trainer(short(env=DENSE, regime="RL"))
    for _ in range(3):
        batch = tr.rollout()
        adv = batch.advantages[:, 0]
        for g in np.unique(batch.group_ids):
            assert abs(adv[batch.group_ids == g].mean()) < 1e-12
        tr.rl_step()


def test_log_sigma_weights_stay_positive():
    log = train(short(env=SPARSE, regime="Hybrid", steps=30))
    w = log.series("w_pg")
    assert np.all(w > 0) and np.all(np.isfinite(log.series("sigma_pg")))
    assert np.all(log.series("w_sft") > 0)


@pytest.mark.parametrize("fusion", ["Theta", "PerStep", "ExpertInject"])
def test_fusion_variants_run(fusion):
    log = train(short(env=SPARSE, regime="Hybrid", hybrid=HybridConfig(fusion=fusion)))
    assert len(log.steps) == 12
    assert log.config["hybrid"]["fusion"] == fusion


def test_ppo_regime_logs_value_loss():
    log = train(short(env=DENSE, regime="RL", algo="PPO"))
    assert all(r["l_value"] is not None for r in log.steps)


def test_determinism_and_round_trip(tmp_path):
    cfg = short(env=SPARSE, regime="Hybrid", seed=3)
    a, b = train(cfg), train(cfg)
    assert a.to_jsonl() == b.to_jsonl()
    a.save(tmp_path / "log.jsonl")
    back = RunLog.load(tmp_path / "log.jsonl")
    assert back.to_jsonl() == a.to_jsonl()
    assert train(short(env=SPARSE, regime="Hybrid", seed=4)).to_jsonl() != a.to_jsonl()


def test_nan_aborts_with_step_index():
    tr = Trainer(short(env=DENSE, regime="RL"))
    tr.rl_step()
    tr.params.net.W2[0, 0] = np.nan
    from superrl.trainer import _guarded

    with pytest.raises(NumericError) as err:
        _guarded(tr, tr.rl_step)
    assert err.value.step == 2


def test_hybrid_without_demos_is_rejected():
    with pytest.raises(ConfigError):
        Trainer(short(env=EnvConfig(kind="SparseLock", demo_fraction=0.0), regime="Hybrid"))


def test_config_round_trip_and_validation():
    cfg = short(env=DENSE, hybrid=HybridConfig(fusion="Theta", alpha=0.5))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"speed": 1})
    with pytest.raises(ConfigError):
        TrainConfig(group_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(regime="Bandit")
    assert TrainConfig(regime="Hybrid", hybrid=HybridConfig(fusion="PerStep")).label == "Hybrid-PerStep"


def test_compare_regimes_table():
    configs = [short(env=SPARSE, regime=r) for r in ("RL", "Hybrid")]
    table = compare_regimes(configs)
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert tuple(rows[0]) == CSV_HEADER
    assert [r[0] for r in rows[1:]] == ["Hybrid", "RL"]
    assert all(r[1] == "SparseLock" for r in rows[1:])
    assert json.loads(table.to_json())["rows"][0]["transfer_em"] is not None
    one = compare_regimes(configs[:1])
    assert len(one.rows) == 1
    with pytest.raises(ConfigError):
        compare_regimes([short(env=SPARSE), short(env=DENSE)])


# ---------------------------------------------------------------- properties


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(0.01, 0.99))
def test_ema_stays_in_running_envelope(x, decay):
    s = smooth_ema(x, decay)
    lo = np.minimum.accumulate(x)
    hi = np.maximum.accumulate(x)
    assert np.all(s >= lo - 1e-9) and np.all(s <= hi + 1e-9)
