import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superrl.envs import EnvConfig, TaskInstance, make_dataset
from superrl.errors import ConfigError
from superrl.losses import kl_estimate_k3
from superrl.numerics import Adam, MlpParams, Rng, log_softmax, mlp_forward
from superrl.policy import (
    PolicyShape,
    featurize,
    greedy_decode,
    init_policy,
    load_checkpoint,
    sample_batch,
    sample_group,
    save_checkpoint,
    sequence_logprob,
    snapshot_reference,
    step_features,
    value_estimate,
)

from conftest import tiny_policy

SHAPE = PolicyShape(vocab_size=3, prompt_len=2, max_len=3)
INST = TaskInstance(0, (2, 0), (1, 1, 0), (1, 1, 0))


def uniform_policy(shape=SHAPE):
    p = init_policy(shape, Rng(0), hidden=5)
    p.net.W2[...] = 0.0
    p.net.b2[...] = 0.0
    return p


def test_uniform_policy_sequence_logprob():
    total, per_step, _ = sequence_logprob(uniform_policy(), INST, [0, 2, 1])
    assert total == pytest.approx(3 * np.log(1 / 3), abs=1e-14)
    assert np.allclose(per_step, np.log(1 / 3))


def test_near_deterministic_policy_on_its_mode():
    p = uniform_policy()
    p.net.b2[...] = [0.0, 40.0, 0.0]
    total, _, _ = sequence_logprob(p, INST, [1, 1, 1])
    assert total == pytest.approx(0.0, abs=1e-15)


def test_sequence_logprob_matches_step_by_step_product():
    p = init_policy(SHAPE, Rng(1), hidden=5)
    p.net.W2[...] = Rng(2).normal(0, 1, p.net.W2.shape)
    toks = [2, 0, 1]
    prob = 1.0
    prev = SHAPE.bos
    for t, tok in enumerate(toks):
        x = step_features(SHAPE, np.array([INST.prompt_tokens]), t, np.array([prev]))[0]
        prob *= np.exp(log_softmax(mlp_forward(p.net, x)[0]))[tok]
        prev = tok
    total, _, _ = sequence_logprob(p, INST, toks)
    assert np.exp(total) == pytest.approx(prob, rel=1e-12)


def test_featurize_layout():
    X = featurize(SHAPE, np.array([[2, 0]]), np.array([[1, 0, 2]]))
    assert X.shape == (1, 3, SHAPE.n_features) == (1, 3, 2 * 3 + 3 + 3 + 1)
    # prompt slots, then position, then previous token (BOS at step 0)
    assert np.flatnonzero(X[0, 0]).tolist() == [2, 3, 6, 9 + 3]
    assert np.flatnonzero(X[0, 2]).tolist() == [2, 3, 8, 9 + 0]
    for t, prev in enumerate([SHAPE.bos, 1, 0]):
        assert np.array_equal(X[0, t], step_features(SHAPE, np.array([[2, 0]]), t, np.array([prev]))[0])


def test_out_of_vocab_tokens_rejected():
    with pytest.raises(ConfigError):
        sequence_logprob(uniform_policy(), INST, [0, 3, 1])


def test_sample_group_shapes_and_determinism():
    p = tiny_policy(1)
    inst = TaskInstance(4, (1, 2), (0, 2), (0, 2))
    group = sample_group(p, inst, 5, Rng(3), group_id=7)
    assert len(group) == 5 and {g.group_id for g in group} == {7}
    assert [g.tokens for g in group] == [g.tokens for g in sample_group(p, inst, 5, Rng(3), group_id=7)]
    assert len(sample_group(p, inst, 1, Rng(3))) == 1


def test_sampled_logprobs_match_recomputation_bit_for_bit():
    env = EnvConfig(kind="SparseLock")
    data = make_dataset(env, 64, 8, Rng(4))
    shape = PolicyShape(8, 4, 4)
    p = init_policy(shape, Rng(5), hidden=32)
    p.net.W2[...] = Rng(6).normal(0, 1, p.net.W2.shape)
    batch = sample_batch(p, data.train[:16], 5, Rng(7))
    assert np.all(np.exp(batch.logp) > 0) and np.all(np.exp(batch.logp) <= 1)
    for r in range(len(batch)):
        inst = data.train[batch.instance_index[r]]
        _, per_step, _ = sequence_logprob(p, inst, batch.tokens[r])
        assert np.array_equal(per_step, batch.logp[r])
    assert np.array_equal(batch.group_ids, np.repeat(np.arange(16), 5))


def test_group_rewards_are_exchangeable_across_substreams():
    p = tiny_policy(2)
    inst = TaskInstance(0, (1, 2), (0, 2), (0, 2))

    def mean_hits(stream):
        toks = np.array([g.tokens for g in sample_group(p, inst, 2000, Rng(8).split(stream))])
        return np.all(toks == [0, 2], axis=1).mean()

    a, b = mean_hits(0), mean_hits(1)
    assert abs(a - b) < 4 * np.sqrt(0.25 / 2000)


def test_greedy_decode_is_argmax():
    p = uniform_policy()
    p.net.b2[...] = [0.0, 0.0, 1.0]
    assert greedy_decode(p, [INST]).tolist() == [[2, 2, 2]]


def test_value_estimate_zero_init_and_fit():
    p = init_policy(SHAPE, Rng(9), hidden=6)
    assert value_estimate(p, INST, 0) == 0.0
    X = step_features(SHAPE, np.array([INST.prompt_tokens]), 1, np.array([1]))
    opt = Adam(0.05)
    arrays = {k: v for k, v in p.arrays().items() if k.startswith("value.")}
    for _ in range(300):
        v, cache = mlp_forward(p.value_net, X)
        from superrl.numerics import mlp_backward

        g = mlp_backward(cache, v - 2.5)
        opt.step(arrays, {f"value.{k}": a for k, a in g.arrays().items()})
    assert value_estimate(p, INST, 1, prefix=[1]) == pytest.approx(2.5, abs=1e-2)
    with pytest.raises(ConfigError):
        value_estimate(p, INST, 3)


def test_critic_shares_first_layer_with_actor():
    p = init_policy(SHAPE, Rng(10))
    assert np.array_equal(p.net.W1, p.value_net.W1) and np.array_equal(p.net.b1, p.value_net.b1)
    p.net.W1[0, 0] += 1.0
    assert p.net.W1[0, 0] != p.value_net.W1[0, 0]


def test_reference_snapshot():
    p = tiny_policy(3)
    ref = snapshot_reference(p)
    batch = sample_batch(p, [TaskInstance(0, (1, 2), (0, 2), (0, 2))], 4, Rng(11))
    k3 = kl_estimate_k3(batch.logp, ref.token_logp(batch.X, batch.tokens))
    assert np.all(np.abs(k3) <= 1e-12)
    before = ref.token_logp(batch.X, batch.tokens).copy()
    p.net.W2[...] += Rng(12).normal(0, 1, p.net.W2.shape)
    assert np.array_equal(ref.token_logp(batch.X, batch.tokens), before)
    after = sample_batch(p, [TaskInstance(0, (1, 2), (0, 2), (0, 2))], 4, Rng(11))
    assert kl_estimate_k3(after.logp, ref.token_logp(after.X, after.tokens)).mean() > 0
    with pytest.raises(ValueError):
        ref.net.W1[0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path):
    p = tiny_policy(4)
    save_checkpoint(tmp_path / "c.json", p)
    q = load_checkpoint(tmp_path / "c.json")
    assert q.shape == p.shape
    for k, v in p.arrays().items():
        assert np.array_equal(q.arrays()[k], v)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_sampled_probabilities_in_unit_interval(seed, G):
    p = tiny_policy(seed % 17)
    b = sample_batch(p, [TaskInstance(0, (0, 1), (2, 2), (2, 2))], G, Rng(seed))
    assert b.tokens.shape == (G, 2)
    assert np.all((np.exp(b.logp) > 0) & (np.exp(b.logp) <= 1))
