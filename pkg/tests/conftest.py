import numpy as np
import pytest

from superrl.envs import EnvConfig, make_dataset
from superrl.numerics import Rng
from superrl.policy import PolicyParams, PolicyShape, init_policy, sample_batch

TINY_ENV = EnvConfig(kind="DenseChain", vocab_size=3, answer_len=2, prompt_space=9)


def tiny_policy(seed: int, hidden: int = 4) -> PolicyParams:
    """V=3, two-token prompts and answers; output layer scaled up so gradients are not tiny."""
    shape = PolicyShape(3, 2, 2)
    rng = Rng(seed)
    p = init_policy(shape, rng, hidden=hidden, sigma_init=(0.3, -0.2))
    p.net.W2[...] = rng.split(9).normal(0.0, 1.0, p.net.W2.shape)
    p.value_net.W2[...] = rng.split(10).normal(0.0, 1.0, p.value_net.W2.shape)
    return p


def tiny_batch(params: PolicyParams, seed: int, G: int = 3):
    """Sampled rollouts with random advantages, returns and reference log-probs."""
    data = make_dataset(TINY_ENV, 4, 2, Rng(seed).split(0))
    batch = sample_batch(params, data.train[:3], G, Rng(seed).split(1))
    r = Rng(seed).split(2)
    shape = batch.logp.shape
    batch.advantages = r.normal(0.0, 1.0, shape)
    batch.returns = r.normal(0.0, 1.0, shape)
    batch.rewards = np.zeros(shape)
    batch.ref_logp = batch.logp + r.normal(0.0, 0.3, shape)
    return batch, data


def with_arrays(params: PolicyParams, arrays: dict) -> PolicyParams:
    full = {k: v.copy() for k, v in params.arrays().items()}
    full.update(arrays)
    return PolicyParams.from_arrays(params.shape, full)


def subset(params: PolicyParams, prefix: str) -> dict:
    return {k: v.copy() for k, v in params.arrays().items() if k.startswith(prefix)}


@pytest.fixture
def tiny():
    return tiny_policy(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
