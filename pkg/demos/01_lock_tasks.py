"""Lock tasks: prompts, hidden mapping, the two reward families, canonicalization."""

import numpy as np

from superrl.envs import EnvConfig, canonicalize, dense_reward, make_dataset, sparse_reward, step_rewards
from superrl.numerics import Rng

sparse = EnvConfig(kind="SparseLock")
dense = EnvConfig(kind="DenseChain")

data = make_dataset(sparse, n_train=1024, n_test=256, rng=Rng(0))
print(len(data.train), "train /", len(data.test), "test /", len(data.demos), "demos")

inst = data.train[0]
print("prompt", inst.prompt_tokens, "-> gold", inst.gold_answer)

# one wrong token: sparse pays nothing, dense pays for the three that match
near = list(inst.oracle_trace)
near[-1] = (near[-1] + 1) % sparse.vocab_size
print("sparse:", sparse_reward(near, inst), " dense:", dense_reward(near, inst).sum())
print("per-step sparse:", step_rewards(sparse, near, inst), " per-step dense:", step_rewards(dense, near, inst))

# answers are compared after canonicalization
print(canonicalize([0, 0, 0, 7]), canonicalize([0, 0, 0, 0]), canonicalize([5, 3], equivalences=[(3, 5)]))

# a uniform guesser almost never opens the lock
rng = Rng(1)
golds = np.array([t.gold_answer for t in data.train])
guesses = rng.integers(0, 8, (200_000, 4))
hits = np.all(guesses == golds[rng.integers(0, len(golds), 200_000)], axis=1).mean()
print(f"random success {hits:.2e} vs 8**-4 = {8.0**-4:.2e}")
