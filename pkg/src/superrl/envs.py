"""Synthetic lock-style sequence tasks with controllable reward density.

Each prompt is a short token string. The gold answer applies a hidden
per-position permutation to the prompt tokens, so the mapping can be learned
from demonstrations and transfers to unseen prompts, while a uniform policy
hits the full answer with probability ``vocab_size ** -answer_len``.

Two reward families share the same task:

* ``SparseLock`` pays 1 only when the extracted final answer matches.
* ``DenseChain`` pays ``1/T`` for every position that agrees with the oracle trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError
from .numerics import Rng

DENSE = "DenseChain"
SPARSE = "SparseLock"
KINDS = (DENSE, SPARSE)


@dataclass(frozen=True)
class EnvConfig:
    kind: str = SPARSE
    vocab_size: int = 8
    answer_len: int = 4
    prompt_space: int = 2048
    demo_fraction: float = 0.5
    # Tokens of "scratch work" copied from the prompt before the answer.
    prefix_len: int = 0
    leading_zero_rule: bool = True
    equivalences: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown env kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.answer_len < 1:
            raise ConfigError("answer_len must be at least 1")
        if not 0.0 <= self.demo_fraction <= 1.0:
            raise ConfigError("demo_fraction must lie in [0, 1]")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be non-negative")
        total = self.vocab_size**self.answer_len
        if not 1 <= self.prompt_space <= total:
            raise ConfigError(f"prompt_space must lie in [1, {total}]")
        eq = tuple(tuple(int(t) for t in pair) for pair in self.equivalences)
        for pair in eq:
            if len(pair) != 2 or not all(0 <= t < self.vocab_size for t in pair):
                raise ConfigError(f"bad equivalence pair {pair}")
        object.__setattr__(self, "equivalences", eq)

    @property
    def trace_len(self) -> int:
        return self.prefix_len + self.answer_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["equivalences"] = [list(p) for p in self.equivalences]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        if "equivalences" in d:
            d["equivalences"] = tuple(tuple(p) for p in d["equivalences"])
        return cls(**d)


@dataclass(frozen=True)
class TaskInstance:
    prompt_id: int
    prompt_tokens: tuple[int, ...]
    gold_answer: tuple[int, ...]
    oracle_trace: tuple[int, ...]

    def __post_init__(self):
        n = len(self.gold_answer)
        if n == 0 or tuple(self.oracle_trace[-n:]) != tuple(self.gold_answer):
            raise ConfigError("gold_answer must be a suffix of oracle_trace")

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "prompt": list(self.prompt_tokens),
            "gold": list(self.gold_answer),
            "trace": list(self.oracle_trace),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(int(rec["prompt_id"]), tuple(rec["prompt"]), tuple(rec["gold"]), tuple(rec["trace"]))


@dataclass(frozen=True)
class DemoSet:
    entries: tuple[TaskInstance, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


class Dataset(NamedTuple):
    train: list[TaskInstance]
    test: list[TaskInstance]
    demos: DemoSet


class LockTask:
    """The hidden mapping behind an environment, rebuilt deterministically from an Rng."""

    def __init__(self, config: EnvConfig, rng: Rng):
        self.config = config
        V, L = config.vocab_size, config.answer_len
        self.perms = np.stack([rng.split(t).permutation(V) for t in range(L)])
        # prompt ids index a fixed shuffle of all V**L token strings
        self._id_order = rng.split(L).permutation(V**L)

    def prompt(self, prompt_id: int) -> tuple[int, ...]:
        V, L = self.config.vocab_size, self.config.answer_len
        code = int(self._id_order[prompt_id])
        digits = []
        for _ in range(L):
            code, d = divmod(code, V)
            digits.append(d)
        return tuple(digits)

    def oracle(self, prompt: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Return (gold_answer, oracle_trace) for a prompt."""
        L = self.config.answer_len
        gold = tuple(int(self.perms[t][prompt[t]]) for t in range(L))
        prefix = tuple(int(prompt[i % L]) for i in range(self.config.prefix_len))
        return gold, prefix + gold

    def instance(self, prompt_id: int) -> TaskInstance:
        p = self.prompt(prompt_id)
        gold, trace = self.oracle(p)
        return TaskInstance(int(prompt_id), p, gold, trace)


def _canon_map(equivalences: Iterable[tuple[int, int]]) -> dict[int, int]:
    # union-find so that every class maps to its smallest member
    parent: dict[int, int] = {}

    def find(a):
        while parent.get(a, a) != a:
            a = parent[a]
        return a

    for a, b in equivalences:
        ra, rb = find(a), find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            parent[hi] = lo
    return {t: find(t) for t in list(parent)}


def canonicalize(
    tokens: Sequence[int],
    *,
    leading_zero_rule: bool = True,
    equivalences: Iterable[tuple[int, int]] = (),
    zero_token: int = 0,
) -> tuple[int, ...]:
    """Normalize an answer span before comparison.

    Equivalent tokens collapse to the smallest member of their class, then
    leading zero tokens are stripped (a lone zero is kept, like "0007" -> "7"
    and "0000" -> "0").
    """
    cmap = _canon_map(equivalences)
    seq = [cmap.get(int(t), int(t)) for t in tokens]
    if leading_zero_rule:
        i = 0
        while i < len(seq) - 1 and seq[i] == zero_token:
            i += 1
        seq = seq[i:]
    return tuple(seq)


def extract_answer(response: Sequence[int], answer_len: int) -> tuple[int, ...]:
    """Final ``answer_len`` tokens; a shorter response is used whole."""
    response = tuple(int(t) for t in response)
    if len(response) < answer_len:
        return response
    return response[len(response) - answer_len:]


def sparse_reward(
    response: Sequence[int],
    instance: TaskInstance,
    *,
    leading_zero_rule: bool = True,
    equivalences: Iterable[tuple[int, int]] = (),
) -> float:
    """Binary exact-match reward on the extracted, canonicalized answer."""
    eq = tuple(equivalences)
    pred = canonicalize(
        extract_answer(response, len(instance.gold_answer)),
        leading_zero_rule=leading_zero_rule,
        equivalences=eq,
    )
    gold = canonicalize(instance.gold_answer, leading_zero_rule=leading_zero_rule, equivalences=eq)
    return 1.0 if pred == gold else 0.0


def dense_reward(response: Sequence[int], instance: TaskInstance) -> np.ndarray:
    """Per-step reward: ``1/T`` wherever the response agrees with the oracle trace."""
    trace = instance.oracle_trace
    T = len(trace)
    out = np.zeros(len(response))
    for t, tok in enumerate(response[:T]):
        if int(tok) == trace[t]:
            out[t] = 1.0 / T
    return out


def step_rewards(config: EnvConfig, response: Sequence[int], instance: TaskInstance) -> np.ndarray:
    """Per-step reward vector for either family (sparse pays on the last step)."""
    if config.kind == DENSE:
        return dense_reward(response, instance)
    out = np.zeros(len(response))
    if len(out):
        out[-1] = sparse_reward(
            response,
            instance,
            leading_zero_rule=config.leading_zero_rule,
            equivalences=config.equivalences,
        )
    return out


def solves(config: EnvConfig, response: Sequence[int], instance: TaskInstance) -> bool:
    """Exact-match success, the quantity behind EM accuracy."""
    return (
        sparse_reward(
            response,
            instance,
            leading_zero_rule=config.leading_zero_rule,
            equivalences=config.equivalences,
        )
        == 1.0
    )


def make_dataset(
    config: EnvConfig,
    n_train: int,
    n_test: int,
    rng: Rng,
    *,
    require_demos: bool = False,
) -> Dataset:
    """Sample disjoint train/test prompts and build the offline demo set.

    Demos cover the first ``ceil(demo_fraction * n_train)`` training prompts and
    are only kept if the oracle trace earns full reward.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be at least 1")
    if n_train + n_test > config.prompt_space:
        raise ConfigError(f"need {n_train + n_test} prompts but prompt_space is {config.prompt_space}")
    n_demo = math.ceil(config.demo_fraction * n_train)
    if require_demos and n_demo == 0:
        raise ConfigError("a hybrid regime needs demonstrations but demo_fraction * n_train rounds to 0")
    task = LockTask(config, rng.split(0))
    ids = rng.split(1).permutation(config.prompt_space)[: n_train + n_test]
    train = [task.instance(int(i)) for i in ids[:n_train]]
    test = [task.instance(int(i)) for i in ids[n_train:]]
    demos = []
    for inst in train[:n_demo]:
        if _full_reward(config, inst.oracle_trace, inst):
            demos.append(inst)
    return Dataset(train, test, DemoSet(tuple(demos)))


def make_transfer_set(config: EnvConfig, n: int, rng: Rng) -> list[TaskInstance]:
    """Held-out instances drawn from prompt ids outside ``prompt_space``.

    Uses the same hidden mapping as :func:`make_dataset` with the same ``rng``.
    Falls back to an empty list when the prompt space is exhausted.
    """
    total = config.vocab_size**config.answer_len
    task = LockTask(config, rng.split(0))
    pool = np.arange(config.prompt_space, total)
    if pool.size == 0 or n <= 0:
        return []
    ids = rng.split(2).permutation(pool)[:n]
    return [task.instance(int(i)) for i in ids]


def _full_reward(config: EnvConfig, response, inst: TaskInstance) -> bool:
    return abs(float(step_rewards(config, response, inst).sum()) - 1.0) < 1e-12


def dump_instances(path: str | Path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def load_instances(path: str | Path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_record(json.loads(line)) for line in fh if line.strip()]
