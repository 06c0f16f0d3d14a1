"""Test hold-out, IID client partitioning and train/validation splits.

The arithmetic follows the study protocol: 10% of all samples (truncated)
form the shared test set; the rest is shuffled into near-equal client shares; each
share keeps ``round(41/372 * size)`` samples for validation, which yields
41 validation / 331 training samples for a 372-sample share. Pooled
(centralized) training keeps ``round(0.10 * size)`` for validation, which
yields 149 / 1339 for a 1488-sample pool.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

CLIENT_VAL_FRACTION = 41 / 372
POOLED_VAL_FRACTION = 0.10


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _shuffled(ids, seed: int, stream: int) -> list[int]:
    rng = np.random.default_rng([seed, stream])
    ids = list(ids)
    return [ids[i] for i in rng.permutation(len(ids))]


def split_test(ids, fraction: float = 0.10, seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded hold-out of ``floor(fraction * n)`` ids; returns (test, rest).

    Truncation reproduces 206 test images out of 2066.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    order = _shuffled(ids, seed, 0)
    k = int(np.floor(fraction * len(order) + 1e-9))
    return sorted(order[:k]), sorted(order[k:])


@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    seed: int
    assignment: dict[int, int]  # sample id -> client id

    def members(self, client: int) -> list[int]:
        return sorted(i for i, c in self.assignment.items() if c == client)

    def sizes(self) -> list[int]:
        return [len(self.members(c)) for c in range(self.n_clients)]


def iid_partition(rest, n_clients: int = 5, seed: int = 0) -> PartitionPlan:
    """Shuffle ``rest`` and deal it into ``n_clients`` contiguous blocks
    whose sizes differ by at most one."""
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    order = _shuffled(rest, seed, 1)
    if len(order) < n_clients:
        raise ConfigError(f"cannot split {len(order)} samples into {n_clients} non-empty partitions")
    bounds = np.linspace(0, len(order), n_clients + 1)
    sizes = np.diff(np.floor(bounds).astype(int))
    assignment = {}
    start = 0
    for c, size in enumerate(sizes):
        for i in order[start:start + size]:
            assignment[i] = c
        start += size
    return PartitionPlan(n_clients, seed, assignment)


@dataclass(frozen=True)
class Split:
    train: list[int]
    val: list[int]


def split_train_val(ids, val_fraction: float, seed: int, stream: int) -> Split:
    """Seeded split keeping ``round(val_fraction * n)`` ids for validation."""
    if not ids:
        raise ConfigError("cannot split an empty partition")
    order = _shuffled(sorted(ids), seed, 100 + stream)
    k = _round_half_up(val_fraction * len(order))
    return Split(train=sorted(order[k:]), val=sorted(order[:k]))


@dataclass(frozen=True)
class SplitPlan:
    test: list[int]
    clients: dict[int, Split] = field(default_factory=dict)

    def all_ids(self) -> set[int]:
        out = set(self.test)
        for s in self.clients.values():
            out.update(s.train)
            out.update(s.val)
        return out


def client_splits(plan: PartitionPlan, test: list[int], val_fraction: float = CLIENT_VAL_FRACTION) -> SplitPlan:
    """Per-client train/val split of every partition."""
    return SplitPlan(
        test=list(test),
        clients={c: split_train_val(plan.members(c), val_fraction, plan.seed, c) for c in range(plan.n_clients)},
    )


def pooled_split(ids, seed: int, val_fraction: float = POOLED_VAL_FRACTION) -> Split:
    """Train/val split of a pooled (centralized) dataset."""
    return split_train_val(ids, val_fraction, seed, stream=-1)
