"""Difficulty scoring, quantile bucketing and easy-to-hard batch schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .dataset import SSRExample

STRATEGIES = ("curriculum", "none", "anti", "loss_only", "length_only")


def normalize_strategy(name: str) -> str:
    s = name.replace("-", "_")
    if s not in STRATEGIES:
        raise ValueError(f"unknown curriculum strategy {name!r}")
    return s


@dataclass
class CurriculumSchedule:
    strategy: str = "curriculum"
    k: int = 5
    mix_current: float = 0.8

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.mix_current <= 1.0:
            raise ValueError("mix_current must be in (0, 1]")

    def phase_boundaries(self, total_steps: int) -> list[int]:
        """First step of each phase 2..k (strictly increasing when total_steps >= k)."""
        return [(i * total_steps) // self.k for i in range(1, self.k)]

    def phase_of(self, step: int, total_steps: int) -> int:
        return min(self.k, (step * self.k) // max(total_steps, 1) + 1)


def score(ex: SSRExample, strategy: str = "curriculum") -> float:
    """Difficulty under a strategy's scoring rule.

    curriculum/none/anti: summed generator NLL over all spans.
    loss_only: mean NLL per imperfect token. length_only: imperfect token count.
    """
    strategy = normalize_strategy(strategy)
    if ex.mode != "ssr":
        raise ValueError(f"cannot score a {ex.mode!r} record; only ssr records carry generator loss")
    total = math.fsum(x for r in ex.spans for x in r.nll)
    length = sum(len(r.imp) for r in ex.spans)
    if strategy == "length_only":
        return float(length)
    if strategy == "loss_only":
        return total / length if length else 0.0
    return total


def bucketize(dataset: Sequence[SSRExample], k: int = 5, strategy: str = "curriculum") -> list[SSRExample]:
    """Assign equal-size buckets 1..k in ascending score order (ties by id).

    Returns copies in the input order with ``bucket`` set; bucket 1 is easiest.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    scores = [score(ex, strategy) for ex in dataset]
    order = sorted(range(n), key=lambda i: (scores[i], dataset[i].id))
    out = list(dataset)
    for rank, i in enumerate(order):
        out[i] = replace(dataset[i], bucket=rank * k // n + 1)
    return out


def bucket_stats(dataset: Sequence[SSRExample], strategy: str = "curriculum") -> dict:
    """Per-bucket count and min/mean/max score, for inspection."""
    groups: dict[int, list[float]] = {}
    for ex in dataset:
        if ex.bucket is None:
            raise ValueError("dataset is not bucketized")
        groups.setdefault(ex.bucket, []).append(score(ex, strategy))
    return {
        "strategy": normalize_strategy(strategy),
        "n_examples": len(dataset),
        "buckets": [
            {
                "bucket": b,
                "count": len(v),
                "min": min(v),
                "mean": math.fsum(v) / len(v),
                "max": max(v),
            }
            for b, v in sorted(groups.items())
        ],
    }


def schedule_order(
    dataset: Sequence[SSRExample],
    schedule: CurriculumSchedule,
    total_steps: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[list[int]]:
    """Yield one list of dataset indices per training step.

    Steps are split into ``k`` equal phases. In phase ``i`` each element comes
    from the phase's bucket with probability ``mix_current``, otherwise
    uniformly from the examples of the buckets already visited. Phase 1 uses
    its bucket only. ``anti`` visits buckets k..1; ``none`` is uniform.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if schedule.strategy == "none":
        for _ in range(total_steps):
            yield rng.integers(0, n, size=batch_size).tolist()
        return
    if any(ex.bucket is None for ex in dataset):
        raise ValueError(f"strategy {schedule.strategy!r} needs a bucketized dataset")
    k = schedule.k
    members = [np.array([i for i, ex in enumerate(dataset) if ex.bucket == b], dtype=np.int64) for b in range(1, k + 1)]
    visit = list(range(k, 0, -1)) if schedule.strategy == "anti" else list(range(1, k + 1))
    for step in range(total_steps):
        phase = schedule.phase_of(step, total_steps)
        cur = members[visit[phase - 1] - 1]
        if cur.size == 0:
            raise ValueError(f"bucket {visit[phase - 1]} is empty")
        if phase == 1:
            yield cur[rng.integers(0, cur.size, size=batch_size)].tolist()
            continue
        prev = np.concatenate([members[b - 1] for b in visit[: phase - 1]])
        prev.sort()
        coin = rng.random(batch_size) < schedule.mix_current
        a = cur[rng.integers(0, cur.size, size=batch_size)]
        b = prev[rng.integers(0, prev.size, size=batch_size)]
        yield np.where(coin, a, b).tolist()
