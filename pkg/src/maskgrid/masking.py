"""Masking-ratio schedules, training-time ratio samplers, and mask application.

Two schedule kinds drive both training and inference:

* LINEAR: kept fraction tau(x) = x; ratio sampler Uniform(0, 1].
* COSINE: kept fraction tau(x) = 1 - cos(pi*x/2), concave in the kept
  direction, so early iterations reveal fewer tokens; ratio sampler
  r = cos(pi*u/2) with u ~ Uniform[0, 1), which concentrates mass toward
  heavy masking (mean 2/pi).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Schedule(enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"

    @classmethod
    def parse(cls, name: str) -> "Schedule":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown schedule {name!r}; expected 'linear' or 'cosine'")


@dataclass
class MaskPlan:
    """Record of one mask application: how many, where, at what ratio."""

    k: int
    positions: np.ndarray
    r: float


def tau(x: float, schedule: Schedule) -> float:
    """Kept-token fraction at normalized progress x in [0, 1]."""
    if schedule is Schedule.LINEAR:
        return x
    return 1.0 - math.cos(math.pi * x / 2.0)


def keep_count(t: int, T: int, n: int, schedule: Schedule) -> int:
    """Tokens kept (revealed in total) after iteration t of T.

    floor(tau(t/T) * n), forced to exactly n at t == T, and forced to
    reveal at least one new token per iteration so short schedules on
    small n always make progress. Requires n >= T.
    """
    if not 1 <= t <= T:
        raise ValueError(f"iteration t={t} out of range [1, {T}]")
    if n < T:
        raise ValueError(f"target length n={n} must be >= iteration count T={T}")
    if t == T:
        return n
    prev = keep_count(t - 1, T, n, schedule) if t > 1 else 0
    return max(math.floor(tau(t / T, schedule) * n), prev + 1)


def keep_counts(T: int, n: int, schedule: Schedule) -> list[int]:
    """The full kept-count trajectory for t = 1..T (iterative, no recursion)."""
    counts = []
    prev = 0
    for t in range(1, T + 1):
        c = n if t == T else max(math.floor(tau(t / T, schedule) * n), prev + 1)
        counts.append(c)
        prev = c
    return counts


def sample_mask_ratio(rng: np.random.Generator, schedule: Schedule) -> float:
    """Draw a training mask ratio r in (0, 1]."""
    u = rng.random()
    if schedule is Schedule.LINEAR:
        return 1.0 - u  # uniform on (0, 1]
    return math.cos(math.pi * u / 2.0)


def ratio_to_count(r: float, n: int) -> int:
    """Number of positions to mask for ratio r: ceil(r*n), clamped to [1, n]."""
    return min(max(math.ceil(r * n), 1), n)


def apply_mask(y: np.ndarray, k: int, rng: np.random.Generator, mask_id: int) -> tuple[np.ndarray, MaskPlan]:
    """Replace exactly k uniformly chosen positions of y with the MASK id."""
    n = y.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"mask count k={k} out of range [1, {n}]")
    positions = rng.choice(n, size=k, replace=False)
    y_masked = y.copy()
    y_masked[..., positions] = mask_id
    r = k / n
    return y_masked, MaskPlan(k=k, positions=np.sort(positions), r=r)
