"""Permutation plans and permuted statistic matrices."""
from __future__ import annotations

import enum
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .glm import DesignError, DesignSpec, SignalMatrix, batch_statistic, prepare, residualize

RNG_ALGORITHM = "numpy.random.PCG64"
DEFAULT_EXHAUSTIVE_CAP = 40320  # 8!

# rows per batch; fixed so results never depend on the worker count
_TARGET_BATCH_ELEMENTS = 1 << 18


class Scheme(str, enum.Enum):
    MANLY = "manly"
    TERBRAAK = "terbraak"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "").replace(" ", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown permutation scheme {value!r}")


class CapacityError(ValueError):
    """Exhaustive enumeration requested beyond the configured cap."""


@dataclass(eq=False)
class PermutationPlan:
    """Row permutations shared by every procedure of a run.

    ``indices[0]`` is always the identity; ``indices[i]`` reorders the rows
    of the response matrix as ``Y[indices[i]]``.
    """

    scheme: Scheme
    n_perm: int
    seed: int
    indices: np.ndarray
    exhaustive: bool = False
    rng: str = RNG_ALGORITHM

    @property
    def n(self) -> int:
        return self.indices.shape[1]


def build_plan(n: int, n_perm: int = 5000, seed: int = 0, scheme="terbraak",
               exhaustive: bool = False, cap: int = DEFAULT_EXHAUSTIVE_CAP) -> PermutationPlan:
    """Draw ``n_perm`` row permutations of ``0..n-1``.

    Rows after the identity are uniform draws with replacement from the
    symmetric group, generated sequentially from ``seed``.  With
    ``exhaustive=True`` all ``n!`` permutations are listed in lexicographic
    order (identity first) and ``n_perm`` is ignored.
    """
    scheme = Scheme.parse(scheme)
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    if exhaustive:
        if math.factorial(n) > cap:
            raise CapacityError(f"{n}! = {math.factorial(n)} permutations exceed the cap of {cap}")
        indices = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
        return PermutationPlan(scheme, indices.shape[0], seed, indices, exhaustive=True)
    if n_perm < 2:
        raise ValueError(f"need at least 2 permutations, got {n_perm}")
    rng = np.random.Generator(np.random.PCG64(seed))
    indices = np.empty((n_perm, n), dtype=np.intp)
    indices[0] = np.arange(n)
    for i in range(1, n_perm):
        indices[i] = rng.permutation(n)
    return PermutationPlan(scheme, n_perm, seed, indices)


@dataclass(eq=False)
class PermutedStatMatrix:
    """Statistics for every plan row; row 0 is the observed statistic.

    ``stats`` has shape (n_perm, m) for one channel, (n_perm, m, c) otherwise.
    """

    stats: np.ndarray
    scheme: Scheme
    degenerate: Optional[np.ndarray] = None

    @property
    def n_perm(self) -> int:
        return self.stats.shape[0]

    @property
    def m(self) -> int:
        return self.stats.shape[1]

    @property
    def channel_count(self) -> int:
        return 1 if self.stats.ndim == 2 else self.stats.shape[2]

    @property
    def observed(self) -> np.ndarray:
        return self.stats[0]

    def channel(self, k: int) -> np.ndarray:
        if self.stats.ndim == 2:
            if k != 0:
                raise IndexError(k)
            return self.stats
        return self.stats[:, :, k]


def _batches(n_rows: int, row_cost: int):
    size = max(1, _TARGET_BATCH_ELEMENTS // max(row_cost, 1))
    return [(lo, min(lo + size, n_rows)) for lo in range(0, n_rows, size)]


def permuted_statistics(signals: SignalMatrix, design: DesignSpec, plan: PermutationPlan,
                        threads: int = 1,
                        statistic: Optional[Callable[[np.ndarray], np.ndarray]] = None
                        ) -> PermutedStatMatrix:
    """Statistic signal for every permutation of the plan.

    Manly permutes the raw responses.  ter Braak permutes full-model
    residuals (group means removed for a group design); row 0 keeps the
    statistic of the uncentered observed data.

    ``statistic`` optionally replaces the F statistic: it maps an (n, M)
    response array to M values and is evaluated row by row.
    """
    if plan.n != signals.n or design.n != signals.n:
        raise DesignError(f"plan ({plan.n}), design ({design.n}) and signals ({signals.n}) "
                          "disagree on the number of observations")
    flat = signals.flat()
    M = flat.shape[1]
    out = np.empty((plan.n_perm, M))
    flags = np.zeros((plan.n_perm, M), dtype=bool)

    if statistic is None:
        observed = prepare(flat, design)
        resampled = residualize(observed, design) if plan.scheme is Scheme.TERBRAAK else observed

        def work(bounds):
            lo, hi = bounds
            vals, deg = batch_statistic(resampled, design, plan.indices[lo:hi], return_flags=True)
            out[lo:hi], flags[lo:hi] = vals, deg

        if plan.scheme is Scheme.TERBRAAK:
            out[0], flags[0] = (a[0] for a in batch_statistic(
                observed, design, plan.indices[:1], return_flags=True))
            jobs = [(max(lo, 1), hi) for lo, hi in _batches(plan.n_perm, signals.n * M) if hi > 1]
        else:
            jobs = _batches(plan.n_perm, signals.n * M)
    else:
        resampled = flat - _hat(design) @ flat if plan.scheme is Scheme.TERBRAAK else flat
        out[0] = statistic(flat)

        def work(bounds):
            lo, hi = bounds
            for i in range(lo, hi):
                out[i] = statistic(resampled[plan.indices[i]])

        jobs = [(max(lo, 1), hi) for lo, hi in _batches(plan.n_perm, signals.n * M) if hi > 1]

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, jobs))
    else:
        for job in jobs:
            work(job)

    if signals.channel_count > 1:
        c, m = signals.channel_count, signals.m
        out = out.reshape(plan.n_perm, c, m).transpose(0, 2, 1).copy()
        flags = flags.reshape(plan.n_perm, c, m).transpose(0, 2, 1).copy()
    return PermutedStatMatrix(out, plan.scheme, flags)


def _hat(design: DesignSpec) -> np.ndarray:
    Q = design._basis.Q
    return Q @ Q.T
