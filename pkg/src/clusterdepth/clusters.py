"""Cluster formation, cluster mass, TFCE and depth-aligned null distributions.

Clusters are maximal runs of time points whose statistic is strictly above
the threshold.  Depths are 0-based here; anything shown to a user adds one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Direction(str, enum.Enum):
    HEAD = "head"
    TAIL = "tail"

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class Aggregation(str, enum.Enum):
    SUM = "sum"
    SUM_OF_SQUARES = "sumsq"

    @classmethod
    def parse(cls, value) -> "Aggregation":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        aliases = {"sum": cls.SUM, "sumsq": cls.SUM_OF_SQUARES, "sumofsquares": cls.SUM_OF_SQUARES}
        if key not in aliases:
            raise ValueError(f"unknown aggregation {value!r}")
        return aliases[key]


@dataclass(eq=False)
class Cluster:
    start: int
    end: int  # inclusive
    stats: np.ndarray
    touches_boundary: tuple[bool, bool] = (False, False)

    def __len__(self):
        return self.end - self.start + 1

    def __eq__(self, other):
        if not isinstance(other, Cluster):
            return NotImplemented
        return (self.start, self.end, self.touches_boundary) == (
            other.start, other.end, other.touches_boundary) and np.array_equal(self.stats, other.stats)


def _values(signal) -> np.ndarray:
    return np.asarray(getattr(signal, "values", signal), dtype=float)


def form_clusters(signal, tau: float, exclude_first: bool = False) -> list[Cluster]:
    """Maximal runs of ``signal > tau``, left to right.

    With ``exclude_first`` a run containing time index 0 is dropped.
    """
    if not np.isfinite(tau):
        if tau == np.inf:
            return []
        raise ValueError("tau must be finite")
    x = _values(signal)
    above = x > tau
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    m = x.shape[0]
    clusters = []
    for s, e in zip(starts, ends):
        if exclude_first and s == 0:
            continue
        clusters.append(Cluster(int(s), int(e), x[s:e + 1].copy(), (bool(s == 0), bool(e == m - 1))))
    return clusters


def cluster_mass(cluster: Cluster, aggregation="sum") -> float:
    aggregation = Aggregation.parse(aggregation)
    stats = np.asarray(cluster.stats, dtype=float)
    if stats.size == 0:
        raise ValueError("empty cluster")
    if aggregation is Aggregation.SUM:
        return float(stats.sum())
    return float((stats * stats).sum())


def _run_labels(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label runs of True along the last axis of a 2-D mask (0 = background).

    Labels are unique across rows and increase left to right, row by row.
    """
    B, m = mask.shape
    padded = np.zeros((B, m + 1), dtype=bool)
    padded[:, :m] = mask
    flat = padded.ravel()
    starts = flat & ~np.concatenate([[False], flat[:-1]])
    labels = np.cumsum(starts) * flat
    return labels.reshape(B, m + 1)[:, :m], int(starts.sum())


def max_cluster_mass(stats: np.ndarray, tau: float, aggregation="sum") -> np.ndarray:
    """Largest cluster mass of every row of ``stats`` (0 for rows without clusters)."""
    aggregation = Aggregation.parse(aggregation)
    stats = np.atleast_2d(stats)
    labels, count = _run_labels(stats > tau)
    if count == 0:
        return np.zeros(stats.shape[0])
    inside = labels > 0
    vals = stats[inside]
    if aggregation is Aggregation.SUM_OF_SQUARES:
        vals = vals * vals
    masses = np.bincount(labels[inside], weights=vals, minlength=count + 1)
    rows = np.zeros(count + 1, dtype=np.intp)
    rows[labels[inside]] = np.nonzero(inside)[0]
    best = np.zeros(stats.shape[0])
    np.maximum.at(best, rows[1:], masses[1:])
    return best


def tfce_transform(signal, E: float = 0.5, H: float = 1.0, dh: float = 0.1,
                   start: float = 0.0) -> np.ndarray:
    """Threshold-free cluster enhancement of a 1-D statistic signal.

    ``TFCE(s) = sum_h extent(h, s)**E * h**H * dh`` over the heights
    ``h = start + dh, start + 2 dh, ...`` not exceeding ``signal[s]``, where
    ``extent(h, s)`` is the length of the run of ``signal >= h`` holding
    ``s``.
    """
    return tfce_rows(np.atleast_2d(_values(signal)), E, H, dh, start)[0]


def tfce_rows(stats: np.ndarray, E: float = 0.5, H: float = 1.0, dh: float = 0.1,
              start: float = 0.0) -> np.ndarray:
    """:func:`tfce_transform` applied to every row of ``stats``."""
    if not dh > 0:
        raise ValueError("dh must be positive")
    if E < 0 or H < 0:
        raise ValueError("E and H must be non-negative")
    stats = np.atleast_2d(np.asarray(stats, dtype=float))
    out = np.zeros(stats.shape)
    finite = stats[np.isfinite(stats)]
    top = finite.max(initial=start)
    if np.isposinf(stats).any():
        top = max(top, start + dh)
    n_heights = int(np.floor((top - start) / dh + 1e-9))
    # rows sorted by peak so each height only touches rows that reach it
    peaks = np.where(np.isposinf(stats), np.inf, np.where(np.isfinite(stats), stats, -np.inf)).max(axis=1)
    order = np.argsort(-peaks, kind="stable")
    sorted_stats = stats[order]
    sorted_peaks = peaks[order]
    acc = np.zeros(stats.shape)
    for k in range(1, n_heights + 1):
        h = start + k * dh
        active = int(np.searchsorted(-sorted_peaks, -h, side="right"))
        if active == 0:
            break
        mask = sorted_stats[:active] >= h
        labels, count = _run_labels(mask)
        extent = np.bincount(labels.ravel(), minlength=count + 1).astype(float)
        extent[0] = 0.0
        acc[:active] += (extent[labels] ** E) * mask * (h ** H * dh)
    out[order] = acc
    out[np.isposinf(stats)] = np.inf
    return out


def depth_positions(stats: np.ndarray, tau: float) -> np.ndarray:
    """1-based depth from the head of every point, excluding the leading run.

    Points outside clusters, or in a run starting at time index 0, get 0.
    """
    above = np.atleast_2d(stats) > tau
    counts = np.cumsum(above, axis=1)
    last_reset = np.maximum.accumulate(np.where(above, 0, counts), axis=1)
    depth = counts - last_reset
    leading = np.cumprod(above, axis=1).astype(bool)
    depth[leading] = 0
    return depth


@dataclass(eq=False)
class DepthNullDistribution:
    """Permutation distribution of cluster-depth statistics.

    ``matrix[i, j]`` is the largest statistic found at depth ``j`` (0-based)
    over the clusters of permutation ``i``; zero when no cluster reaches it.
    """

    matrix: np.ndarray
    J_D: int
    direction: Direction
    tau: float


def depth_matrix(stats: np.ndarray, tau: float, direction="head") -> np.ndarray:
    """Depth-aligned maxima for every row, with all non-degenerate columns."""
    direction = Direction.parse(direction)
    stats = np.atleast_2d(np.asarray(stats, dtype=float))
    if direction is Direction.TAIL:
        stats = stats[:, ::-1]
    depth = depth_positions(stats, tau)
    rows, cols = np.nonzero(depth)
    width = int(depth.max(initial=0))
    out = np.zeros((stats.shape[0], width))
    if width:
        np.maximum.at(out, (rows, depth[rows, cols] - 1), stats[rows, cols])
        positive = np.flatnonzero((out > 0).any(axis=0))
        width = int(positive[-1]) + 1 if positive.size else 0
    return out[:, :width]


def depth_null(perm_stats, tau: float, direction="head") -> DepthNullDistribution:
    """Depth null distribution of a permuted statistic matrix (row 0 observed).

    Head direction drops clusters starting at the first time point; tail
    direction works on time-reversed signals and so drops clusters ending on
    the last one.
    """
    stats = np.asarray(getattr(perm_stats, "stats", perm_stats), dtype=float)
    if stats.ndim != 2 or stats.shape[0] == 0:
        raise ValueError("expected a non-empty (n_perm, m) matrix")
    direction = Direction.parse(direction)
    matrix = depth_matrix(stats, tau, direction)
    return DepthNullDistribution(matrix, matrix.shape[1], direction, float(tau))
