"""Multiple-comparison procedures on permuted statistic matrices.

Every procedure reads a statistic matrix whose row 0 is the observed signal
and whose other rows come from the permutation plan.  p-values count the
rows at least as extreme as the observed value (row 0 included), so they
never fall below ``1 / n_perm``.

Ties are counted inclusively.  Statistics that are mathematically equal can
differ in the last bits when the same group split is reached through
different row orders, so "at least as extreme" is evaluated with a relative
tolerance of ``TIE_RTOL``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clusters import Aggregation, Direction, cluster_mass, depth_matrix, form_clusters, \
    max_cluster_mass, tfce_rows
from .glm import DesignSpec, SignalMatrix, parametric_threshold
from .permute import PermutationPlan, PermutedStatMatrix, permuted_statistics

TIE_RTOL = 1e-9
TIE_BREAK_RULE = "ascending marginal p, then descending statistic, then lower index"


class Procedure(str, enum.Enum):
    CLUSTER_DEPTH_HEAD = "clusterdepth_head"
    CLUSTER_DEPTH_TAIL = "clusterdepth_tail"
    CLUSTER_DEPTH_BOTH = "clusterdepth"
    CLUSTER_MASS = "clustermass"
    TFCE = "tfce"
    MIN_P = "minp"
    MAX_T = "maxt"
    TROENDLE = "troendle"

    @classmethod
    def parse(cls, value) -> "Procedure":
        if isinstance(value, cls):
            return value
        key = "".join(ch for ch in str(value).lower() if ch.isalnum())
        for member in cls:
            if member.value.replace("_", "") == key:
                return member
        if key == "clusterdepthboth":
            return cls.CLUSTER_DEPTH_BOTH
        raise ValueError(f"unknown procedure {value!r}")


@dataclass(eq=False)
class ClusterRecord:
    start: int
    end: int
    mass: float
    p_head: np.ndarray
    p_tail: np.ndarray


@dataclass(eq=False)
class AdjustedPValueMap:
    """Corrected p-value per time point for one channel."""

    p: np.ndarray
    procedure: Procedure
    alpha: float
    statistic: np.ndarray
    n_perm: int
    significant: np.ndarray = field(default=None)
    p_head: Optional[np.ndarray] = None
    p_tail: Optional[np.ndarray] = None
    J_D: dict = field(default_factory=dict)
    clusters: list = field(default_factory=list)
    tau: Optional[float] = None
    channel: int = 0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.significant is None:
            self.significant = self.p <= self.alpha


def _threshold(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    with np.errstate(invalid="ignore"):
        thr = values - TIE_RTOL * np.abs(values)
    return np.where(np.isinf(values), values, thr)


def exceedance_counts(null: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``#{i : null[i] >= values[k]}`` for every k (tolerant ties)."""
    srt = np.sort(np.asarray(null, dtype=float))
    return srt.size - np.searchsorted(srt, _threshold(values), side="left")


def _column_counts(null: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Column-wise exceedance counts; ``values`` has the shape of one row or of ``null``."""
    null = np.asarray(null, dtype=float)
    srt = np.sort(null, axis=0)
    values = np.asarray(values, dtype=float)
    thr = _threshold(values)
    out = np.empty(values.shape, dtype=np.int64)
    for j in range(null.shape[1]):
        out[..., j] = null.shape[0] - np.searchsorted(srt[:, j], thr[..., j], side="left")
    return out


def _stepdown_from_counts(obs_counts, obs_values, null_counts) -> np.ndarray:
    J = obs_counts.shape[0]
    n_perm = null_counts.shape[0]
    order = np.lexsort((np.arange(J), -np.asarray(obs_values, dtype=float), obs_counts))
    ordered = null_counts[:, order]
    suffix_min = np.minimum.accumulate(ordered[:, ::-1], axis=1)[:, ::-1]
    hits = (suffix_min <= obs_counts[order][None, :]).sum(axis=0)
    hits = np.maximum.accumulate(hits)
    adjusted = np.empty(J)
    adjusted[order] = hits / n_perm
    return adjusted


def troendle_stepdown(observed, null_matrix, alpha: Optional[float] = None) -> np.ndarray:
    """Step-down min-p adjustment of J hypotheses against a joint null.

    Marginal p-values are computed column-wise from ``null_matrix`` (which
    must contain the observed row).  Hypotheses are visited from the most to
    the least significant; each step compares the observed marginal p with
    the per-row minimum over the hypotheses not yet visited.  ``alpha`` is
    accepted for interface symmetry and does not change the result.
    """
    observed = np.atleast_1d(np.asarray(observed, dtype=float))
    null_matrix = np.asarray(null_matrix, dtype=float)
    if null_matrix.ndim != 2 or null_matrix.shape[1] != observed.shape[0]:
        raise ValueError(f"null matrix shape {null_matrix.shape} does not match "
                         f"{observed.shape[0]} hypotheses")
    obs_counts = _column_counts(null_matrix, observed)
    null_counts = _column_counts(null_matrix, null_matrix)
    return _stepdown_from_counts(obs_counts, observed, null_counts)


def _stats_of(perm) -> np.ndarray:
    return np.asarray(getattr(perm, "stats", perm), dtype=float)


def _default_tau(design: DesignSpec, tau: Optional[float]) -> float:
    return parametric_threshold(design, 0.95) if tau is None else float(tau)


# --------------------------------------------------------------------------- #
# cluster depth


def _depth_pvalues(observed: np.ndarray, null: np.ndarray, null_counts: np.ndarray,
                   tau: float) -> np.ndarray:
    """Head-direction depth p-values of one observed signal; 1 outside tested clusters."""
    p = np.ones(observed.shape[0])
    J_D = null.shape[1]
    for cl in form_clusters(observed, tau, exclude_first=True):
        J_k = len(cl)
        vec = np.zeros(J_D)
        vec[:J_k] = cl.stats
        obs_counts = _column_counts(null, vec)
        adj = _stepdown_from_counts(obs_counts, vec, null_counts)
        p[cl.start:cl.end + 1] = adj[:J_k]
    return p


def _direction_pvalues(stats: np.ndarray, tau: float, direction: Direction,
                       null: Optional[np.ndarray] = None):
    flip = direction is Direction.TAIL
    oriented = stats[:, ::-1] if flip else stats
    if null is None:
        null = depth_matrix(oriented, tau, Direction.HEAD)
    null_counts = _column_counts(null, null)
    p = _depth_pvalues(oriented[0], null, null_counts, tau)
    return (p[::-1] if flip else p), null.shape[1]


def _cluster_table(observed, tau, p_head, p_tail, aggregation="sum"):
    table = []
    for cl in form_clusters(observed, tau):
        sl = slice(cl.start, cl.end + 1)
        table.append(ClusterRecord(cl.start, cl.end, cluster_mass(cl, aggregation),
                                   p_head[sl].copy(), p_tail[sl].copy()))
    return table


def cluster_depth_from_stats(perm, tau: float, alpha: float = 0.05, direction="both",
                             channel: int = 0) -> AdjustedPValueMap:
    """Cluster depth tests on a single-channel permuted statistic matrix.

    ``direction`` is ``"head"``, ``"tail"`` or ``"both"`` (element-wise
    maximum of the two).
    """
    stats = _stats_of(perm)
    direction = str(getattr(direction, "value", direction)).lower()
    p_head = p_tail = None
    J_D = {}
    if direction in ("head", "both"):
        p_head, J_D["head"] = _direction_pvalues(stats, tau, Direction.HEAD)
    if direction in ("tail", "both"):
        p_tail, J_D["tail"] = _direction_pvalues(stats, tau, Direction.TAIL)
    if direction == "both":
        p, proc = np.maximum(p_head, p_tail), Procedure.CLUSTER_DEPTH_BOTH
    elif direction == "head":
        p, proc = p_head, Procedure.CLUSTER_DEPTH_HEAD
    elif direction == "tail":
        p, proc = p_tail, Procedure.CLUSTER_DEPTH_TAIL
    else:
        raise ValueError(f"unknown direction {direction!r}")
    ones = np.ones(stats.shape[1])
    table = _cluster_table(stats[0], tau, ones if p_head is None else p_head,
                           ones if p_tail is None else p_tail)
    return AdjustedPValueMap(p, proc, alpha, stats[0].copy(), stats.shape[0],
                             p_head=p_head, p_tail=p_tail, J_D=J_D, clusters=table,
                             tau=tau, channel=channel)


def cluster_depth_test(signals: SignalMatrix, design: DesignSpec, plan: PermutationPlan,
                       tau: Optional[float] = None, alpha: float = 0.05, direction="both",
                       threads: int = 1) -> AdjustedPValueMap:
    """Cluster depth tests from the head, the tail, or both."""
    tau = _default_tau(design, tau)
    perm = permuted_statistics(signals, design, plan, threads=threads)
    return cluster_depth_from_stats(perm, tau, alpha, direction)


# --------------------------------------------------------------------------- #
# cluster mass and TFCE


def cluster_mass_from_stats(perm, tau: float, aggregation="sum", alpha: float = 0.05,
                            channel: int = 0) -> AdjustedPValueMap:
    """Cluster mass test; every member of a cluster shares the cluster's p-value."""
    stats = _stats_of(perm)
    aggregation = Aggregation.parse(aggregation)
    null = max_cluster_mass(stats, tau, aggregation)
    observed = stats[0]
    p = np.ones(observed.shape[0])
    table = []
    for cl in form_clusters(observed, tau):
        mass = cluster_mass(cl, aggregation)
        pc = exceedance_counts(null, [mass])[0] / stats.shape[0]
        p[cl.start:cl.end + 1] = pc
        table.append(ClusterRecord(cl.start, cl.end, mass, np.full(len(cl), pc), np.full(len(cl), pc)))
    return AdjustedPValueMap(p, Procedure.CLUSTER_MASS, alpha, observed.copy(), stats.shape[0],
                             clusters=table, tau=tau, channel=channel)


def cluster_mass_test(signals, design, plan, tau=None, aggregation="sum", alpha=0.05,
                      threads=1) -> AdjustedPValueMap:
    tau = _default_tau(design, tau)
    perm = permuted_statistics(signals, design, plan, threads=threads)
    return cluster_mass_from_stats(perm, tau, aggregation, alpha)


def tfce_from_stats(perm, E: float = 0.5, H: float = 1.0, dh: float = 0.1, alpha: float = 0.05,
                    start: float = 0.0, channel: int = 0) -> AdjustedPValueMap:
    stats = _stats_of(perm)
    scores = tfce_rows(stats, E, H, dh, start)
    null = scores.max(axis=1)
    p = exceedance_counts(null, scores[0]) / stats.shape[0]
    return AdjustedPValueMap(p, Procedure.TFCE, alpha, stats[0].copy(), stats.shape[0],
                             channel=channel)


def tfce_test(signals, design, plan, E=0.5, H=1.0, dh=None, alpha=0.05, start=0.0,
              threads=1) -> AdjustedPValueMap:
    """TFCE test; ``dh`` defaults to 1/100 of the parametric 95% threshold."""
    if dh is None:
        dh = parametric_threshold(design, 0.95) / 100
    perm = permuted_statistics(signals, design, plan, threads=threads)
    return tfce_from_stats(perm, E, H, dh, alpha, start)


# --------------------------------------------------------------------------- #
# point-wise procedures


def maxt_from_stats(perm, alpha: float = 0.05, channel: int = 0) -> AdjustedPValueMap:
    stats = _stats_of(perm)
    null = stats.max(axis=1)
    p = exceedance_counts(null, stats[0]) / stats.shape[0]
    return AdjustedPValueMap(p, Procedure.MAX_T, alpha, stats[0].copy(), stats.shape[0],
                             channel=channel)


def minp_from_stats(perm, alpha: float = 0.05, channel: int = 0) -> AdjustedPValueMap:
    stats = _stats_of(perm)
    counts = _column_counts(stats, stats)
    row_min = counts.min(axis=1)
    p = exceedance_counts(-row_min.astype(float), -counts[0].astype(float)) / stats.shape[0]
    return AdjustedPValueMap(p, Procedure.MIN_P, alpha, stats[0].copy(), stats.shape[0],
                             channel=channel)


def troendle_from_stats(perm, alpha: float = 0.05, channel: int = 0) -> AdjustedPValueMap:
    stats = _stats_of(perm)
    p = troendle_stepdown(stats[0], stats)
    return AdjustedPValueMap(p, Procedure.TROENDLE, alpha, stats[0].copy(), stats.shape[0],
                             channel=channel)


def maxt_test(signals, design, plan, alpha=0.05, threads=1) -> AdjustedPValueMap:
    """Single-step max-T over time points."""
    return maxt_from_stats(permuted_statistics(signals, design, plan, threads=threads), alpha)


def minp_test(signals, design, plan, alpha=0.05, threads=1) -> AdjustedPValueMap:
    """Single-step min-p over time points."""
    return minp_from_stats(permuted_statistics(signals, design, plan, threads=threads), alpha)


def troendle_test(signals, design, plan, alpha=0.05, threads=1) -> AdjustedPValueMap:
    """Step-down min-p (Troendle) over time points, without clustering."""
    return troendle_from_stats(permuted_statistics(signals, design, plan, threads=threads), alpha)


# --------------------------------------------------------------------------- #
# multi-channel


def multichannel_depth_from_stats(perm, tau: float, alpha: float = 0.05,
                                  direction="both") -> list[AdjustedPValueMap]:
    """Cluster depth tests across channels with max-aggregated depth nulls.

    Depth null matrices are built per channel and direction, zero-padded to
    the widest one and combined by element-wise maximum; every channel's
    observed clusters are then tested against the combined distribution.
    """
    stats = _stats_of(perm)
    if stats.ndim == 2:
        stats = stats[:, :, None]
    c = stats.shape[2]
    direction = str(getattr(direction, "value", direction)).lower()
    dirs = [Direction.HEAD, Direction.TAIL] if direction == "both" else [Direction.parse(direction)]
    pvals = {d: [] for d in dirs}
    J_D = {}
    for d in dirs:
        mats = []
        for k in range(c):
            oriented = stats[:, ::-1, k] if d is Direction.TAIL else stats[:, :, k]
            mats.append(depth_matrix(oriented, tau, Direction.HEAD))
        width = max(mat.shape[1] for mat in mats)
        combined = np.zeros((stats.shape[0], width))
        for mat in mats:
            np.maximum(combined[:, :mat.shape[1]], mat, out=combined[:, :mat.shape[1]])
        J_D[d.value] = width
        null_counts = _column_counts(combined, combined)
        for k in range(c):
            oriented = stats[0, ::-1, k] if d is Direction.TAIL else stats[0, :, k]
            p = _depth_pvalues(oriented, combined, null_counts, tau)
            pvals[d].append(p[::-1] if d is Direction.TAIL else p)
    maps = []
    m = stats.shape[1]
    for k in range(c):
        p_head = pvals[Direction.HEAD][k] if Direction.HEAD in pvals else None
        p_tail = pvals[Direction.TAIL][k] if Direction.TAIL in pvals else None
        if p_head is not None and p_tail is not None:
            p, proc = np.maximum(p_head, p_tail), Procedure.CLUSTER_DEPTH_BOTH
        elif p_head is not None:
            p, proc = p_head, Procedure.CLUSTER_DEPTH_HEAD
        else:
            p, proc = p_tail, Procedure.CLUSTER_DEPTH_TAIL
        table = _cluster_table(stats[0, :, k], tau, np.ones(m) if p_head is None else p_head,
                               np.ones(m) if p_tail is None else p_tail)
        maps.append(AdjustedPValueMap(p, proc, alpha, stats[0, :, k].copy(), stats.shape[0],
                                      p_head=p_head, p_tail=p_tail, J_D=dict(J_D),
                                      clusters=table, tau=tau, channel=k))
    return maps


def multichannel_cluster_depth(signals: SignalMatrix, design: DesignSpec, plan: PermutationPlan,
                               tau: Optional[float] = None, alpha: float = 0.05,
                               direction="both", threads: int = 1) -> list[AdjustedPValueMap]:
    if signals.channel_count < 2:
        raise ValueError("multi-channel cluster depth needs at least 2 channels")
    tau = _default_tau(design, tau)
    perm = permuted_statistics(signals, design, plan, threads=threads)
    return multichannel_depth_from_stats(perm, tau, alpha, direction)


def run_procedure(procedure, perm, tau: float, alpha: float = 0.05, aggregation="sum",
                  E: float = 0.5, H: float = 1.0, dh: Optional[float] = None,
                  tfce_start: float = 0.0, channel: int = 0) -> AdjustedPValueMap:
    """Dispatch one procedure on a precomputed single-channel statistic matrix."""
    procedure = Procedure.parse(procedure)
    if procedure is Procedure.CLUSTER_DEPTH_BOTH:
        return cluster_depth_from_stats(perm, tau, alpha, "both", channel)
    if procedure is Procedure.CLUSTER_DEPTH_HEAD:
        return cluster_depth_from_stats(perm, tau, alpha, "head", channel)
    if procedure is Procedure.CLUSTER_DEPTH_TAIL:
        return cluster_depth_from_stats(perm, tau, alpha, "tail", channel)
    if procedure is Procedure.CLUSTER_MASS:
        return cluster_mass_from_stats(perm, tau, aggregation, alpha, channel)
    if procedure is Procedure.TFCE:
        return tfce_from_stats(perm, E, H, tau / 100 if dh is None else dh, alpha, tfce_start,
                               channel)
    if procedure is Procedure.MIN_P:
        return minp_from_stats(perm, alpha, channel)
    if procedure is Procedure.MAX_T:
        return maxt_from_stats(perm, alpha, channel)
    return troendle_from_stats(perm, alpha, channel)
