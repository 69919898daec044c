"""Per-time-point linear model fitting.

Every time point (and channel) shares the same design ``X``; the tested
hypothesis is ``G @ beta = 0``.  Statistics are computed from an orthonormal
basis of the design split into a reduced-model part and an effect part, so
the same code path serves observed and permuted data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, stats


class DesignError(ValueError):
    """Raised for inconsistent or rank-deficient designs and contrasts."""


class SignalError(ValueError):
    """Raised when response data violate shape or finiteness requirements."""


@dataclass(frozen=True, eq=False)
class SignalMatrix:
    """Response data, observations x time points (x channels).

    Parameters
    ----------
    data : ndarray, shape (n, m) or (n, m, c)
        One row per observation.
    sampling_rate : float, optional
        Hz; carried as metadata only.
    channel_names : sequence of str, optional
    """

    data: np.ndarray
    sampling_rate: Optional[float] = None
    channel_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim not in (2, 3):
            raise SignalError(f"signals must be 2-D or 3-D, got {data.ndim}-D")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise SignalError(f"need n >= 2 and m >= 2, got shape {data.shape}")
        if data.ndim == 3 and data.shape[2] < 1:
            raise SignalError("channel dimension is empty")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise SignalError(f"non-finite value at index {tuple(int(i) for i in bad)}")
        object.__setattr__(self, "data", data)
        if self.channel_names is not None:
            names = tuple(str(c) for c in self.channel_names)
            if len(names) != self.channel_count:
                raise SignalError(f"{len(names)} channel names for {self.channel_count} channels")
            object.__setattr__(self, "channel_names", names)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]

    @property
    def channel_count(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Data as (n, m * c); channel k occupies columns ``k*m .. (k+1)*m - 1``."""
        if self.data.ndim == 2:
            return self.data
        n, m, c = self.data.shape
        return self.data.transpose(0, 2, 1).reshape(n, c * m)

    def channel(self, k: int) -> "SignalMatrix":
        if self.data.ndim == 2:
            if k != 0:
                raise IndexError(k)
            return self
        return SignalMatrix(self.data[:, :, k], self.sampling_rate)

    def reversed(self) -> "SignalMatrix":
        return SignalMatrix(self.data[:, ::-1].copy(), self.sampling_rate, self.channel_names)


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Design matrix ``X`` (n x q) and contrast ``G`` (r x q).

    ``group_labels`` is optional metadata (one label per row).
    """

    X: np.ndarray
    G: np.ndarray
    group_labels: Optional[np.ndarray] = None
    column_names: Optional[Sequence[str]] = None
    _basis: "_Basis" = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DesignError("X must be a matrix")
        n, q = X.shape
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(G)):
            raise DesignError("design and contrast must be finite")
        if G.shape[1] != q:
            raise DesignError(f"contrast has {G.shape[1]} columns, design has {q}")
        if q >= n:
            raise DesignError(f"need q < n, got q={q}, n={n}")
        if np.linalg.matrix_rank(X) < q:
            raise DesignError("design matrix X is rank deficient")
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise DesignError("contrast matrix G does not have full row rank")
        if self.group_labels is not None:
            labels = np.asarray(self.group_labels)
            if labels.shape != (n,):
                raise DesignError(f"group_labels must have length {n}")
            object.__setattr__(self, "group_labels", labels)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "_basis", _Basis.from_design(X, G))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.G.shape[0]

    @property
    def df(self) -> tuple[float, float]:
        return float(self.r), float(self.n - self.q)

    @classmethod
    def two_group(cls, labels) -> "DesignSpec":
        """Intercept plus treatment dummy; tests the group difference."""
        labels = np.asarray(labels)
        levels = np.unique(labels)
        if levels.size != 2:
            raise DesignError(f"two_group needs exactly 2 levels, got {levels.size}")
        X = np.column_stack([np.ones(labels.size), (labels == levels[1]).astype(float)])
        return cls(X, np.array([[0.0, 1.0]]), group_labels=labels,
                   column_names=("intercept", str(levels[1])))

    @classmethod
    def one_way(cls, labels) -> "DesignSpec":
        """Intercept plus k-1 treatment dummies; tests all of them (ANOVA F)."""
        labels = np.asarray(labels)
        levels = np.unique(labels)
        if levels.size < 2:
            raise DesignError("one_way needs at least 2 levels")
        dummies = [(labels == lv).astype(float) for lv in levels[1:]]
        X = np.column_stack([np.ones(labels.size)] + dummies)
        G = np.hstack([np.zeros((levels.size - 1, 1)), np.eye(levels.size - 1)])
        names = ("intercept",) + tuple(str(lv) for lv in levels[1:])
        return cls(X, G, group_labels=labels, column_names=names)


@dataclass(frozen=True, eq=False)
class _Basis:
    # columns: reduced-model basis first, then the r effect columns
    Q: np.ndarray
    n_reduced: int
    r: int
    df_resid: int
    center: bool
    t_sign: float

    @classmethod
    def from_design(cls, X: np.ndarray, G: np.ndarray) -> "_Basis":
        n, q = X.shape
        r = G.shape[0]
        null = linalg.null_space(G)
        if null.shape[1]:
            Q0 = linalg.orth(X @ null)
        else:
            Q0 = np.zeros((n, 0))
        Xe = X - Q0 @ (Q0.T @ X)
        u, s, _ = np.linalg.svd(Xe, full_matrices=False)
        # projection round-off scales with X, not with what is left of it
        tol = 1e-10 * np.linalg.norm(X, 2)
        if int(np.sum(s > tol)) != r:
            raise DesignError("contrast is not estimable under this design")
        Qe = u[:, :r]
        ones = np.ones(n) / np.sqrt(n)
        center = Q0.shape[1] > 0 and np.linalg.norm(ones - Q0 @ (Q0.T @ ones)) < 1e-10
        t_sign = 1.0
        if r == 1:
            a = X @ np.linalg.solve(X.T @ X, G[0])
            t_sign = 1.0 if float(a @ Qe[:, 0]) >= 0 else -1.0
        return cls(np.hstack([Q0, Qe]), Q0.shape[1], r, n - q, bool(center), t_sign)


@dataclass(eq=False)
class StatSignal:
    """Statistic per time point for one channel.

    ``degenerate`` flags time points with zero residual variance; their value
    is 0 when the effect sum of squares is also zero and +inf otherwise.
    """

    values: np.ndarray
    statistic_kind: str = "F"
    df: tuple[float, float] = (1.0, 1.0)
    degenerate: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.values.shape, dtype=bool)

    def __len__(self):
        return self.values.shape[0]


def prepare(data: np.ndarray, design: DesignSpec) -> np.ndarray:
    """Column-center ``data`` when the reduced model contains the constant.

    F is invariant to that shift and centering keeps the residual sum of
    squares away from catastrophic cancellation.
    """
    data = np.asarray(data, dtype=float)
    if design._basis.center:
        centered = data - data.mean(axis=0)
        # constant columns leave only round-off; zero them so they stay degenerate
        scale = np.abs(data).max(axis=0)
        flat = np.abs(centered).max(axis=0) <= 64 * np.finfo(float).eps * scale
        centered[:, flat] = 0.0
        return centered
    return data


def residualize(data: np.ndarray, design: DesignSpec) -> np.ndarray:
    """Full-model residuals ``(I - H) Y``."""
    Q = design._basis.Q
    return data - Q @ (Q.T @ data)


def batch_statistic(data, design, index, kind="F", return_flags=False):
    """Statistics of ``data[index[b]]`` for every row ``b`` of ``index``.

    Parameters
    ----------
    data : ndarray, shape (n, M)
        Already prepared responses (see :func:`prepare`).
    index : ndarray of int, shape (B, n)
        Row permutations.

    Returns
    -------
    ndarray, shape (B, M)

    Notes
    -----
    ``Q' Y[p] = Q[p^-1]' Y``, so the small basis is permuted instead of the
    data.  Accumulation runs over observations in a fixed order with
    element-wise operations only, which keeps every column's value
    independent of its position and of the batch size.
    """
    basis = design._basis
    data = np.asarray(data, dtype=float)
    index = np.atleast_2d(index)
    B, n = index.shape
    M = data.shape[1]
    inv = np.argsort(index, axis=1, kind="stable")
    Qp = basis.Q[inv]  # (B, n, k)
    total = np.zeros(M)
    for i in range(n):
        total += data[i] * data[i]
    fitted_ss = np.zeros((B, M))
    effect_ss = np.zeros((B, M))
    effect_coef = None
    for k in range(basis.Q.shape[1]):
        coef = np.zeros((B, M))
        for i in range(n):
            coef += Qp[:, i, k][:, None] * data[i][None, :]
        sq = coef * coef
        fitted_ss += sq
        if k >= basis.n_reduced:
            effect_ss += sq
            effect_coef = coef
    ssr = np.maximum(total[None, :] - fitted_ss, 0.0)
    tol = 1e-12 * np.maximum(total, np.finfo(float).tiny)[None, :]
    degenerate = ssr <= tol
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "F":
            out = (effect_ss / basis.r) / (ssr / basis.df_resid)
        elif kind == "t":
            if basis.r != 1:
                raise DesignError("t statistic requires a single-row contrast")
            out = basis.t_sign * effect_coef / np.sqrt(ssr / basis.df_resid)
        else:
            raise ValueError(f"unknown statistic kind {kind!r}")
    if degenerate.any():
        zero_effect = effect_ss <= tol
        if kind == "F":
            fill = np.where(zero_effect, 0.0, np.inf)
        else:
            fill = np.where(zero_effect, 0.0, np.copysign(np.inf, basis.t_sign * effect_coef))
        out = np.where(degenerate, fill, out)
    if return_flags:
        return out, degenerate
    return out


def fit_statistic(signals: SignalMatrix, design: DesignSpec, kind: str = "F"):
    """Observed statistic per time point.

    Returns a :class:`StatSignal` for single-channel data and a list with one
    :class:`StatSignal` per channel otherwise.
    """
    if design.n != signals.n:
        raise DesignError(f"design has {design.n} rows, signals have {signals.n}")
    if design.n - design.q < 1:
        raise DesignError("no residual degrees of freedom")
    data = prepare(signals.flat(), design)
    identity = np.arange(signals.n)[None, :]
    values, flags = batch_statistic(data, design, identity, kind=kind, return_flags=True)
    values, flags = values[0], flags[0]
    m = signals.m
    out = [StatSignal(values[k * m:(k + 1) * m], kind, design.df, flags[k * m:(k + 1) * m])
           for k in range(signals.channel_count)]
    return out[0] if signals.channel_count == 1 else out


def parametric_threshold(design: DesignSpec, quantile: float = 0.95) -> float:
    """F quantile at the design's degrees of freedom (cluster-forming threshold)."""
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    df1, df2 = design.df
    if df1 <= 0 or df2 <= 0:
        raise DesignError(f"invalid degrees of freedom ({df1}, {df2})")
    if quantile == 1.0:
        return float("inf")
    return float(stats.f.ppf(quantile, df1, df2))
