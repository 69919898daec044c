"""Monte-Carlo study of FWER and power for two-group signal designs.

Each replication draws correlated Gaussian noise for two groups, adds a
known effect to the second group, runs the selected procedures and
classifies every time point against the true effect mask.
"""
from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .glm import DesignSpec, SignalMatrix, parametric_threshold
from .inference import Procedure, run_procedure
from .permute import RNG_ALGORITHM, Scheme, build_plan, permuted_statistics

log = logging.getLogger(__name__)


class FactorizationError(np.linalg.LinAlgError):
    """The requested autocovariance is not numerically positive semi-definite."""


class NoiseKind(str, enum.Enum):
    INDEPENDENT = "independent"
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


class Shape(str, enum.Enum):
    SQUARE = "square"
    TRIANGULAR = "triangular"


class Regions(str, enum.Enum):
    NONE = "none"
    ONE = "one"
    TWO = "two"
    TWO_NEARBY = "two_nearby"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.INDEPENDENT
    m: int = 400
    range: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if not self.range > 0:
            raise ValueError("range must be positive")

    def covariance(self) -> np.ndarray:
        d = np.abs(np.subtract.outer(np.arange(self.m), np.arange(self.m))).astype(float)
        if self.kind is NoiseKind.INDEPENDENT:
            return np.eye(self.m)
        if self.kind is NoiseKind.GAUSSIAN:
            return np.exp(-(d / self.range) ** 2)
        return np.exp(-d / self.range)

    def factor(self) -> np.ndarray:
        """Symmetric square root ``L`` with ``L @ L.T == covariance``."""
        return _symmetric_root(self.kind.value, self.m, self.range)


_ROOT_CACHE: dict = {}


def _symmetric_root(kind: str, m: int, rng: float) -> np.ndarray:
    key = (kind, m, rng)
    if key not in _ROOT_CACHE:
        spec = NoiseSpec(kind, m, rng)
        if spec.kind is NoiseKind.INDEPENDENT:
            root = np.eye(m)
        else:
            w, v = np.linalg.eigh(spec.covariance())
            # rounding leaves tiny negative eigenvalues on smooth kernels;
            # anything beyond that is reported instead of patched
            if w.min() < -1e-8 * w.max():
                raise FactorizationError(
                    f"{kind} autocovariance (m={m}, range={rng}) is not positive semi-definite: "
                    f"smallest eigenvalue {w.min():.3g}")
            root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        _ROOT_CACHE[key] = root
    return _ROOT_CACHE[key]


def generate_noise(spec: NoiseSpec, n: int, seed) -> SignalMatrix:
    """``n`` i.i.d. rows from ``N(0, Sigma)`` with the spec's autocovariance.

    ``seed`` is an int, a ``SeedSequence`` or a ``Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((n, spec.m))
    if spec.kind is NoiseKind.INDEPENDENT:
        return SignalMatrix(z)
    return SignalMatrix(z @ spec.factor().T)


@dataclass(frozen=True)
class EffectSpec:
    """Location and size of the true effect.

    ``proportion`` of the ``m`` time points carry the effect; lengths are
    rounded to the nearest integer.
    """

    shape: Shape = Shape.SQUARE
    regions: Regions = Regions.ONE
    proportion: float = 0.10
    beta_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "regions", Regions(self.regions))
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError("proportion must lie in [0, 1]")

    def region_bounds(self, m: int) -> list[tuple[int, int]]:
        """0-based ``(start, stop)`` half-open intervals of the true regions."""
        if self.regions is Regions.NONE:
            return []
        total = int(math.floor(self.proportion * m + 0.5))
        if total == 0:
            return []
        if self.regions is Regions.ONE:
            lengths = [total]
            centers = [m / 2]
        else:
            lengths = [math.ceil(total / 2), total // 2]
            lengths = [length for length in lengths if length > 0]
            centers = [m / 3, 2 * m / 3]
        if self.regions is Regions.TWO_NEARBY and len(lengths) == 2:
            span = lengths[0] + 1 + lengths[1]
            first = _place(m / 2, span, m)
            bounds = [(first, first + lengths[0]), (first + lengths[0] + 1, first + span)]
        else:
            bounds = []
            for c, length in zip(centers, lengths):
                s = _place(c, length, m)
                bounds.append((s, s + length))
        return bounds

    def truth_mask(self, m: int) -> np.ndarray:
        mask = np.zeros(m, dtype=bool)
        for s, e in self.region_bounds(m):
            mask[s:e] = True
        return mask

    def betas(self, m: int) -> np.ndarray:
        beta = np.zeros(m)
        for s, e in self.region_bounds(m):
            length = e - s
            if self.shape is Shape.SQUARE:
                beta[s:e] = self.beta_max
            else:
                beta[s:e] = self.beta_max * np.arange(1, length + 1) / length
        return beta


def _place(center: float, length: int, m: int) -> int:
    # 1-based start = round(center) - floor(length / 2)
    start = int(math.floor(center + 0.5)) - length // 2 - 1
    return min(max(start, 0), m - length)


def inject_effect(noise: SignalMatrix, groups, effect: EffectSpec) -> SignalMatrix:
    """Add the effect profile to the rows of the second group level."""
    groups = np.asarray(groups)
    levels = np.unique(groups)
    if levels.size != 2:
        raise ValueError("inject_effect expects a two-group labelling")
    data = noise.data.copy()
    data[groups == levels[1]] += effect.betas(noise.m)
    return SignalMatrix(data, noise.sampling_rate)


def agresti_coull(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Add-two-successes-and-two-failures interval, clipped to [0, 1]."""
    if trials <= 0:
        return 0.0, 1.0
    p = (successes + 2) / (trials + 4)
    half = z * math.sqrt(p * (1 - p) / (trials + 4))
    return max(0.0, p - half), min(1.0, p + half)


@dataclass
class SimulationMetrics:
    procedure: str
    fwer: float
    fwer_ci: tuple[float, float]
    average_power: float
    disjunctive_power: float
    replications: int
    failures: int = 0
    false_positive_replications: int = 0
    true_positive_replications: int = 0
    power_ratios: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class ReplicationRecord:
    """Table 1 quantities for one replication and procedure."""

    replication: int
    procedure: str
    V: int
    S: int
    m1: int
    m: int
    failed: bool = False
    error: str = ""

    @property
    def power_ratio(self) -> float:
        return self.S / self.m1 if self.m1 else 0.0


@dataclass(frozen=True)
class ProcedureSpec:
    """A procedure plus the permutation scheme whose statistics it reads."""

    name: str
    procedure: Procedure
    scheme: Scheme


_PROCEDURE_ALIASES = {
    "clusterdepth": ("clusterdepth", "terbraak"),
    "clusterdepth_terbraak": ("clusterdepth", "terbraak"),
    "clusterdepth_manly": ("clusterdepth", "manly"),
    "clusterdepth_head": ("clusterdepth_head", "terbraak"),
    "clustermass": ("clustermass", "manly"),
    "tfce": ("tfce", "manly"),
    "minp": ("minp", "manly"),
    "maxt": ("maxt", "manly"),
    "troendle": ("troendle", "manly"),
}


def resolve_procedures(names: Sequence, default_scheme: Optional[str] = None) -> list[ProcedureSpec]:
    """Map names like ``clusterdepth_manly`` or ``troendle`` to procedure specs.

    A ``name:scheme`` suffix overrides the scheme; otherwise cluster-depth
    names without a scheme use ter Braak and the rest use
    ``default_scheme`` (Manly when not given).
    """
    specs = []
    for raw in names:
        name, _, scheme = str(raw).partition(":")
        key = name.lower().replace("-", "_")
        if key in _PROCEDURE_ALIASES:
            proc, default = _PROCEDURE_ALIASES[key]
        else:
            proc = Procedure.parse(name).value
            default = "terbraak" if proc.startswith("clusterdepth") else "manly"
        if not scheme and default_scheme and not key.startswith("clusterdepth_"):
            scheme = default_scheme
        specs.append(ProcedureSpec(str(raw), Procedure.parse(proc), Scheme.parse(scheme or default)))
    return specs


@dataclass(frozen=True)
class StudyConfig:
    noise: NoiseSpec
    effect: EffectSpec
    procedures: tuple
    replications: int = 100
    n_perm: int = 1000
    seed: int = 0
    n_per_group: int = 10
    alpha: float = 0.05
    tau_quantile: float = 0.95
    aggregation: str = "sum"
    E: float = 0.5
    H: float = 1.0
    dh: Optional[float] = None


def _replication_seeds(seed: int, rep: int):
    ss = np.random.SeedSequence([int(seed), int(rep)])
    noise_ss, plan_ss = ss.spawn(2)
    return noise_ss, int(plan_ss.generate_state(1, np.uint64)[0])


def run_replication(cfg: StudyConfig, rep: int) -> list[ReplicationRecord]:
    """One replication: generate, inject, test, classify."""
    specs = resolve_procedures(cfg.procedures)
    m = cfg.noise.m
    groups = np.repeat([0, 1], cfg.n_per_group)
    truth = cfg.effect.truth_mask(m)
    m1 = int(truth.sum())
    design = DesignSpec.two_group(groups)
    tau = parametric_threshold(design, cfg.tau_quantile)
    noise_seed, plan_seed = _replication_seeds(cfg.seed, rep)
    records = []
    try:
        data = inject_effect(generate_noise(cfg.noise, groups.size, noise_seed), groups, cfg.effect)
        stats = {}
        base = build_plan(groups.size, cfg.n_perm, plan_seed, Scheme.MANLY)
    except Exception as exc:  # recorded, not fatal
        log.warning("replication %d failed: %s", rep, exc)
        return [ReplicationRecord(rep, s.name, 0, 0, m1, m, True, repr(exc)) for s in specs]
    for spec in specs:
        try:
            if spec.scheme not in stats:
                plan = replace(base, scheme=spec.scheme)
                stats[spec.scheme] = permuted_statistics(data, design, plan)
            result = run_procedure(spec.procedure, stats[spec.scheme], tau, cfg.alpha,
                                   aggregation=cfg.aggregation, E=cfg.E, H=cfg.H, dh=cfg.dh)
            sig = result.significant
            records.append(ReplicationRecord(rep, spec.name, int(np.sum(sig & ~truth)),
                                             int(np.sum(sig & truth)), m1, m))
        except Exception as exc:  # recorded, not fatal
            log.warning("replication %d, %s failed: %s", rep, spec.name, exc)
            records.append(ReplicationRecord(rep, spec.name, 0, 0, m1, m, True, repr(exc)))
    return records


def _run_chunk(args):
    cfg, reps = args
    out = []
    for rep in reps:
        out.extend(run_replication(cfg, rep))
    return out


def summarize(records: Sequence[ReplicationRecord], procedures: Optional[Sequence[str]] = None
              ) -> dict[str, SimulationMetrics]:
    """Aggregate per-replication records into metrics per procedure."""
    names = list(procedures) if procedures is not None else list(dict.fromkeys(r.procedure for r in records))
    out = {}
    for name in names:
        rows = [r for r in records if r.procedure == name]
        ok = [r for r in rows if not r.failed]
        n = len(ok)
        fp = sum(1 for r in ok if r.V > 0)
        tp = sum(1 for r in ok if r.S > 0)
        ratios = [r.power_ratio for r in ok]
        out[name] = SimulationMetrics(
            procedure=name,
            fwer=fp / n if n else 0.0,
            fwer_ci=agresti_coull(fp, n),
            average_power=math.fsum(ratios) / n if n else 0.0,
            disjunctive_power=tp / n if n else 0.0,
            replications=n,
            failures=len(rows) - n,
            false_positive_replications=fp,
            true_positive_replications=tp,
            power_ratios=ratios,
        )
    return out


def run_study(noise: NoiseSpec, effect: EffectSpec, procedures: Sequence, replications: int = 100,
              n_perm: int = 1000, seed: int = 0, workers: int = 1, n_per_group: int = 10,
              alpha: float = 0.05, return_records: bool = False, **params):
    """Estimate FWER, average power and disjunctive power per procedure.

    Each replication seeds its own generators from ``(seed, replication)``,
    so results do not depend on ``workers``.
    """
    cfg = StudyConfig(noise, effect, tuple(procedures), replications, n_perm, seed,
                      n_per_group, alpha, **params)
    reps = list(range(replications))
    if workers > 1 and replications > 1:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c) for c in chunks]))
        records = sorted((r for part in parts for r in part),
                         key=lambda r: (r.replication, cfg.procedures.index(r.procedure)))
    else:
        records = _run_chunk((cfg, reps))
    metrics = summarize(records, [str(p) for p in cfg.procedures])
    if return_records:
        return metrics, records
    return metrics


def study_metadata(cfg_like: dict) -> dict:
    """Settings echoed into every emitted simulation file."""
    meta = dict(cfg_like)
    meta["rng"] = RNG_ALGORITHM
    return meta


def record_dict(record: ReplicationRecord) -> dict:
    return asdict(record)
