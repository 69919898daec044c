"""Permutation-based multiple comparisons for mass-univariate signal tests.

Cluster depth tests with time-point level error control, alongside the
cluster mass test, TFCE, min-p, max-T and Troendle step-down baselines, and
a Monte-Carlo laboratory for FWER and power.
"""
__version__ = "0.1.0"

from .glm import (DesignError, DesignSpec, SignalError, SignalMatrix, StatSignal, fit_statistic,
                  parametric_threshold)
from .permute import (CapacityError, PermutationPlan, PermutedStatMatrix, Scheme, build_plan,
                      permuted_statistics)
from .clusters import (Aggregation, Cluster, DepthNullDistribution, Direction, cluster_mass,
                       depth_null, form_clusters, tfce_transform)
from .inference import (AdjustedPValueMap, Procedure, cluster_depth_test, cluster_mass_test,
                        maxt_test, minp_test, multichannel_cluster_depth, tfce_test,
                        troendle_stepdown, troendle_test)
from .simlab import (EffectSpec, NoiseSpec, SimulationMetrics, agresti_coull, generate_noise,
                     inject_effect, run_study)

__all__ = [
    "AdjustedPValueMap", "Aggregation", "CapacityError", "Cluster", "DepthNullDistribution",
    "DesignError", "DesignSpec", "Direction", "EffectSpec", "NoiseSpec", "PermutationPlan",
    "PermutedStatMatrix", "Procedure", "Scheme", "SignalError", "SignalMatrix",
    "SimulationMetrics", "StatSignal", "agresti_coull", "build_plan", "cluster_depth_test",
    "cluster_mass", "cluster_mass_test", "depth_null", "fit_statistic", "form_clusters",
    "generate_noise", "inject_effect", "maxt_test", "minp_test", "multichannel_cluster_depth",
    "parametric_threshold", "permuted_statistics", "run_study", "tfce_test", "tfce_transform",
    "troendle_stepdown", "troendle_test",
]
