"""Channel-sparsity analysis of BN-scaled CNNs: weight skewness, pruning curves and prune knees."""
__version__ = "0.1.0"

from .analysis import CorrelationReport, Curve2D, KneeResult, correlate, kneedle, linear_regression, pearson, prune_knee
from .archzoo import ArchSpec, build_network, count_parameters
from .nncore import NetworkGraph, TrainingConfig, evaluate, fit, forward, gradient_check
from .pruner import ChannelRef, PruneStrategy, PruningCurve, iterative_prune, prune_channels, rank_channels
from .sparsity import GammaSnapshot, SparsityReport, collect_gammas, sparsity_report, weight_skewness

__all__ = [
    "ArchSpec", "ChannelRef", "CorrelationReport", "Curve2D", "GammaSnapshot", "KneeResult", "NetworkGraph",
    "PruneStrategy", "PruningCurve", "SparsityReport", "TrainingConfig", "build_network", "collect_gammas",
    "correlate", "count_parameters", "evaluate", "fit", "forward", "gradient_check", "iterative_prune",
    "kneedle", "linear_regression", "pearson", "prune_channels", "prune_knee", "rank_channels",
    "sparsity_report", "weight_skewness",
]
