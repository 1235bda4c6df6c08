"""Two-layer soft-thresholding networks and their convex dual programs."""
from .arrangements import PatternSet, RegionPattern, classify_regions, sample_patterns
from .dataio import Image, PatchMatrix, im2col, load_mnist_idx
from .dual import ConeConvention, DualParams, DualSolveConfig, recover_primal, solve_dual
from .primal import InitConfig, OptimizerConfig, PrimalParams, primal_objective, train_primal

__all__ = [
    "ConeConvention", "DualParams", "DualSolveConfig", "Image", "InitConfig", "OptimizerConfig",
    "PatchMatrix", "PatternSet", "PrimalParams", "RegionPattern", "classify_regions", "im2col",
    "load_mnist_idx", "primal_objective", "recover_primal", "sample_patterns", "solve_dual",
    "train_primal",
]
