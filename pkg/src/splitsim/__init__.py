"""Split-learning simulator: protocol, inference attacks, defenses, harness."""

__version__ = "0.1.0"

from .backbones import SplitAssignment, build_backbone, split_u, split_vanilla
from .graph import ModelGraph, SkipEdge, count_flops, param_count, summary

__all__ = [
    "ModelGraph",
    "SkipEdge",
    "SplitAssignment",
    "build_backbone",
    "count_flops",
    "param_count",
    "split_u",
    "split_vanilla",
    "summary",
    "__version__",
]
