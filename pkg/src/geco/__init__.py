"""Geometry-aware semantic correspondence with an optimal-transport loss."""

from importlib.resources import files

from .features import FeatureMap, GecoError, Keypoint, PairAnnotation
from .ot import BALANCED, UNBALANCED, Marginals, ScoreMatrix, SolverConfig, TransportPlan, solve

__version__ = "0.1.0"


def data_path(name: str):
    """Path of a file shipped in the package's ``data`` directory."""
    return files(__name__) / "data" / name


__all__ = [
    "BALANCED",
    "UNBALANCED",
    "FeatureMap",
    "GecoError",
    "Keypoint",
    "Marginals",
    "PairAnnotation",
    "ScoreMatrix",
    "SolverConfig",
    "TransportPlan",
    "data_path",
    "solve",
]
