"""Topologic Attention Networks built on Gaussian belief propagation."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("topologic-attention")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "uninstalled"

from .graph import GraphTopology, SparseSymmetricMatrix, build_topology
from .solver import SolverConfig, SolveResult, gabp_solve, residual

__all__ = [
    "GraphTopology",
    "SolveResult",
    "SolverConfig",
    "SparseSymmetricMatrix",
    "__version__",
    "build_topology",
    "gabp_solve",
    "residual",
]
