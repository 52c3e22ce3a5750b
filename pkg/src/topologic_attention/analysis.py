"""Correlation structure implied by a precision matrix."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from ._logging import get_logger
from .exceptions import InputError, NumericBreakdownError
from .graph import fiedler_order
from .solver import SolverConfig, gabp_solve

if TYPE_CHECKING:
    import numpy.typing as npt

    from .graph import SparseSymmetricMatrix

    FloatArray = npt.NDArray[np.float64]

logger = get_logger(__name__)

MAX_CORRELATION_NODES = 2000
CHUNK_COLUMNS = 256


@dataclass(frozen=True)
class CorrelationResult:
    correlation: FloatArray
    """(N, N) in original node order."""
    order: npt.NDArray[np.int64]
    """Fiedler ordering of the nodes."""
    max_iterations: int
    all_converged: bool


def correlation_matrix(
    matrix: SparseSymmetricMatrix, cfg: SolverConfig | None = None
) -> CorrelationResult:
    """``corr_ij = C_ij / sqrt(C_ii C_jj)`` with ``C = J^-1`` from GaBP solves.

    ``C`` is assembled column block by column block from ``J X = I``.

    Raises
    ------
    InputError
        If the matrix has more than 2000 nodes, or an implied variance is not
        positive.
    """
    n = matrix.node_count
    if n > MAX_CORRELATION_NODES:
        raise InputError(
            f"refusing to export a {n}x{n} correlation matrix "
            f"(limit {MAX_CORRELATION_NODES} nodes)"
        )
    cfg = cfg or SolverConfig()
    covariance = np.empty((n, n))
    max_iterations = 0
    converged = True
    for lo in range(0, n, CHUNK_COLUMNS):
        hi = min(lo + CHUNK_COLUMNS, n)
        rhs = np.zeros((n, hi - lo))
        rhs[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
        try:
            result = gabp_solve(matrix, rhs, cfg)
        except NumericBreakdownError as e:
            raise e.annotate(f"columns {lo}..{hi - 1}") from e
        covariance[:, lo:hi] = result.mu
        max_iterations = max(max_iterations, result.iterations)
        converged &= result.converged
    if not converged:
        logger.warning(
            "some correlation solves stopped at max_iter=%d; values are approximate",
            cfg.max_iter,
        )
    covariance = 0.5 * (covariance + covariance.T)
    variance = np.diag(covariance).copy()
    if (variance <= 0).any():
        bad = int(np.flatnonzero(variance <= 0)[0])
        raise InputError(f"implied variance of node {bad} is {variance[bad]:.3g}")
    scale = 1.0 / np.sqrt(variance)
    return CorrelationResult(
        correlation=covariance * np.outer(scale, scale),
        order=fiedler_order(matrix),
        max_iterations=max_iterations,
        all_converged=converged,
    )


def adjacency(matrix: SparseSymmetricMatrix) -> FloatArray:
    """Binary support of the off-diagonal entries."""
    n = matrix.node_count
    out = np.zeros((n, n))
    i, j = matrix.topology.edges[:, 0], matrix.topology.edges[:, 1]
    out[i, j] = out[j, i] = 1.0
    return out


def export_correlation(
    matrix: SparseSymmetricMatrix,
    directory: str | Path,
    cfg: SolverConfig | None = None,
) -> CorrelationResult:
    """Write ``correlation.csv``, ``adjacency.csv`` and ``order.csv``.

    Both matrices are permuted by the Fiedler order so community blocks sit
    on the diagonal.
    """
    result = correlation_matrix(matrix, cfg)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    order = result.order
    np.savetxt(
        out / "correlation.csv",
        result.correlation[np.ix_(order, order)],
        delimiter=",",
        fmt="%.17g",
    )
    np.savetxt(
        out / "adjacency.csv",
        adjacency(matrix)[np.ix_(order, order)],
        delimiter=",",
        fmt="%d",
    )
    np.savetxt(out / "order.csv", order, fmt="%d")
    logger.info("wrote correlation export for %d nodes to %s", matrix.node_count, out)
    return result
