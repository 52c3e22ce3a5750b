"""Fixed-topology sparse symmetric matrices and spectral diagnostics.

Edges are stored once, canonicalized to ``i < j`` and sorted
lexicographically.  Directed messages derived from edge ``e = (i, j)`` use ids
``2 * e`` for ``i -> j`` and ``2 * e + 1`` for ``j -> i``.  With that layout
the directed edges arriving at a node, sorted by id, are also sorted by the
id of the sending neighbor, which is what gives every reduction in this
package a fixed ascending-neighbor order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from ._logging import get_logger
from .exceptions import DomainError, InputError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    import numpy.typing as npt

    FloatArray = npt.NDArray[np.float64]
    IntArray = npt.NDArray[np.int64]

logger = get_logger(__name__)

POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """Undirected simple graph with a per-node sorted adjacency index."""

    node_count: int
    edges: IntArray
    """(E, 2) array of canonical pairs, ``edges[:, 0] < edges[:, 1]``."""
    indptr: IntArray = field(repr=False)
    """CSR row pointer into `neighbors` / `incident_edges` (length N + 1)."""
    neighbors: IntArray = field(repr=False)
    """Neighbor ids, ascending within each node's slice."""
    incident_edges: IntArray = field(repr=False)
    """Edge ids aligned with `neighbors`."""

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def neighbors_of(self, node: int) -> IntArray:
        return self.neighbors[self.indptr[node] : self.indptr[node + 1]]

    def edges_of(self, node: int) -> IntArray:
        return self.incident_edges[self.indptr[node] : self.indptr[node + 1]]

    def edge_list(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in self.edges]

    @cached_property
    def degrees(self) -> IntArray:
        return _frozen(np.diff(self.indptr))

    @cached_property
    def sources(self) -> IntArray:
        """Sender of each directed edge (length 2E)."""
        return _frozen(self.edges.reshape(-1).copy())

    @cached_property
    def targets(self) -> IntArray:
        """Receiver of each directed edge (length 2E)."""
        return _frozen(self.edges[:, ::-1].reshape(-1).copy())

    @cached_property
    def inbox(self) -> sp.csr_matrix:
        """(N, 2E) 0/1 matrix summing directed messages into their receivers.

        Column indices are sorted, so each row reduces in ascending neighbor
        order.
        """
        n_dir = 2 * self.edge_count
        order = np.lexsort((np.arange(n_dir), self.targets))
        counts = np.bincount(self.targets, minlength=self.node_count)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return sp.csr_matrix(
            (np.ones(n_dir), order.astype(np.int64), indptr),
            shape=(self.node_count, n_dir),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraphTopology):
            return NotImplemented
        return self.node_count == other.node_count and np.array_equal(
            self.edges, other.edges
        )

    __hash__ = None  # type: ignore[assignment]


def build_topology(
    node_count: int, edge_list: Iterable[Sequence[int]] | np.ndarray
) -> GraphTopology:
    """Canonicalize an edge list into a `GraphTopology`.

    Self loops are dropped, duplicates and reversed pairs collapsed.

    Parameters
    ----------
    node_count : int
        Number of nodes; must be positive.
    edge_list : iterable of pairs or (m, 2) array
        Node index pairs in any order.

    Raises
    ------
    InputError
        If `node_count` is not positive or a pair references a node outside
        ``[0, node_count)``.
    """
    if node_count < 1:
        raise InputError(f"node_count must be positive, got {node_count}")
    pairs = np.asarray(
        edge_list if isinstance(edge_list, np.ndarray) else list(edge_list),
        dtype=np.int64,
    )
    if pairs.size == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise InputError(f"edge list must contain pairs, got shape {pairs.shape}")
    bad = np.flatnonzero(((pairs < 0) | (pairs >= node_count)).any(axis=1))
    if bad.size:
        i, j = pairs[bad[0]]
        raise InputError(
            f"edge ({i}, {j}) references a node outside [0, {node_count})"
        )

    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    canonical = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    canonical = canonical.reshape(-1, 2).astype(np.int64)
    return _index_topology(node_count, canonical)


def _index_topology(node_count: int, edges: IntArray) -> GraphTopology:
    edge_ids = np.arange(edges.shape[0], dtype=np.int64)
    owner = np.concatenate([edges[:, 0], edges[:, 1]])
    other = np.concatenate([edges[:, 1], edges[:, 0]])
    ids = np.concatenate([edge_ids, edge_ids])
    order = np.lexsort((other, owner))
    counts = np.bincount(owner, minlength=node_count)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return GraphTopology(
        node_count=node_count,
        edges=_frozen(edges),
        indptr=_frozen(indptr),
        neighbors=_frozen(other[order].astype(np.int64)),
        incident_edges=_frozen(ids[order].astype(np.int64)),
    )


@dataclass(frozen=True, eq=False)
class SparseSymmetricMatrix:
    """Symmetric matrix restricted to a topology's edges plus the diagonal.

    Symmetry is structural: one value per undirected edge.
    """

    topology: GraphTopology
    diagonal: FloatArray
    off_diagonal: FloatArray

    def __post_init__(self) -> None:
        diag = np.array(self.diagonal, dtype=np.float64).reshape(-1)
        off = np.array(self.off_diagonal, dtype=np.float64).reshape(-1)
        if diag.shape[0] != self.topology.node_count:
            raise InputError(
                f"diagonal has {diag.shape[0]} entries for "
                f"{self.topology.node_count} nodes"
            )
        if off.shape[0] != self.topology.edge_count:
            raise InputError(
                f"off_diagonal has {off.shape[0]} entries for "
                f"{self.topology.edge_count} edges"
            )
        object.__setattr__(self, "diagonal", _frozen(diag))
        object.__setattr__(self, "off_diagonal", _frozen(off))

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.diagonal).all() and np.isfinite(self.off_diagonal).all()
        )

    def to_scipy(self) -> sp.csr_matrix:
        n = self.node_count
        i, j = self.topology.edges[:, 0], self.topology.edges[:, 1]
        diag = np.arange(n)
        rows = np.concatenate([i, j, diag])
        cols = np.concatenate([j, i, diag])
        vals = np.concatenate([self.off_diagonal, self.off_diagonal, self.diagonal])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def to_dense(self) -> FloatArray:
        dense = np.diag(self.diagonal).astype(np.float64)
        i, j = self.topology.edges[:, 0], self.topology.edges[:, 1]
        dense[i, j] = self.off_diagonal
        dense[j, i] = self.off_diagonal
        return dense

    def matvec(self, x: np.ndarray) -> FloatArray:
        """Return ``J @ x`` for a vector or a node x column matrix."""
        return np.asarray(self.to_scipy() @ np.asarray(x, dtype=np.float64))

    def permuted(self, perm: Sequence[int] | np.ndarray) -> SparseSymmetricMatrix:
        """Symmetric relabeling: new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        n = self.node_count
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise InputError("perm must be a permutation of the node ids")
        new_id = np.empty(n, dtype=np.int64)
        new_id[perm] = np.arange(n)
        mapped = new_id[self.topology.edges]
        lo, hi = mapped.min(axis=1), mapped.max(axis=1)
        order = np.lexsort((hi, lo))
        topology = _index_topology(n, np.stack([lo, hi], axis=1)[order])
        return SparseSymmetricMatrix(
            topology, self.diagonal[perm], self.off_diagonal[order]
        )


@dataclass(frozen=True)
class WalkSummabilityReport:
    """Outcome of the spectral test ``rho(|I - D^-1/2 J D^-1/2|) < 1``."""

    spectral_radius: float
    normalized: bool
    iterations_used: int
    converged: bool

    @property
    def walk_summable(self) -> bool:
        return self.spectral_radius < 1.0


def require_positive_diagonal(matrix: SparseSymmetricMatrix) -> None:
    if not matrix.is_finite():
        raise InputError("matrix contains NaN or Inf entries")
    bad = np.flatnonzero(matrix.diagonal <= 0)
    if bad.size:
        raise DomainError(
            f"diagonal entry J[{bad[0]},{bad[0]}] = {matrix.diagonal[bad[0]]} "
            "is not strictly positive"
        )


def _symmetric_csr(
    topology: GraphTopology, weights: FloatArray, diagonal: FloatArray | None = None
) -> sp.csr_matrix:
    n = topology.node_count
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    rows, cols, vals = [i, j], [j, i], [weights, weights]
    if diagonal is not None:
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diagonal)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )


def spectral_radius_abs_residual(
    matrix: SparseSymmetricMatrix,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
) -> WalkSummabilityReport:
    """Estimate ``rho(|I - J~|)`` with ``J~ = D^-1/2 J D^-1/2``, ``D = diag(J)``.

    ``R = |I - J~|`` has a zero diagonal and the absolute normalized couplings
    off the diagonal.  Because ``R`` is entrywise nonnegative its Perron root
    equals its spectral radius; the power iteration runs on ``R + I`` so that
    bipartite graphs (spectrum symmetric about zero) still have a unique
    dominant eigenvalue.  Convergence is declared when the Rayleigh quotient
    changes by at most `tol`.

    Raises
    ------
    DomainError
        If any diagonal entry is zero or negative.
    """
    require_positive_diagonal(matrix)
    topology = matrix.topology
    scale = 1.0 / np.sqrt(matrix.diagonal)
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    residual = _symmetric_csr(
        topology, np.abs(matrix.off_diagonal) * scale[i] * scale[j]
    )

    x = np.full(matrix.node_count, 1.0 / np.sqrt(matrix.node_count))
    estimate = previous = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        y = residual @ x + x
        estimate = float(x @ y) - 1.0
        norm = float(np.linalg.norm(y))
        x = y / norm
        if iterations > 1 and abs(estimate - previous) <= tol:
            converged = True
            break
        previous = estimate
    if not converged:
        logger.warning(
            "power iteration did not converge in %d iterations (last estimate %g)",
            max_iter,
            estimate,
        )
    return WalkSummabilityReport(
        spectral_radius=max(estimate, 0.0),
        normalized=True,
        iterations_used=iterations,
        converged=converged,
    )


def fiedler_order(
    matrix: SparseSymmetricMatrix,
    tol: float = 1e-10,
    max_iter: int = POWER_MAX_ITER,
    seed: int = 0,
) -> IntArray:
    """Order nodes by the second eigenvector of the normalized support Laplacian.

    The support graph carries weights ``|J_ij|``; zero-degree nodes get an
    identity row.  The eigenvector of the second-smallest eigenvalue of
    ``L = I - D^-1/2 W D^-1/2`` is found by power iteration on ``2I - L``
    deflated against the known null vector ``D^1/2 1``.  Ties (after rounding
    to 12 decimals) are broken by node id.
    """
    n = matrix.node_count
    identity = np.arange(n, dtype=np.int64)
    if n < 2 or matrix.topology.edge_count == 0:
        logger.warning(
            "fiedler ordering is undefined for %d node(s) and %d edge(s); "
            "returning the identity permutation",
            n,
            matrix.topology.edge_count,
        )
        return identity

    topology = matrix.topology
    weights = np.abs(matrix.off_diagonal)
    degree = np.bincount(topology.sources, np.repeat(weights, 2), minlength=n)
    inv_sqrt = np.zeros(n)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    shifted = _symmetric_csr(topology, weights * inv_sqrt[i] * inv_sqrt[j], np.ones(n))

    null = np.sqrt(degree)
    null /= np.linalg.norm(null)
    x = np.random.default_rng(seed).standard_normal(n)
    x -= (null @ x) * null
    x /= np.linalg.norm(x)
    converged = False
    for _ in range(max_iter):
        y = shifted @ x
        y -= (null @ y) * null
        y /= np.linalg.norm(y)
        change = float(np.linalg.norm(y - x))
        x = y
        if change <= tol:
            converged = True
            break
    if not converged:
        logger.warning(
            "fiedler vector did not converge in %d iterations; using best estimate",
            max_iter,
        )

    leading = np.flatnonzero(np.abs(x) > 1e-9)
    if leading.size and x[leading[0]] > 0:
        x = -x
    return np.lexsort((identity, np.round(x, 12))).astype(np.int64)
