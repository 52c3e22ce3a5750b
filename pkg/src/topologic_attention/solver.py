"""Univariate Gaussian belief propagation with damping.

Every column of ``h`` is an independent univariate GaBP problem sharing one
precision matrix.  Precision messages ``pi`` do not depend on ``h`` and are
therefore shared by all columns; information messages ``eta`` carry one value
per column.  All messages are updated synchronously from the previous
iteration's state.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any

import numpy as np

from ._logging import get_logger
from .exceptions import ConfigurationError, InputError, NumericBreakdownError
from .graph import require_positive_diagonal

if TYPE_CHECKING:
    from collections.abc import Mapping

    import numpy.typing as npt

    from .graph import SparseSymmetricMatrix

    FloatArray = npt.NDArray[np.float64]

logger = get_logger(__name__)


class Schedule(str, Enum):
    SYNCHRONOUS = "synchronous"


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rule and damping for `gabp_solve`.

    ``damping`` is the weight kept on the previous message:
    ``m <- damping * m + (1 - damping) * m_new``; 0 means undamped.
    """

    tol: float = 1e-6
    max_iter: int = 1000
    damping: float = 0.5
    schedule: Schedule = Schedule.SYNCHRONOUS

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 <= self.damping < 1:
            raise ConfigurationError(f"damping must be in [0, 1), got {self.damping}")
        object.__setattr__(self, "schedule", Schedule(self.schedule))

    @classmethod
    def from_options(cls, options: Mapping[str, Any]) -> SolverConfig:
        """Build from a validated ``solver`` config block."""
        return cls(
            tol=float(options["tol"]),
            max_iter=int(options["max_iter"]),
            damping=float(options["damping"]),
            schedule=Schedule(options["schedule"]),
        )


@dataclass
class MessageState:
    """Messages on directed edges plus the full (non-excluded) node sums.

    ``alpha_full[i] - pi[reverse]`` recovers the cavity precision
    ``alpha_{i\\j}``; likewise for ``beta_full`` and ``eta``.
    """

    pi: FloatArray
    """(2E,) precision messages."""
    eta: FloatArray
    """(2E, d) information messages."""
    alpha_full: FloatArray
    """(N,) node precision sums."""
    beta_full: FloatArray
    """(N, d) node information sums."""

    @classmethod
    def zeros(cls, node_count: int, edge_count: int, columns: int) -> MessageState:
        return cls(
            pi=np.zeros(2 * edge_count),
            eta=np.zeros((2 * edge_count, columns)),
            alpha_full=np.zeros(node_count),
            beta_full=np.zeros((node_count, columns)),
        )


@dataclass(frozen=True)
class SolveResult:
    mu: FloatArray
    """(N, d) marginal means."""
    iterations: int
    converged: bool
    final_delta: float
    belief_pi: FloatArray
    """(N, d) belief precisions (identical across columns)."""
    state: MessageState | None = None


def _as_columns(h: np.ndarray, node_count: int) -> FloatArray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.ndim != 2 or h.shape[0] != node_count or h.shape[1] < 1:
        raise InputError(
            f"h must be ({node_count}, d) with d >= 1, got shape {h.shape}"
        )
    return h


def gabp_solve(
    matrix: SparseSymmetricMatrix,
    h: np.ndarray,
    cfg: SolverConfig | None = None,
    *,
    return_state: bool = False,
) -> SolveResult:
    """Solve ``J mu = h`` column-wise by damped synchronous GaBP.

    Parameters
    ----------
    matrix : SparseSymmetricMatrix
        Precision matrix ``J`` with strictly positive diagonal.
    h : np.ndarray
        (N, d) observations; a 1-D array is treated as a single column.
    cfg : SolverConfig, optional
        Tolerance, iteration cap and damping.  Defaults to `SolverConfig()`.
    return_state : bool
        Attach the final `MessageState` to the result.

    Returns
    -------
    SolveResult
        Means, iteration count and convergence flag.  A solve that hits
        ``max_iter`` returns its partial solution with ``converged=False``.

    Raises
    ------
    InputError
        If ``J`` or ``h`` contain NaN/Inf, or shapes disagree.
    DomainError
        If a diagonal entry is not strictly positive.
    NumericBreakdownError
        If a cavity precision ``alpha_{i\\j}`` becomes nonpositive.
    """
    cfg = cfg or SolverConfig()
    topology = matrix.topology
    n = topology.node_count
    h = _as_columns(h, n)
    if not np.isfinite(h).all():
        raise InputError("h contains NaN or Inf")
    if not matrix.is_finite():
        raise InputError("J contains NaN or Inf")
    require_positive_diagonal(matrix)

    sources = topology.sources
    reverse = np.arange(2 * topology.edge_count) ^ 1
    coupling = np.repeat(matrix.off_diagonal, 2)
    inbox = topology.inbox
    diagonal = matrix.diagonal
    lam = cfg.damping

    state = MessageState.zeros(n, topology.edge_count, h.shape[1])
    iterations = 0
    delta = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            iterations += 1
            state.alpha_full = diagonal + inbox @ state.pi
            state.beta_full = h + inbox @ state.eta
            alpha = state.alpha_full[sources] - state.pi[reverse]
            beta = state.beta_full[sources] - state.eta[reverse]
            bad = np.flatnonzero(alpha <= 0)
            if bad.size:
                k = int(bad[0])
                raise NumericBreakdownError(
                    f"cavity precision alpha = {alpha[k]:.6g} <= 0 on edge "
                    f"{int(sources[k])} -> {int(sources[k ^ 1])} at iteration "
                    f"{iterations}; J is not walk-summable",
                    iteration=iterations,
                    edge=(int(sources[k]), int(sources[k ^ 1])),
                    value=float(alpha[k]),
                )
            pi_new = -(coupling**2) / alpha
            eta_new = -(coupling / alpha)[:, None] * beta
            pi_next = lam * state.pi + (1.0 - lam) * pi_new
            eta_next = lam * state.eta + (1.0 - lam) * eta_new
            delta = 0.0
            if pi_next.size:
                delta = max(
                    float(np.abs(pi_next - state.pi).max()),
                    float(np.abs(eta_next - state.eta).max()),
                )
            if not np.isfinite(delta):
                finite = np.isfinite(pi_next) & np.isfinite(eta_next).all(axis=1)
                k = int(np.flatnonzero(~finite)[0])
                raise NumericBreakdownError(
                    f"messages overflowed on edge {int(sources[k])} -> "
                    f"{int(sources[k ^ 1])} at iteration {iterations}",
                    iteration=iterations,
                    edge=(int(sources[k]), int(sources[k ^ 1])),
                    value=float("nan"),
                )
            state.pi, state.eta = pi_next, eta_next
            if delta <= cfg.tol or iterations >= cfg.max_iter:
                break

    converged = delta <= cfg.tol
    state.alpha_full = diagonal + inbox @ state.pi
    state.beta_full = h + inbox @ state.eta
    belief_pi = np.repeat(state.alpha_full[:, None], h.shape[1], axis=1)
    mu = state.beta_full / state.alpha_full[:, None]
    if not converged:
        logger.debug(
            "GaBP stopped at max_iter=%d with delta=%.3g", cfg.max_iter, delta
        )
    return SolveResult(
        mu=mu,
        iterations=iterations,
        converged=converged,
        final_delta=delta,
        belief_pi=belief_pi,
        state=state if return_state else None,
    )


def residual(matrix: SparseSymmetricMatrix, mu: np.ndarray, h: np.ndarray) -> float:
    """Max-norm of ``J mu - h`` over all nodes and columns."""
    n = matrix.node_count
    mu = _as_columns(mu, n)
    h = _as_columns(h, n)
    if mu.shape != h.shape:
        raise InputError(f"mu shape {mu.shape} does not match h shape {h.shape}")
    if mu.size == 0:
        return 0.0
    return float(np.abs(matrix.matvec(mu) - h).max())
