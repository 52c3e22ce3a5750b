"""GaBP as a differentiable layer.

`gabp_fixed_point` differentiates the solve implicitly: at the fixed point
``J mu = h``, so the upstream gradient ``G = dL/dmu`` is pulled back by one
more GaBP solve ``J g = G``.  Only ``J``, ``mu`` and a few scalars are kept
between forward and backward, whatever the iteration count.

`gabp_unrolled` records every message update on the tape instead; it is the
reference the implicit gradients are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autograd as ag
from ._logging import get_logger
from .exceptions import NumericBreakdownError, TrainingStepError
from .solver import SolverConfig, gabp_solve, residual

if TYPE_CHECKING:
    import numpy.typing as npt

    from .autograd import Tensor
    from .builders import PrecisionBuild

    FloatArray = npt.NDArray[np.float64]

logger = get_logger(__name__)


@dataclass
class SolveTelemetry:
    """Per-solve record filled by the forward pass and completed by backward."""

    layer: int
    head: int
    forward_iterations: int = 0
    forward_converged: bool = False
    residual: float = float("nan")
    backward_iterations: int | None = None
    backward_converged: bool | None = None
    saved_bytes: int = 0
    """Bytes held between forward and backward (``J``, ``mu``)."""


def gabp_fixed_point(
    build: PrecisionBuild,
    h: Tensor,
    cfg: SolverConfig | None = None,
    *,
    telemetry: SolveTelemetry | None = None,
) -> Tensor:
    """Solve ``J mu = h`` and record an implicit-gradient node.

    Gradients of the loss w.r.t. ``h`` and the stored entries of ``J``
    (``build.diagonal`` per node, ``build.off_diagonal`` per undirected edge)
    are::

        J g = dL/dmu              (same solver and config, cold start)
        dL/dh     = g
        dL/dJ_ij  = -sum_c (g_i mu_j + g_j mu_i)
        dL/dJ_ii  = -sum_c g_i mu_i

    A forward solve that stopped at ``max_iter`` still produces gradients;
    the telemetry records that it did not converge.

    Raises
    ------
    NumericBreakdownError
        If the forward solve breaks down.
    TrainingStepError
        If the backward solve breaks down.
    """
    cfg = cfg or SolverConfig()
    matrix = build.matrix
    result = gabp_solve(matrix, h.values, cfg)
    mu = result.mu
    if telemetry is not None:
        telemetry.forward_iterations = result.iterations
        telemetry.forward_converged = result.converged
        telemetry.residual = residual(matrix, mu, h.values)
        telemetry.saved_bytes = (
            matrix.diagonal.nbytes + matrix.off_diagonal.nbytes + mu.nbytes
        )
    edges = matrix.topology.edges
    i, j = edges[:, 0], edges[:, 1]

    def backward(upstream: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        try:
            adjoint = gabp_solve(matrix, upstream, cfg)
        except NumericBreakdownError as e:
            where = ""
            if telemetry is not None:
                where = f" (layer {telemetry.layer}, head {telemetry.head})"
            raise TrainingStepError(
                f"backward GaBP solve broke down{where}: {e.message}"
            ) from e
        if telemetry is not None:
            telemetry.backward_iterations = adjoint.iterations
            telemetry.backward_converged = adjoint.converged
        if not adjoint.converged:
            logger.debug(
                "backward solve stopped at %d iterations (delta %.3g)",
                adjoint.iterations,
                adjoint.final_delta,
            )
        g = adjoint.mu
        d_diag = -(g * mu).sum(axis=1, keepdims=True)
        d_off = -(g[i] * mu[j] + g[j] * mu[i]).sum(axis=1, keepdims=True)
        return d_diag, d_off, g

    return ag.record_op(
        "gabp_fixed_point", mu, (build.diagonal, build.off_diagonal, h), backward
    )


def gabp_unrolled(
    build: PrecisionBuild, h: Tensor, iterations: int, damping: float = 0.0
) -> Tensor:
    """Run exactly `iterations` synchronous GaBP sweeps as recorded ops.

    Memory grows with the iteration count; use only as a gradient reference
    on small graphs.
    """
    topology = build.matrix.topology
    n, e = topology.node_count, topology.edge_count
    sources, targets = topology.sources, topology.targets
    reverse = np.arange(2 * e) ^ 1
    coupling = ag.gather_rows(build.off_diagonal, np.repeat(np.arange(e), 2))
    pi = ag.constant(np.zeros((2 * e, 1)))
    eta = ag.constant(np.zeros((2 * e, h.shape[1])))

    def node_sums(pi: Tensor, eta: Tensor) -> tuple[Tensor, Tensor]:
        return (
            build.diagonal + ag.segment_sum(pi, targets, n),
            h + ag.segment_sum(eta, targets, n),
        )

    for _ in range(iterations):
        alpha_full, beta_full = node_sums(pi, eta)
        alpha = ag.gather_rows(alpha_full, sources) - ag.gather_rows(pi, reverse)
        beta = ag.gather_rows(beta_full, sources) - ag.gather_rows(eta, reverse)
        pi_new = -(coupling * coupling) / alpha
        eta_new = -(coupling / alpha) * beta
        if damping:
            pi = ag.scale(pi, damping) + ag.scale(pi_new, 1.0 - damping)
            eta = ag.scale(eta, damping) + ag.scale(eta_new, 1.0 - damping)
        else:
            pi, eta = pi_new, eta_new
    alpha_full, beta_full = node_sums(pi, eta)
    return beta_full / alpha_full
