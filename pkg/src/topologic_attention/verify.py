"""Invariant suites run by ``tan verify``.

Each suite returns `CheckResult` rows; the CLI fails when any row fails.
`WALK_SUMMABILITY_BUILDERS` maps a construction name to a random-instance
factory and may be extended (or replaced) by callers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autograd as ag
from ._logging import get_logger
from .builders import (
    BuildOptions,
    Construction,
    LearnedParameters,
    PrecisionBuild,
    SimilarityConfig,
    SimilarityKind,
    build_diag_dominant,
    build_laplacian,
    build_learned,
    build_pairwise_normal,
)
from .graph import (
    GraphTopology,
    SparseSymmetricMatrix,
    build_topology,
    spectral_radius_abs_residual,
)
from .implicit import gabp_fixed_point, gabp_unrolled
from .solver import SolverConfig, gabp_solve

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence
    from pathlib import Path

    InstanceFactory = Callable[
        [np.random.Generator, GraphTopology], SparseSymmetricMatrix
    ]

logger = get_logger(__name__)

SUITES = (
    "oracle-equivalence",
    "walk-summability",
    "gradient-check",
    "implicit-vs-unrolled",
)
TIGHT = SolverConfig(tol=1e-13, max_iter=20_000, damping=0.5)
ORACLE_SOLVER = SolverConfig(tol=1e-6, max_iter=10_000, damping=0.0)
ORACLE_RHO = 0.9
ORACLE_DENSITY = 0.1
ORACLE_ERROR = 1e-5
LEARNED_D_MODEL = 6
LEARNED_D_SIM = 4


@dataclass(frozen=True)
class CheckResult:
    suite: str
    invariant: str
    case: str
    passed: bool
    value: float
    threshold: float


@dataclass(frozen=True)
class SuiteSizes:
    nodes: int
    """Largest system in the oracle and walk-summability suites."""
    instances: int
    """Oracle systems, and builds per construction for walk-summability."""
    grad_instances: int
    """Learned builds per construction in the gradient check."""
    trees: int
    tree_nodes: int

    @classmethod
    def for_mode(cls, quick: bool) -> SuiteSizes:
        if quick:
            return cls(nodes=20, instances=10, grad_instances=1, trees=3, tree_nodes=8)
        return cls(nodes=200, instances=100, grad_instances=20, trees=20, tree_nodes=15)


def random_topology(
    rng: np.random.Generator, n: int, extra_edges: float = 1.5
) -> GraphTopology:
    """A random spanning tree plus about ``extra_edges * n`` random edges."""
    parents = [int(rng.integers(0, k)) for k in range(1, n)]
    tree = [(k, parent) for k, parent in zip(range(1, n), parents)]
    extra = rng.integers(0, n, size=(int(extra_edges * n), 2))
    return build_topology(n, np.concatenate([np.array(tree).reshape(-1, 2), extra]))


def random_tree(rng: np.random.Generator, n: int) -> GraphTopology:
    return random_topology(rng, n, extra_edges=0.0)


def _pairwise_instance(
    rng: np.random.Generator, topology: GraphTopology
) -> SparseSymmetricMatrix:
    e = topology.edge_count
    return build_pairwise_normal(
        topology,
        rng.uniform(0.1, 2.0, e),
        rng.normal(0.0, 2.0, e),
        rng.uniform(0.1, 2.0, e),
    )


def _diag_instance(
    rng: np.random.Generator, topology: GraphTopology
) -> SparseSymmetricMatrix:
    return build_diag_dominant(
        topology,
        rng.normal(0.0, 1.0, topology.edge_count),
        rng.exponential(1.0, topology.node_count),
    )


def _laplacian_instance(
    rng: np.random.Generator, topology: GraphTopology
) -> SparseSymmetricMatrix:
    return build_laplacian(topology, rng.uniform(0.0, 1.0, topology.edge_count))


def _similarity_for(construction: Construction) -> SimilarityConfig:
    return SimilarityConfig(
        SimilarityKind.GAUSSIAN_KERNEL
        if construction is Construction.LAPLACIAN
        else SimilarityKind.COSINE
    )


def _learned_instance(construction: Construction) -> InstanceFactory:
    """Factory for learned builds with freshly drawn parameters and embeddings."""
    similarity = _similarity_for(construction)
    options = BuildOptions(similarity=similarity)

    def factory(
        rng: np.random.Generator, topology: GraphTopology
    ) -> SparseSymmetricMatrix:
        params = LearnedParameters.init(
            construction, similarity, LEARNED_D_MODEL, LEARNED_D_SIM, rng
        )
        z = ag.constant(
            rng.normal(0.0, 2.0, size=(topology.node_count, LEARNED_D_MODEL))
        )
        return build_learned(construction, z, topology, params, options).matrix

    return factory


WALK_SUMMABILITY_BUILDERS: dict[str, InstanceFactory] = {
    Construction.PAIRWISE_NORMAL.value: _pairwise_instance,
    Construction.DIAG_DOMINANT.value: _diag_instance,
    Construction.LAPLACIAN.value: _laplacian_instance,
    **{f"learned {c.value}": _learned_instance(c) for c in Construction},
}
DOMINANCE_BUILDERS = (
    Construction.DIAG_DOMINANT.value,
    f"learned {Construction.DIAG_DOMINANT.value}",
)


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def row_dominance_margin(matrix: SparseSymmetricMatrix) -> float:
    """``min_i (J_ii - sum_j |J_ij|)``."""
    n = matrix.node_count
    edges = matrix.topology.edges
    magnitude = np.abs(matrix.off_diagonal)
    incident = np.bincount(edges[:, 0], magnitude, minlength=n) + np.bincount(
        edges[:, 1], magnitude, minlength=n
    )
    return float((matrix.diagonal - incident).min())


def sparse_topology(
    rng: np.random.Generator, n: int, density: float = ORACLE_DENSITY
) -> GraphTopology:
    """`random_topology` with the extra edges capped to keep ``2E / N(N-1)``
    under `density`; below about ``2 / density`` nodes only the tree remains."""
    extra = min(1.5, max(0.0, density * (n - 1) / 2 - 1.0))
    return random_topology(rng, n, extra_edges=extra)


def cap_spectral_radius(
    matrix: SparseSymmetricMatrix, cap: float
) -> SparseSymmetricMatrix:
    """Scale the couplings so that ``rho(|I - J~|) <= cap``; the diagonal is kept."""
    # rho is linear in the off-diagonal at a fixed diagonal
    rho = spectral_radius_abs_residual(matrix).spectral_radius
    if rho <= cap:
        return matrix
    factor = 0.95 * cap / rho
    return SparseSymmetricMatrix(
        matrix.topology, matrix.diagonal, matrix.off_diagonal * factor
    )


# -----------------------------------------------------------------------------
# suites


def oracle_equivalence(sizes: SuiteSizes, seed: int = 0) -> list[CheckResult]:
    """GaBP means agree with a dense solve on walk-summable systems.

    Each instance is a sparse diagonally dominant system with
    ``rho(|I - J~|) <= 0.9`` (couplings are scaled down when needed), solved
    at ``tol = 1e-6`` and compared in relative L2 norm.
    """
    rng = np.random.default_rng(seed)
    results = []
    low = max(2, sizes.nodes // 2)
    for case in range(sizes.instances):
        n = int(rng.integers(low, sizes.nodes + 1))
        topology = sparse_topology(rng, n)
        matrix = cap_spectral_radius(_diag_instance(rng, topology), ORACLE_RHO)
        rho = spectral_radius_abs_residual(matrix).spectral_radius
        h = rng.normal(size=(n, 3))
        solved = gabp_solve(matrix, h, ORACLE_SOLVER)
        dense = np.linalg.solve(matrix.to_dense(), h)
        error = float(np.linalg.norm(solved.mu - dense) / np.linalg.norm(dense))
        density = 2 * topology.edge_count / max(n * (n - 1), 1)
        results.append(
            CheckResult(
                "oracle-equivalence",
                "gabp means match the dense solve",
                f"diag_dominant n={n} density={density:.3f} rho={rho:.3f} #{case}",
                solved.converged and rho <= ORACLE_RHO and error <= ORACLE_ERROR,
                error,
                ORACLE_ERROR,
            )
        )
    return results


def walk_summability(sizes: SuiteSizes, seed: int = 0) -> list[CheckResult]:
    """Every registered builder yields rho(|I - J~|) < 1.

    The diagonally dominant builders are also checked for a row margin of at
    least the default slack.
    """
    rng = np.random.default_rng(seed)
    slack = BuildOptions().slack
    results = []
    for name, factory in WALK_SUMMABILITY_BUILDERS.items():
        worst = 0.0
        failing = ""
        margin = np.inf
        for case in range(sizes.instances):
            n = int(rng.integers(2, sizes.nodes + 1))
            matrix = factory(rng, random_topology(rng, n))
            rho = spectral_radius_abs_residual(matrix).spectral_radius
            if rho >= worst:
                worst = rho
                failing = f"#{case} n={n}"
            if name in DOMINANCE_BUILDERS:
                margin = min(margin, row_dominance_margin(matrix))
        results.append(
            CheckResult(
                "walk-summability",
                f"{name} output is walk-summable",
                f"{sizes.instances} instances, worst {failing}",
                worst < 1.0,
                worst,
                1.0,
            )
        )
        if name in DOMINANCE_BUILDERS:
            results.append(
                CheckResult(
                    "walk-summability",
                    f"{name} rows dominate by the slack",
                    f"{sizes.instances} instances",
                    margin >= slack * (1 - 1e-9),
                    float(margin),
                    slack,
                )
            )
    return results


def _elementary_cases(
    rng: np.random.Generator,
) -> dict[str, tuple[Callable[[], ag.Tensor], list[ag.Tensor]]]:
    x = ag.parameter(rng.normal(size=(5, 4)), "x")
    y = ag.parameter(rng.normal(size=(5, 4)), "y")
    w = ag.parameter(rng.normal(size=(4, 3)), "w")
    gain = ag.parameter(rng.normal(size=(1, 4)), "gain")
    bias = ag.parameter(rng.normal(size=(1, 4)), "bias")
    labels = rng.integers(0, 4, size=5)
    mask = np.array([True, False, True, True, False])
    weights = ag.constant(rng.normal(size=(5, 4)))

    def weighted(t: ag.Tensor) -> ag.Tensor:
        return ag.total_sum(t * weights) if t.shape == (5, 4) else ag.total_sum(t)

    column = ag.constant(np.arange(8.0).reshape(8, 1))
    return {
        "matmul": (lambda: ag.total_sum(x @ w), [x, w]),
        "add": (lambda: weighted(x + y), [x, y]),
        "scale": (lambda: weighted(ag.scale(x, 1.7)), [x]),
        "leaky_relu": (lambda: weighted(ag.leaky_relu(x)), [x]),
        "softplus": (lambda: weighted(ag.softplus(x)), [x]),
        "layer_norm": (lambda: weighted(ag.layer_norm(x, gain, bias)), [x, gain, bias]),
        "concat_columns": (
            lambda: ag.total_sum(ag.concat_columns([x, y]) @ column),
            [x, y],
        ),
        "split_columns": (
            lambda: weighted(
                ag.concat_columns(list(reversed(ag.split_columns(x, [1, 3]))))
            ),
            [x],
        ),
        "cross_entropy": (
            lambda: ag.row_softmax_cross_entropy(x, labels, mask),
            [x],
        ),
    }


def gradient_check(sizes: SuiteSizes, seed: int = 0) -> list[CheckResult]:
    """Recorded gradients match central differences."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in _elementary_cases(rng).items():
        worst = max(r.max_relative_error for r in ag.gradcheck(fn, inputs))
        results.append(
            CheckResult(
                "gradient-check", f"{name} gradient", "5x4", worst <= 1e-4, worst, 1e-4
            )
        )

    n = min(sizes.nodes, 12)
    for construction in Construction:
        similarity = _similarity_for(construction)
        options = BuildOptions(similarity=similarity)
        worst = 0.0
        for _ in range(sizes.grad_instances):
            topology = random_topology(rng, n)
            z = ag.constant(rng.normal(size=(n, LEARNED_D_MODEL)))
            h = ag.parameter(rng.normal(size=(n, 3)), "h")
            weights = ag.constant(rng.normal(size=(n, 3)))
            params = LearnedParameters.init(
                construction, similarity, LEARNED_D_MODEL, LEARNED_D_SIM, rng
            )

            def loss(
                construction: Construction = construction,
                params: LearnedParameters = params,
                options: BuildOptions = options,
                topology: GraphTopology = topology,
                z: ag.Tensor = z,
                h: ag.Tensor = h,
                weights: ag.Tensor = weights,
            ) -> ag.Tensor:
                build = build_learned(construction, z, topology, params, options)
                return ag.total_sum(gabp_fixed_point(build, h, TIGHT) * weights)

            inputs = [*params.tensors(), h]
            checks = ag.gradcheck(loss, inputs, step=1e-5, rtol=1e-3)
            worst = max(worst, *(r.max_relative_error for r in checks))
        results.append(
            CheckResult(
                "gradient-check",
                f"learned {construction.value} + implicit gabp gradient",
                f"{sizes.grad_instances} instances n={n} d=3",
                worst <= 1e-3,
                worst,
                1e-3,
            )
        )
    return results


def implicit_vs_unrolled(sizes: SuiteSizes, seed: int = 0) -> list[CheckResult]:
    """On trees with no damping, implicit gradients equal unrolled gradients."""
    rng = np.random.default_rng(seed)
    results = []
    cfg = SolverConfig(tol=1e-15, max_iter=4 * sizes.tree_nodes + 10, damping=0.0)
    for case in range(sizes.trees):
        n = sizes.tree_nodes
        topology = random_tree(rng, n)
        matrix = _diag_instance(rng, topology)
        h_values = rng.normal(size=(n, 2))
        weights = ag.constant(rng.normal(size=(n, 2)))
        grads = []
        for implicit in (True, False):
            diag = ag.parameter(matrix.diagonal[:, None].copy(), "diag")
            off = ag.parameter(matrix.off_diagonal[:, None].copy(), "off")
            h = ag.parameter(h_values.copy(), "h")
            build = PrecisionBuild.from_tensors(
                topology, Construction.DIAG_DOMINANT, diag, off, learned=True
            )
            with ag.Tape() as tape:
                mu = (
                    gabp_fixed_point(build, h, cfg)
                    if implicit
                    else gabp_unrolled(build, h, iterations=n + 1)
                )
                loss = ag.total_sum(mu * weights)
            tape.backward(loss)
            grads.append(
                np.concatenate(
                    [t.grad.reshape(-1) for t in (diag, off, h) if t.grad is not None]
                )
            )
        error = _relative(grads[0], grads[1])
        results.append(
            CheckResult(
                "implicit-vs-unrolled",
                "implicit gradients match unrolled gradients on trees",
                f"tree n={n} #{case}",
                error <= 1e-6,
                error,
                1e-6,
            )
        )
    return results


SUITE_FUNCTIONS: dict[str, Callable[[SuiteSizes, int], list[CheckResult]]] = {
    "oracle-equivalence": oracle_equivalence,
    "walk-summability": walk_summability,
    "gradient-check": gradient_check,
    "implicit-vs-unrolled": implicit_vs_unrolled,
}


def run_suites(
    names: Iterable[str] = SUITES, *, quick: bool = False, seed: int = 0
) -> list[CheckResult]:
    sizes = SuiteSizes.for_mode(quick)
    results: list[CheckResult] = []
    for name in names:
        logger.info("running %s (%s)", name, "quick" if quick else "full")
        results.extend(SUITE_FUNCTIONS[name](sizes, seed))
    return results


def write_report(results: Sequence[CheckResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "invariant", "case", "passed", "value", "threshold"])
        for r in results:
            writer.writerow(
                [r.suite, r.invariant, r.case, r.passed, r.value, r.threshold]
            )


def format_report(results: Sequence[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status}  {r.suite:<22} {r.invariant} [{r.case}] "
            f"value={r.value:.3g} threshold={r.threshold:.3g}"
        )
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed} passed, {failed} failed")
    return "\n".join(lines)
