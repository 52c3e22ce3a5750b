from __future__ import annotations

import numpy as np
import pytest
from conftest import MATRICES, random_walk_summable

from topologic_attention.exceptions import (
    ConfigurationError,
    DomainError,
    InputError,
    NumericBreakdownError,
)
from topologic_attention.formats import read_dense, read_matrix
from topologic_attention.graph import SparseSymmetricMatrix, build_topology
from topologic_attention.solver import SolverConfig, gabp_solve, residual

TIGHT = SolverConfig(tol=1e-12, max_iter=5000)


def cycle4() -> SparseSymmetricMatrix:
    topo = build_topology(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    return SparseSymmetricMatrix(topo, np.full(4, 3.0), np.ones(4))


def test_decoupled_nodes() -> None:
    m = SparseSymmetricMatrix(build_topology(2, []), [2.0, 4.0], [])
    result = gabp_solve(m, np.array([2.0, 8.0]))
    np.testing.assert_array_equal(result.mu[:, 0], [1.0, 2.0])
    assert result.iterations == 1
    assert result.final_delta == 0.0
    assert result.converged


def test_fixture_files() -> None:
    diag = read_matrix(MATRICES / "diagonal.txt")
    mu = gabp_solve(diag, read_dense(MATRICES / "diagonal_h.txt")).mu
    np.testing.assert_array_equal(mu[:, 0], [1.0, 1.0, 2.0])

    two = read_matrix(MATRICES / "two_node.txt")
    mu = gabp_solve(two, read_dense(MATRICES / "two_node_h.txt")).mu
    np.testing.assert_allclose(mu[:, 0], [1.0, 1.0], atol=1e-6)


def test_four_cycle_matches_dense() -> None:
    m = cycle4()
    h = np.array([1.0, 0.0, 0.0, 0.0])
    result = gabp_solve(m, h)
    assert result.converged
    assert result.final_delta <= 1e-6
    np.testing.assert_allclose(
        result.mu[:, 0], np.linalg.solve(m.to_dense(), h), atol=1e-6
    )


def test_random_walk_summable_matches_dense(rng: np.random.Generator) -> None:
    cfg = SolverConfig(tol=1e-9, max_iter=5000)
    for n in (5, 20, 60):
        m = random_walk_summable(rng, n)
        h = rng.normal(size=(n, 3))
        result = gabp_solve(m, h, cfg)
        assert result.converged
        expected = np.linalg.solve(m.to_dense(), h)
        error = np.linalg.norm(result.mu - expected) / np.linalg.norm(expected)
        assert error <= 1e-5
        assert (result.belief_pi > 0).all()


def test_tree_exact_without_damping(rng: np.random.Generator) -> None:
    n = 6
    path = build_topology(n, [(k, k + 1) for k in range(n - 1)])
    m = SparseSymmetricMatrix(path, np.full(n, 2.0), rng.uniform(-0.9, 0.9, n - 1))
    h = rng.normal(size=(n, 2))
    result = gabp_solve(m, h, SolverConfig(tol=1e-12, max_iter=100, damping=0.0))
    # diameter 5
    assert result.iterations <= 6
    np.testing.assert_allclose(
        result.mu, np.linalg.solve(m.to_dense(), h), rtol=0, atol=1e-10
    )


def test_fixed_point_does_not_depend_on_damping(rng: np.random.Generator) -> None:
    m = random_walk_summable(rng, 25)
    h = rng.normal(size=(25, 2))
    undamped = gabp_solve(m, h, SolverConfig(tol=1e-12, max_iter=5000, damping=0.0))
    damped = gabp_solve(m, h, SolverConfig(tol=1e-12, max_iter=5000, damping=0.5))
    assert undamped.converged
    assert damped.converged
    np.testing.assert_allclose(damped.mu, undamped.mu, rtol=0, atol=1e-8)


def test_columns_are_independent(rng: np.random.Generator) -> None:
    m = random_walk_summable(rng, 30)
    h = rng.normal(size=(30, 4))
    # a fixed iteration count: the stopping test is shared by all columns
    cfg = SolverConfig(tol=1e-300, max_iter=30)
    joint = gabp_solve(m, h, cfg).mu
    for c in range(4):
        alone = gabp_solve(m, h[:, [c]], cfg).mu
        np.testing.assert_array_equal(joint[:, [c]], alone)


def test_scale_equivariance(rng: np.random.Generator) -> None:
    m = random_walk_summable(rng, 20)
    h = rng.normal(size=(20, 2))
    base = gabp_solve(m, h, TIGHT).mu
    scaled = gabp_solve(m, 3.0 * h, TIGHT).mu
    np.testing.assert_allclose(scaled, 3.0 * base, rtol=0, atol=1e-10)


def test_relabeling_permutes_solution(rng: np.random.Generator) -> None:
    m = random_walk_summable(rng, 15)
    h = rng.normal(size=(15, 1))
    perm = rng.permutation(15)
    mu = gabp_solve(m, h, TIGHT).mu
    mu_perm = gabp_solve(m.permuted(perm), h[perm], TIGHT).mu
    np.testing.assert_allclose(mu_perm, mu[perm], atol=1e-10)


def test_partial_solution_when_capped() -> None:
    m = cycle4()
    h = np.array([1.0, 0.0, 0.0, 0.0])
    result = gabp_solve(m, h, SolverConfig(tol=1e-12, max_iter=2))
    assert not result.converged
    assert result.iterations == 2
    assert result.final_delta > 1e-12
    assert residual(m, result.mu, h) > 0


def test_breakdown_on_non_walk_summable() -> None:
    triangle = build_topology(3, [(0, 1), (1, 2), (0, 2)])
    m = SparseSymmetricMatrix(triangle, np.ones(3), np.full(3, 0.9))
    with pytest.raises(NumericBreakdownError, match="not walk-summable") as info:
        gabp_solve(m, np.ones(3), SolverConfig(damping=0.0))
    assert info.value.iteration == 3
    assert info.value.edge == (0, 1)
    assert info.value.value < 0
    assert info.value.exit_code == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_nonfinite_h(bad: float) -> None:
    with pytest.raises(InputError, match="h contains NaN or Inf"):
        gabp_solve(cycle4(), np.array([1.0, bad, 0.0, 0.0]))


def test_nonfinite_matrix() -> None:
    m = SparseSymmetricMatrix(build_topology(2, [(0, 1)]), [1.0, 1.0], [np.nan])
    with pytest.raises(InputError, match="J contains NaN or Inf"):
        gabp_solve(m, np.ones(2))


def test_nonpositive_diagonal() -> None:
    m = SparseSymmetricMatrix(build_topology(2, [(0, 1)]), [1.0, 0.0], [0.1])
    with pytest.raises(DomainError):
        gabp_solve(m, np.ones(2))


def test_h_shape() -> None:
    with pytest.raises(InputError, match=r"h must be \(4, d\)"):
        gabp_solve(cycle4(), np.ones((3, 1)))


@pytest.mark.parametrize(
    "kwargs",
    [{"tol": 0.0}, {"max_iter": 0}, {"damping": 1.0}, {"damping": -0.1}],
)
def test_solver_config_validation(kwargs: dict[str, float]) -> None:
    with pytest.raises(ConfigurationError):
        SolverConfig(**kwargs)  # type: ignore[arg-type]


def test_return_state() -> None:
    result = gabp_solve(cycle4(), np.ones((4, 2)), return_state=True)
    assert result.state is not None
    assert result.state.pi.shape == (8,)
    assert result.state.eta.shape == (8, 2)
    assert gabp_solve(cycle4(), np.ones(4)).state is None


def test_residual() -> None:
    m = cycle4()
    h = np.array([[1.0], [-2.0], [0.5], [0.0]])
    exact = np.linalg.solve(m.to_dense(), h)
    assert residual(m, exact, h) == pytest.approx(0.0, abs=1e-12)
    assert residual(m, np.zeros_like(h), h) == 2.0
    with pytest.raises(InputError, match="does not match"):
        residual(m, np.zeros((4, 2)), h)
