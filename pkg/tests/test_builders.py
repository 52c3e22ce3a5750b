from __future__ import annotations

import numpy as np
import pytest

from topologic_attention import autograd as ag
from topologic_attention.builders import (
    BuildOptions,
    Construction,
    LearnedParameters,
    MlpScorer,
    SimilarityConfig,
    SimilarityKind,
    build_diag_dominant,
    build_fixed,
    build_laplacian,
    build_learned,
    build_pairwise_normal,
    similarity_scores,
)
from topologic_attention.exceptions import ConfigurationError, InputError
from topologic_attention.graph import (
    GraphTopology,
    build_topology,
    spectral_radius_abs_residual,
)

EDGE = build_topology(2, [(0, 1)])
TRIANGLE = build_topology(3, [(0, 1), (1, 2), (0, 2)])


def random_graph(rng: np.random.Generator, n: int) -> GraphTopology:
    tree = [(k, int(rng.integers(0, k))) for k in range(1, n)]
    return build_topology(n, tree + rng.integers(0, n, size=(n, 2)).tolist())


def test_pairwise_normal_unclamped_block() -> None:
    m = build_pairwise_normal(EDGE, [2.0], [1.0], [2.0], margin=2.0)
    np.testing.assert_array_equal(m.to_dense(), [[2.0, 1.0], [1.0, 2.0]])


def test_pairwise_normal_clamps_coupling() -> None:
    m = build_pairwise_normal(EDGE, [1.0], [2.0], [1.0], margin=2.0)
    np.testing.assert_allclose(m.off_diagonal, [np.sqrt(0.5)])
    assert spectral_radius_abs_residual(m).spectral_radius < 1


def test_pairwise_normal_clamp_keeps_sign() -> None:
    m = build_pairwise_normal(EDGE, [1.0], [-2.0], [1.0], margin=2.0)
    np.testing.assert_allclose(m.off_diagonal, [-np.sqrt(0.5)])


def test_pairwise_normal_triangle() -> None:
    ones = np.ones(3)
    m = build_pairwise_normal(TRIANGLE, ones, np.full(3, 0.3), ones)
    np.testing.assert_array_equal(m.diagonal, [2.0, 2.0, 2.0])
    assert np.linalg.eigvalsh(m.to_dense()).min() > 0
    assert spectral_radius_abs_residual(m).walk_summable


def test_pairwise_normal_isolated_node_gets_unit_diagonal() -> None:
    topo = build_topology(3, [(0, 1)])
    m = build_pairwise_normal(topo, [2.0], [0.5], [3.0])
    np.testing.assert_array_equal(m.diagonal, [2.0, 3.0, 1.0])


def test_pairwise_normal_rejects_nonpositive_self_precision() -> None:
    message = r"self-precision c = 0.0 on edge \(0, 1\)"
    with pytest.raises(InputError, match=message):
        build_pairwise_normal(EDGE, [1.0], [0.1], [0.0])


def test_pairwise_normal_rejects_margin() -> None:
    with pytest.raises(ConfigurationError, match="margin"):
        build_pairwise_normal(EDGE, [1.0], [0.1], [1.0], margin=1.0)


def test_pairwise_normal_margin_holds_on_random_instances(
    rng: np.random.Generator,
) -> None:
    for _ in range(20):
        topo = random_graph(rng, 30)
        e = topo.edge_count
        a, c = rng.uniform(0.1, 2.0, e), rng.uniform(0.1, 2.0, e)
        m = build_pairwise_normal(topo, a, rng.normal(scale=2.0, size=e), c)
        assert (a * c >= 1.1 * m.off_diagonal**2 * (1 - 1e-12)).all()
        assert spectral_radius_abs_residual(m).spectral_radius < 1


def test_diag_dominant_path() -> None:
    path = build_topology(3, [(0, 1), (1, 2)])
    m = build_diag_dominant(path, [-1.0, -1.0], np.zeros(3), slack=0.5)
    np.testing.assert_array_equal(m.diagonal, [1.5, 2.5, 1.5])


def test_diag_dominant_edgeless() -> None:
    m = build_diag_dominant(build_topology(2, []), [], [2.0, 3.0], slack=0.5)
    np.testing.assert_array_equal(m.to_dense(), np.diag([2.5, 3.5]))


def test_diag_dominant_row_dominance_and_walk_summability(
    rng: np.random.Generator
) -> None:
    for _ in range(20):
        topo = random_graph(rng, 40)
        m = build_diag_dominant(
            topo,
            rng.normal(size=topo.edge_count),
            rng.uniform(0, 1, 40),
            slack=0.1,
        )
        dense = m.to_dense()
        gap = np.diag(dense) - (np.abs(dense).sum(axis=1) - np.abs(np.diag(dense)))
        assert gap.min() >= 0.1 - 1e-12
        assert spectral_radius_abs_residual(m).spectral_radius < 1


def test_diag_dominant_rejects_negative_confidence() -> None:
    with pytest.raises(InputError, match="nonnegative"):
        build_diag_dominant(EDGE, [0.5], [1.0, -1.0])


def test_diag_dominant_rejects_wrong_length() -> None:
    with pytest.raises(InputError, match="couplings has 2 entries for 1 edges"):
        build_diag_dominant(EDGE, [0.5, 0.5], [1.0, 1.0])


def test_laplacian_single_edge() -> None:
    m = build_laplacian(EDGE, [1.0], 0.02)
    expected = np.array([[1.02, -1.0], [-1.0, 1.02]]) / 2.02
    np.testing.assert_allclose(m.to_dense(), expected, rtol=1e-15)
    eig = np.linalg.eigvalsh(m.to_dense())
    assert eig.min() > 0
    assert eig.max() < 1


def test_laplacian_edgeless() -> None:
    m = build_laplacian(build_topology(3, []), [], 0.02)
    np.testing.assert_allclose(m.to_dense(), np.eye(3) * 1.02 / 2.02)


def test_laplacian_zero_weight_node_is_identity_row() -> None:
    topo = build_topology(3, [(0, 1), (1, 2)])
    m = build_laplacian(topo, [1.0, 0.0])
    assert m.off_diagonal[1] == 0.0
    assert m.diagonal[2] == pytest.approx(1.02 / 2.02)


def test_laplacian_spectrum_inside_unit_interval(rng: np.random.Generator) -> None:
    for _ in range(10):
        topo = random_graph(rng, 50)
        m = build_laplacian(topo, rng.uniform(0, 2, topo.edge_count))
        eig = np.linalg.eigvalsh(m.to_dense())
        assert eig.min() > 0
        assert eig.max() < 1
        x = rng.normal(size=(50, 1000))
        rayleigh = (x * (m.to_dense() @ x)).sum(axis=0) / (x * x).sum(axis=0)
        assert ((rayleigh > 0) & (rayleigh < 1)).all()
        assert spectral_radius_abs_residual(m).spectral_radius < 1


def test_laplacian_bump() -> None:
    m = build_laplacian(EDGE, [1.0], 0.02, diagonal_bump=[0.5, 0.0])
    assert m.diagonal[0] == pytest.approx(1.52 / 2.02)
    assert m.diagonal[1] == pytest.approx(1.02 / 2.02)


def test_laplacian_rejects_negative_weight() -> None:
    with pytest.raises(InputError, match=r"negative weight -0.5 on edge \(0, 1\)"):
        build_laplacian(EDGE, [-0.5])


@pytest.mark.parametrize("eps", [0.0, 1.0])
def test_laplacian_rejects_shift(eps: float) -> None:
    with pytest.raises(ConfigurationError, match="epsilon_shift"):
        build_laplacian(EDGE, [1.0], eps)


def test_similarity_cosine_identical() -> None:
    s = ag.constant(np.array([[1.0, 0.0], [1.0, 0.0]]))
    score = similarity_scores(s, EDGE, SimilarityConfig(SimilarityKind.COSINE))
    assert score.item() == pytest.approx(1.0)


def test_similarity_cosine_zero_vector() -> None:
    s = ag.constant(np.array([[0.0, 0.0], [1.0, 0.0]]))
    score = similarity_scores(s, EDGE, SimilarityConfig(SimilarityKind.COSINE))
    assert score.item() == 0.0


def test_similarity_gaussian_identical() -> None:
    s = ag.constant(np.array([[0.3, -2.0], [0.3, -2.0]]))
    cfg = SimilarityConfig(SimilarityKind.GAUSSIAN_KERNEL, bandwidth=0.5)
    assert similarity_scores(s, EDGE, cfg).item() == 1.0


def test_similarity_gaussian_range(rng: np.random.Generator) -> None:
    topo = random_graph(rng, 20)
    s = ag.constant(rng.normal(size=(20, 3)))
    cfg = SimilarityConfig(SimilarityKind.GAUSSIAN_KERNEL)
    scores = similarity_scores(s, topo, cfg).values
    assert ((scores > 0) & (scores <= 1)).all()


def test_similarity_mlp_is_symmetrized(rng: np.random.Generator) -> None:
    mlp = MlpScorer.init(3, rng)
    s = ag.constant(rng.normal(size=(2, 3)))
    left, right = ag.constant(s.values[[0]]), ag.constant(s.values[[1]])
    forward, reverse = mlp(left, right).item(), mlp(right, left).item()
    assert forward != reverse
    score = similarity_scores(s, EDGE, SimilarityConfig(SimilarityKind.MLP), mlp)
    assert score.item() == pytest.approx(0.5 * (forward + reverse))


def test_similarity_mlp_needs_parameters() -> None:
    s = ag.constant(np.ones((2, 3)))
    with pytest.raises(ConfigurationError, match="MlpScorer"):
        similarity_scores(s, EDGE, SimilarityConfig(SimilarityKind.MLP))


def test_similarity_rejects_nonfinite() -> None:
    s = ag.constant(np.array([[np.nan], [1.0]]))
    with pytest.raises(InputError, match="NaN or Inf"):
        similarity_scores(s, EDGE, SimilarityConfig())


def test_similarity_bandwidth_must_be_positive() -> None:
    with pytest.raises(ConfigurationError, match="bandwidth"):
        SimilarityConfig(SimilarityKind.GAUSSIAN_KERNEL, bandwidth=0.0)


@pytest.mark.parametrize("construction", list(Construction))
def test_fixed_builds_are_walk_summable(
    construction: Construction, rng: np.random.Generator
) -> None:
    topo = random_graph(rng, 40)
    build = build_fixed(construction, rng.normal(size=(40, 5)), topo)
    assert not build.learned
    assert build.construction is construction
    assert build.report.walk_summable


def test_fixed_laplacian_uses_binary_weights(path4: GraphTopology) -> None:
    build = build_fixed(Construction.LAPLACIAN, np.ones((4, 2)), path4)
    np.testing.assert_allclose(
        build.matrix.to_dense(), build_laplacian(path4, np.ones(3)).to_dense()
    )


SIMILARITIES = [
    (Construction.PAIRWISE_NORMAL, SimilarityKind.COSINE),
    (Construction.PAIRWISE_NORMAL, SimilarityKind.MLP),
    (Construction.DIAG_DOMINANT, SimilarityKind.COSINE),
    (Construction.DIAG_DOMINANT, SimilarityKind.GAUSSIAN_KERNEL),
    (Construction.LAPLACIAN, SimilarityKind.GAUSSIAN_KERNEL),
    (Construction.LAPLACIAN, SimilarityKind.COSINE),
    (Construction.LAPLACIAN, SimilarityKind.MLP),
]


@pytest.mark.parametrize(("construction", "kind"), SIMILARITIES)
def test_learned_builds_are_walk_summable(
    construction: Construction, kind: SimilarityKind, rng: np.random.Generator
) -> None:
    similarity = SimilarityConfig(kind)
    options = BuildOptions(similarity=similarity)
    for _ in range(10):
        topo = random_graph(rng, 30)
        params = LearnedParameters.init(construction, similarity, 6, 4, rng)
        z = ag.constant(rng.normal(scale=2.0, size=(30, 6)))
        build = build_learned(construction, z, topo, params, options)
        assert build.learned
        assert build.report.spectral_radius < 1


def test_zero_similarity_projection_gives_diagonal_matrix(
    rng: np.random.Generator, path4: GraphTopology
) -> None:
    params = LearnedParameters.init(
        Construction.DIAG_DOMINANT, SimilarityConfig(), 3, 2, rng
    )
    params.w_sim.values = np.zeros((3, 2))
    z = ag.constant(rng.normal(size=(4, 3)))
    build = build_learned(Construction.DIAG_DOMINANT, z, path4, params)
    np.testing.assert_array_equal(build.matrix.off_diagonal, np.zeros(3))


def test_learned_laplacian_identical_embeddings(rng: np.random.Generator) -> None:
    similarity = SimilarityConfig(SimilarityKind.GAUSSIAN_KERNEL)
    params = LearnedParameters.init(Construction.LAPLACIAN, similarity, 3, 2, rng)
    z = ag.constant(np.tile(rng.normal(size=(1, 3)), (2, 1)))
    options = BuildOptions(similarity=similarity, bump_scale=0.1)
    build = build_learned(Construction.LAPLACIAN, z, EDGE, params, options)
    bump = 0.1 * params.node_head(z).values.reshape(-1) / 2.02
    expected = build_laplacian(EDGE, [1.0], 0.02).to_dense() + np.diag(bump)
    np.testing.assert_allclose(build.matrix.to_dense(), expected, rtol=1e-14)


def test_learned_build_checks_width(rng: np.random.Generator) -> None:
    params = LearnedParameters.init(
        Construction.DIAG_DOMINANT, SimilarityConfig(), 3, 2, rng
    )
    with pytest.raises(ConfigurationError, match="W_sim expects 3 input features"):
        z = ag.constant(np.ones((2, 4)))
        build_learned(Construction.DIAG_DOMINANT, z, EDGE, params)


@pytest.mark.parametrize(("construction", "kind"), SIMILARITIES)
def test_learned_build_gradients(
    construction: Construction, kind: SimilarityKind, rng: np.random.Generator
) -> None:
    topo = random_graph(rng, 8)
    similarity = SimilarityConfig(kind)
    options = BuildOptions(similarity=similarity)
    params = LearnedParameters.init(construction, similarity, 4, 3, rng)
    z = ag.constant(rng.normal(size=(8, 4)))
    diag_weights = ag.constant(rng.normal(size=(8, 1)))
    off_weights = ag.constant(rng.normal(size=(topo.edge_count, 1)))

    def loss() -> ag.Tensor:
        build = build_learned(construction, z, topo, params, options)
        return ag.total_sum(build.diagonal * diag_weights) + ag.total_sum(
            build.off_diagonal * off_weights
        )

    for result in ag.gradcheck(loss, params.tensors(), rtol=1e-3):
        assert result.passed, result
