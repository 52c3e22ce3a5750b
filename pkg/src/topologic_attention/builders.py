"""Walk-summable precision matrices: pairwise normal, diagonally dominant, Laplacian.

Each construction has a fixed builder operating on plain arrays and a learned
path (`build_learned`) that computes the same quantities with
`topologic_attention.autograd` ops so gradients reach the similarity and
node-head parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigurationError, InputError
from .graph import SparseSymmetricMatrix, spectral_radius_abs_residual

if TYPE_CHECKING:
    import numpy.typing as npt

    from .graph import GraphTopology, WalkSummabilityReport

    FloatArray = npt.NDArray[np.float64]

LEAKY_SLOPE = 0.01
COSINE_EPS = 1e-12
DEGREE_FLOOR = 1e-300


class Construction(str, Enum):
    PAIRWISE_NORMAL = "pairwise_normal"
    DIAG_DOMINANT = "diag_dominant"
    LAPLACIAN = "laplacian"


class SimilarityKind(str, Enum):
    COSINE = "cosine"
    GAUSSIAN_KERNEL = "gaussian_kernel"
    MLP = "mlp"


@dataclass(frozen=True)
class SimilarityConfig:
    kind: SimilarityKind = SimilarityKind.COSINE
    bandwidth: float = 1.0
    symmetrize: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SimilarityKind(self.kind))
        if not self.bandwidth > 0:
            raise ConfigurationError(
                f"similarity bandwidth must be positive, got {self.bandwidth}"
            )
        if self.kind is SimilarityKind.MLP:
            object.__setattr__(self, "symmetrize", True)


@dataclass(frozen=True)
class BuildOptions:
    """Constants shared by the fixed and learned builders."""

    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    margin: float = 1.1
    """Pairwise normal: enforce ``a * c >= margin * b**2``."""
    slack: float = 0.1
    """Diagonally dominant: ``J_ii - sum_j |J_ij| >= slack``."""
    epsilon_shift: float = 0.02
    """Laplacian: ``J = (L + eps I) / (2 + eps)``."""
    bump_scale: float = 0.1
    """Learned Laplacian: scale of the softplus diagonal bump."""

    def __post_init__(self) -> None:
        if not self.margin > 1:
            raise ConfigurationError(f"margin must be > 1, got {self.margin}")
        if not self.slack > 0:
            raise ConfigurationError(f"slack must be > 0, got {self.slack}")
        if not 0 < self.epsilon_shift < 1:
            raise ConfigurationError(
                f"epsilon_shift must be in (0, 1), got {self.epsilon_shift}"
            )
        if self.bump_scale < 0:
            raise ConfigurationError(
                f"bump_scale must be >= 0, got {self.bump_scale}"
            )


@dataclass(frozen=True, eq=False)
class PrecisionBuild:
    """A precision matrix plus the tensors it was assembled from.

    For learned builds `diagonal` (N, 1) and `off_diagonal` (E, 1) sit on the
    active tape; for fixed builds they are constants.
    """

    matrix: SparseSymmetricMatrix
    construction: Construction
    learned: bool
    diagonal: Tensor
    off_diagonal: Tensor

    @cached_property
    def report(self) -> WalkSummabilityReport:
        return spectral_radius_abs_residual(self.matrix)

    @classmethod
    def from_tensors(
        cls,
        topology: GraphTopology,
        construction: Construction,
        diagonal: Tensor,
        off_diagonal: Tensor,
        *,
        learned: bool,
    ) -> PrecisionBuild:
        matrix = SparseSymmetricMatrix(
            topology, diagonal.values.reshape(-1), off_diagonal.values.reshape(-1)
        )
        return cls(matrix, construction, learned, diagonal, off_diagonal)

    @classmethod
    def constant(
        cls, matrix: SparseSymmetricMatrix, construction: Construction
    ) -> PrecisionBuild:
        return cls(
            matrix,
            construction,
            False,
            ag.constant(matrix.diagonal[:, None]),
            ag.constant(matrix.off_diagonal[:, None]),
        )


def _edge_array(values: np.ndarray, topology: GraphTopology, what: str) -> FloatArray:
    out = np.asarray(values, dtype=np.float64).reshape(-1)
    if out.shape[0] != topology.edge_count:
        raise InputError(
            f"{what} has {out.shape[0]} entries for {topology.edge_count} edges"
        )
    if not np.isfinite(out).all():
        raise InputError(f"{what} contains NaN or Inf")
    return out


def _incident_sum(
    topology: GraphTopology, first: FloatArray, second: FloatArray
) -> FloatArray:
    """Per node: `first` summed where it is ``i``, `second` where it is ``j``."""
    n = topology.node_count
    return np.bincount(topology.edges[:, 0], first, minlength=n) + np.bincount(
        topology.edges[:, 1], second, minlength=n
    )


# -----------------------------------------------------------------------------
# fixed builders


def build_pairwise_normal(
    topology: GraphTopology,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    margin: float = 1.1,
) -> SparseSymmetricMatrix:
    """Sum of per-edge 2x2 blocks ``[[a, b], [b, c]]``.

    ``J_ij = b_ij`` and ``J_ii`` collects ``a`` from edges where ``i`` is the
    first endpoint and ``c`` where it is the second; isolated nodes get 1.
    Where ``a * c < margin * b**2``, ``b`` is clamped to
    ``sign(b) * sqrt(a * c / margin)``.

    Raises
    ------
    InputError
        If an ``a`` or ``c`` entry is not strictly positive.
    ConfigurationError
        If ``margin <= 1``.
    """
    if not margin > 1:
        raise ConfigurationError(f"margin must be > 1, got {margin}")
    a = _edge_array(a, topology, "a")
    b = _edge_array(b, topology, "b")
    c = _edge_array(c, topology, "c")
    for name, values in (("a", a), ("c", c)):
        bad = np.flatnonzero(values <= 0)
        if bad.size:
            i, j = topology.edges[bad[0]]
            raise InputError(
                f"self-precision {name} = {values[bad[0]]} on edge ({i}, {j}) "
                "must be strictly positive"
            )
    bound = np.sqrt(a * c / margin)
    b = np.where(np.abs(b) > bound, np.sign(b) * bound, b)
    diagonal = _incident_sum(topology, a, c)
    diagonal[topology.degrees == 0] = 1.0
    return SparseSymmetricMatrix(topology, diagonal, b)


def build_diag_dominant(
    topology: GraphTopology,
    couplings: np.ndarray,
    self_confidence: np.ndarray,
    slack: float = 0.1,
) -> SparseSymmetricMatrix:
    """``J_ii = sum_j |J_ij| + self_confidence_i + slack``."""
    if not slack > 0:
        raise ConfigurationError(f"slack must be > 0, got {slack}")
    couplings = _edge_array(couplings, topology, "couplings")
    confidence = np.asarray(self_confidence, dtype=np.float64).reshape(-1)
    if confidence.shape[0] != topology.node_count:
        raise InputError(
            f"self_confidence has {confidence.shape[0]} entries for "
            f"{topology.node_count} nodes"
        )
    if (confidence < 0).any() or not np.isfinite(confidence).all():
        raise InputError("self_confidence must be finite and nonnegative")
    magnitude = np.abs(couplings)
    diagonal = _incident_sum(topology, magnitude, magnitude) + confidence + slack
    return SparseSymmetricMatrix(topology, diagonal, couplings)


def build_laplacian(
    topology: GraphTopology,
    weights: np.ndarray,
    epsilon_shift: float = 0.02,
    diagonal_bump: np.ndarray | None = None,
) -> SparseSymmetricMatrix:
    """Shifted, rescaled normalized Laplacian ``(L + eps I + bump) / (2 + eps)``.

    ``L = I - D^-1/2 A D^-1/2`` with ``A`` the edge weights; nodes of zero
    weighted degree get an identity row.

    Raises
    ------
    InputError
        If a weight is negative.
    ConfigurationError
        If `epsilon_shift` is outside ``(0, 1)``.
    """
    if not 0 < epsilon_shift < 1:
        raise ConfigurationError(
            f"epsilon_shift must be in (0, 1), got {epsilon_shift}"
        )
    weights = _edge_array(weights, topology, "weights")
    bad = np.flatnonzero(weights < 0)
    if bad.size:
        i, j = topology.edges[bad[0]]
        raise InputError(f"negative weight {weights[bad[0]]} on edge ({i}, {j})")
    n = topology.node_count
    degree = _incident_sum(topology, weights, weights)
    inv_sqrt = np.zeros(n)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    scale = 2.0 + epsilon_shift
    off = -weights * inv_sqrt[i] * inv_sqrt[j] / scale
    diagonal = np.full(n, (1.0 + epsilon_shift) / scale)
    if diagonal_bump is not None:
        bump = np.asarray(diagonal_bump, dtype=np.float64).reshape(-1)
        if bump.shape != (n,) or (bump < 0).any() or not np.isfinite(bump).all():
            raise InputError(f"diagonal_bump must be {n} finite nonnegative values")
        diagonal = diagonal + bump / scale
    return SparseSymmetricMatrix(topology, diagonal, off)


def build_fixed(
    construction: Construction | str,
    features: np.ndarray,
    topology: GraphTopology,
    options: BuildOptions | None = None,
) -> PrecisionBuild:
    """Non-learned precision for a construction, from raw node features.

    Pairwise normal uses ``a = c = 1`` and cosine couplings; diagonally dominant
    uses cosine couplings with zero confidence; Laplacian uses binary weights.
    """
    construction = Construction(construction)
    options = options or BuildOptions()
    if construction is Construction.LAPLACIAN:
        matrix = build_laplacian(
            topology, np.ones(topology.edge_count), options.epsilon_shift
        )
        return PrecisionBuild.constant(matrix, construction)

    scores = similarity_scores(
        ag.constant(features), topology, SimilarityConfig(SimilarityKind.COSINE)
    ).values.reshape(-1)
    if construction is Construction.PAIRWISE_NORMAL:
        ones = np.ones(topology.edge_count)
        matrix = build_pairwise_normal(topology, ones, scores, ones, options.margin)
    else:
        matrix = build_diag_dominant(
            topology, scores, np.zeros(topology.node_count), options.slack
        )
    return PrecisionBuild.constant(matrix, construction)


# -----------------------------------------------------------------------------
# similarity


@dataclass
class MlpScorer:
    """Scalar edge scorer ``w2 . LeakyReLU([s_i, s_j] W1 + b1) + b2``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_sim: int, rng: np.random.Generator, prefix: str = "") -> MlpScorer:
        hidden = d_sim
        return cls(
            w1=ag.parameter(uniform_fan_in(rng, 2 * d_sim, hidden), f"{prefix}mlp_w1"),
            b1=ag.parameter(np.zeros((1, hidden)), f"{prefix}mlp_b1"),
            w2=ag.parameter(uniform_fan_in(rng, hidden, 1), f"{prefix}mlp_w2"),
            b2=ag.parameter(np.zeros((1, 1)), f"{prefix}mlp_b2"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, left: Tensor, right: Tensor) -> Tensor:
        hidden = ag.leaky_relu(
            ag.concat_columns([left, right]) @ self.w1 + self.b1, LEAKY_SLOPE
        )
        return hidden @ self.w2 + self.b2


def _cosine(s: Tensor, topology: GraphTopology) -> Tensor:
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    sv = s.values
    si, sj = sv[i], sv[j]
    norms = np.linalg.norm(sv, axis=1)
    ni, nj = norms[i][:, None], norms[j][:, None]
    dot = (si * sj).sum(axis=1, keepdims=True)
    denom = ni * nj + COSINE_EPS
    scores = dot / denom

    def backward(g: FloatArray) -> tuple[FloatArray]:
        safe_i = np.where(ni > 0, ni, 1.0)
        safe_j = np.where(nj > 0, nj, 1.0)
        coeff = g * dot / denom**2
        d_si = g * sj / denom - coeff * nj * si / safe_i
        d_sj = g * si / denom - coeff * ni * sj / safe_j
        out = np.zeros(sv.shape)
        np.add.at(out, i, d_si)
        np.add.at(out, j, d_sj)
        return (out,)

    return ag.record_op("cosine_similarity", scores, (s,), backward)


def similarity_scores(
    s: Tensor,
    topology: GraphTopology,
    cfg: SimilarityConfig,
    mlp: MlpScorer | None = None,
) -> Tensor:
    """Per-edge similarity of the rows of `s`, returned as an (E, 1) tensor.

    Parameters
    ----------
    s : Tensor
        (N, d_sim) similarity embeddings.
    topology : GraphTopology
        Edges to score, in canonical order.
    cfg : SimilarityConfig
        Which score to compute.
    mlp : MlpScorer, optional
        Required for ``kind == "mlp"``; the score is
        ``(f(s_i, s_j) + f(s_j, s_i)) / 2``.
    """
    if not np.isfinite(s.values).all():
        raise InputError("similarity embeddings contain NaN or Inf")
    if s.shape[0] != topology.node_count:
        raise InputError(
            f"similarity embeddings have {s.shape[0]} rows for "
            f"{topology.node_count} nodes"
        )
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    if cfg.kind is SimilarityKind.COSINE:
        return _cosine(s, topology)
    if cfg.kind is SimilarityKind.GAUSSIAN_KERNEL:
        diff = ag.gather_rows(s, i) - ag.gather_rows(s, j)
        sq = ag.row_sum(diff * diff)
        return ag.exp(ag.scale(sq, -1.0 / (2.0 * cfg.bandwidth**2)))
    if mlp is None:
        raise ConfigurationError("mlp similarity needs MlpScorer parameters")
    left, right = ag.gather_rows(s, i), ag.gather_rows(s, j)
    return ag.scale(mlp(left, right) + mlp(right, left), 0.5)


# -----------------------------------------------------------------------------
# learned builders


def uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int) -> FloatArray:
    """``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights of shape (fan_in, fan_out)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class LearnedParameters:
    """Per-head parameters of a learned precision construction."""

    w_sim: Tensor
    """(d_model, d_sim) similarity projection."""
    node_weight: Tensor | None = None
    """(d_model, 1) softplus node head (self-precision, confidence or bump)."""
    node_bias: Tensor | None = None
    mlp: MlpScorer | None = None

    @classmethod
    def init(
        cls,
        construction: Construction | str,
        similarity: SimilarityConfig,
        d_model: int,
        d_sim: int,
        rng: np.random.Generator,
        prefix: str = "",
    ) -> LearnedParameters:
        construction = Construction(construction)
        params = cls(
            w_sim=ag.parameter(uniform_fan_in(rng, d_model, d_sim), f"{prefix}w_sim")
        )
        params.node_weight = ag.parameter(
            uniform_fan_in(rng, d_model, 1), f"{prefix}node_weight"
        )
        params.node_bias = ag.parameter(np.zeros((1, 1)), f"{prefix}node_bias")
        if similarity.kind is SimilarityKind.MLP:
            params.mlp = MlpScorer.init(d_sim, rng, prefix)
        return params

    def tensors(self) -> list[Tensor]:
        out = [self.w_sim]
        if self.node_weight is not None and self.node_bias is not None:
            out += [self.node_weight, self.node_bias]
        if self.mlp is not None:
            out += self.mlp.tensors()
        return out

    def node_head(self, z: Tensor) -> Tensor:
        """``softplus(Z w + b)`` as an (N, 1) tensor."""
        if self.node_weight is None or self.node_bias is None:
            raise ConfigurationError("construction needs a node head (node_weight)")
        return ag.softplus(z @ self.node_weight + self.node_bias)


def _segment_both(topology: GraphTopology, first: Tensor, second: Tensor) -> Tensor:
    n = topology.node_count
    return ag.segment_sum(first, topology.edges[:, 0], n) + ag.segment_sum(
        second, topology.edges[:, 1], n
    )


def build_learned(
    construction: Construction | str,
    z: Tensor,
    topology: GraphTopology,
    params: LearnedParameters,
    options: BuildOptions | None = None,
) -> PrecisionBuild:
    """Assemble a differentiable precision matrix from node embeddings `z`.

    ``s = LeakyReLU(Z W_sim)`` is scored per edge, then:

    * pairwise normal: ``b`` = score, ``a_ij = p_i``, ``c_ij = p_j`` with
      ``p = softplus(Z w + b0)``; ``(a, c)`` are both multiplied by
      ``sqrt(max(1, margin * b**2 / (a * c)))``.
    * diagonally dominant: couplings = score, confidence = node head.
    * Laplacian: weights = score (gaussian kernel) or ``softplus(score)``;
      the diagonal bump is ``bump_scale * softplus(Z w + b0)``.

    Raises
    ------
    ConfigurationError
        If `params` lacks what the construction needs.
    """
    construction = Construction(construction)
    options = options or BuildOptions()
    if not np.isfinite(z.values).all():
        raise InputError("node embeddings contain NaN or Inf")
    if params.w_sim.shape[0] != z.shape[1]:
        raise ConfigurationError(
            f"W_sim expects {params.w_sim.shape[0]} input features, got {z.shape[1]}"
        )
    n = topology.node_count
    s = ag.leaky_relu(z @ params.w_sim, LEAKY_SLOPE)
    scores = similarity_scores(s, topology, options.similarity, params.mlp)
    i, j = topology.edges[:, 0], topology.edges[:, 1]

    if construction is Construction.PAIRWISE_NORMAL:
        p = params.node_head(z)
        a, c = ag.gather_rows(p, i), ag.gather_rows(p, j)
        ratio = ag.scale(scores * scores, options.margin) / (a * c)
        stretch = ag.sqrt(ag.clip_min(ratio, 1.0))
        a, c = a * stretch, c * stretch
        isolated = ag.constant((topology.degrees == 0).astype(np.float64)[:, None])
        diagonal = _segment_both(topology, a, c) + isolated
        off = scores
    elif construction is Construction.DIAG_DOMINANT:
        magnitude = ag.abs_(scores)
        diagonal = ag.add_scalar(
            _segment_both(topology, magnitude, magnitude) + params.node_head(z),
            options.slack,
        )
        off = scores
    else:
        if options.similarity.kind is SimilarityKind.GAUSSIAN_KERNEL:
            weights = scores
        else:
            weights = ag.softplus(scores)
        degree = ag.clip_min(_segment_both(topology, weights, weights), DEGREE_FLOOR)
        inv_sqrt = ag.constant(np.ones((n, 1))) / ag.sqrt(degree)
        scale = 2.0 + options.epsilon_shift
        off = ag.scale(
            weights * ag.gather_rows(inv_sqrt, i) * ag.gather_rows(inv_sqrt, j),
            -1.0 / scale,
        )
        bump = ag.scale(params.node_head(z), options.bump_scale / scale)
        diagonal = ag.add_scalar(bump, (1.0 + options.epsilon_shift) / scale)

    return PrecisionBuild.from_tensors(
        topology, construction, diagonal, off, learned=True
    )
