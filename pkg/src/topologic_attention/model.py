"""The topologic attention layer and the two-layer node classifier built from it.

A layer is a multi-head GaBP block followed by a node-wise feed-forward
block, each wrapped in a residual connection::

    Z     = LayerNorm1(X)
    h_k   = LeakyReLU(Z W_obs_k)
    mu_k  = solve(J_k, h_k)                J_k from the head's construction
    U_k   = LeakyReLU(LayerNorm2_k(mu_k))
    X     = X + concat_k(U_k) W_proj + b_proj
    X     = X + LeakyReLU(LayerNorm(X) W1 + b1) W2 + b2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

from . import autograd as ag
from ._logging import get_logger
from .builders import (
    LEAKY_SLOPE,
    BuildOptions,
    Construction,
    LearnedParameters,
    PrecisionBuild,
    build_fixed,
    build_learned,
    uniform_fan_in,
)
from .exceptions import ConfigurationError, InputError, NumericBreakdownError
from .implicit import SolveTelemetry, gabp_fixed_point
from .solver import SolverConfig

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    import numpy.typing as npt

    from .autograd import Tensor
    from .graph import GraphTopology

logger = get_logger(__name__)

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class HeadConfig:
    d_latent: int
    construction: Construction = Construction.DIAG_DOMINANT
    learned: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "construction", Construction(self.construction))
        if self.d_latent < 1:
            raise ConfigurationError(f"d_latent must be >= 1, got {self.d_latent}")


@dataclass(frozen=True)
class LayerConfig:
    d_model: int
    heads: tuple[HeadConfig, ...]
    ffn_hidden: int = 128
    dropout: float = 0.0
    """Dropout inside the feed-forward block."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ConfigurationError("a layer needs at least one head")
        total = sum(head.d_latent for head in self.heads)
        if total != self.d_model:
            raise ConfigurationError(
                f"head widths sum to {total}, expected d_model={self.d_model}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ModelConfig:
    """Shape and hyperparameters of `TopologicAttentionNetwork`."""

    d_in: int
    num_classes: int
    hidden: int = 64
    heads: tuple[int, ...] = (8, 1)
    """Heads per layer; each head gets ``hidden // heads`` latent features."""
    construction: Construction = Construction.DIAG_DOMINANT
    learned: bool = True
    build: BuildOptions = field(default_factory=BuildOptions)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ffn_hidden: int = 128
    dropout: float = 0.6
    ffn_dropout: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "construction", Construction(self.construction))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.d_in < 1 or self.num_classes < 1:
            raise ConfigurationError("d_in and num_classes must be positive")
        for count in self.heads:
            if count < 1 or self.hidden % count:
                raise ConfigurationError(
                    f"{count} heads do not evenly divide hidden={self.hidden}"
                )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    def layers(self) -> list[LayerConfig]:
        return [
            LayerConfig(
                d_model=self.hidden,
                heads=tuple(
                    HeadConfig(self.hidden // count, self.construction, self.learned)
                    for _ in range(count)
                ),
                ffn_hidden=self.ffn_hidden,
                dropout=self.ffn_dropout,
            )
            for count in self.heads
        ]


@dataclass
class HeadParameters:
    w_obs: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    learned: LearnedParameters | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_obs", self.w_obs
        yield "ln2_gain", self.ln_gain
        yield "ln2_bias", self.ln_bias
        if self.learned is not None:
            for tensor in self.learned.tensors():
                yield tensor.name.rsplit(".", 1)[-1], tensor


@dataclass
class LayerParameters:
    ln1_gain: Tensor
    ln1_bias: Tensor
    heads: list[HeadParameters]
    w_proj: Tensor
    b_proj: Tensor
    ffn_ln_gain: Tensor
    ffn_ln_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


class DropoutStreams:
    """Counter-based dropout generators keyed by (seed, epoch, op instance).

    Each dropout call site takes the next op-instance number, so a forward
    pass draws the same masks regardless of what ran before it.
    """

    def __init__(self, seed: int, epoch: int) -> None:
        self.seed = seed
        self.epoch = epoch
        self._next = 0

    def next(self) -> np.random.Generator:
        instance, self._next = self._next, self._next + 1
        return np.random.Generator(
            np.random.Philox(key=self.seed, counter=[0, 0, self.epoch, instance])
        )


def _ones(width: int, name: str) -> Tensor:
    return ag.parameter(np.ones((1, width)), name)


def _zeros(width: int, name: str) -> Tensor:
    return ag.parameter(np.zeros((1, width)), name)


class TopologicAttentionNetwork:
    """Input projection, topologic attention layers, linear classifier.

    Parameters
    ----------
    config : ModelConfig
        Layer sizes, construction and solver settings.
    seed : int
        Seed of the parameter initialization.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.layer_configs = config.layers()
        self.telemetry: list[SolveTelemetry] = []
        rng = np.random.default_rng(seed)
        hidden = config.hidden
        self.w_in = ag.parameter(uniform_fan_in(rng, config.d_in, hidden), "input.w")
        self.b_in = _zeros(hidden, "input.b")
        self.layers: list[LayerParameters] = []
        for index, layer in enumerate(self.layer_configs):
            self.layers.append(self._init_layer(f"layer{index}.", layer, rng))
        self.w_out = ag.parameter(
            uniform_fan_in(rng, hidden, config.num_classes), "classifier.w"
        )
        self.b_out = _zeros(config.num_classes, "classifier.b")

    def _init_layer(
        self, prefix: str, layer: LayerConfig, rng: np.random.Generator
    ) -> LayerParameters:
        d = layer.d_model
        heads = []
        for k, head in enumerate(layer.heads):
            hp = f"{prefix}head{k}."
            learned = None
            if head.learned:
                learned = LearnedParameters.init(
                    head.construction,
                    self.config.build.similarity,
                    d,
                    head.d_latent,
                    rng,
                    prefix=hp,
                )
            heads.append(
                HeadParameters(
                    w_obs=ag.parameter(
                        uniform_fan_in(rng, d, head.d_latent), f"{hp}w_obs"
                    ),
                    ln_gain=_ones(head.d_latent, f"{hp}ln2_gain"),
                    ln_bias=_zeros(head.d_latent, f"{hp}ln2_bias"),
                    learned=learned,
                )
            )
        return LayerParameters(
            ln1_gain=_ones(d, f"{prefix}ln1_gain"),
            ln1_bias=_zeros(d, f"{prefix}ln1_bias"),
            heads=heads,
            w_proj=ag.parameter(uniform_fan_in(rng, d, d), f"{prefix}w_proj"),
            b_proj=_zeros(d, f"{prefix}b_proj"),
            ffn_ln_gain=_ones(d, f"{prefix}ffn_ln_gain"),
            ffn_ln_bias=_zeros(d, f"{prefix}ffn_ln_bias"),
            ffn_w1=ag.parameter(
                uniform_fan_in(rng, d, layer.ffn_hidden), f"{prefix}ffn_w1"
            ),
            ffn_b1=_zeros(layer.ffn_hidden, f"{prefix}ffn_b1"),
            ffn_w2=ag.parameter(
                uniform_fan_in(rng, layer.ffn_hidden, d), f"{prefix}ffn_w2"
            ),
            ffn_b2=_zeros(d, f"{prefix}ffn_b2"),
        )

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors by checkpoint name, in a fixed order."""
        out = {"input.w": self.w_in, "input.b": self.b_in}
        for index, layer in enumerate(self.layers):
            prefix = f"layer{index}."
            out[f"{prefix}ln1_gain"] = layer.ln1_gain
            out[f"{prefix}ln1_bias"] = layer.ln1_bias
            for k, head in enumerate(layer.heads):
                for name, tensor in head.named():
                    out[f"{prefix}head{k}.{name}"] = tensor
            for name in (
                "w_proj",
                "b_proj",
                "ffn_ln_gain",
                "ffn_ln_bias",
                "ffn_w1",
                "ffn_b1",
                "ffn_w2",
                "ffn_b2",
            ):
                out[f"{prefix}{name}"] = getattr(layer, name)
        out["classifier.w"] = self.w_out
        out["classifier.b"] = self.b_out
        return out

    def state_dict(self) -> dict[str, npt.NDArray[np.float64]]:
        return {name: t.values.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy values into the existing parameters (names and shapes must match)."""
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise InputError(
                f"checkpoint does not match the model: missing {missing}, "
                f"unexpected {unexpected}"
            )
        for name, tensor in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != tensor.shape:
                raise InputError(
                    f"checkpoint tensor {name!r} has shape {values.shape}, "
                    f"expected {tensor.shape}"
                )
            tensor.values = values.copy()

    # -- blocks ----------------------------------------------------------------

    def _head_precision(
        self,
        z: Tensor,
        topology: GraphTopology,
        head: HeadConfig,
        params: HeadParameters,
        fixed: dict[Construction, PrecisionBuild],
        features: np.ndarray,
    ) -> PrecisionBuild:
        if params.learned is not None:
            return build_learned(
                head.construction, z, topology, params.learned, self.config.build
            )
        if head.construction not in fixed:
            fixed[head.construction] = build_fixed(
                head.construction, features, topology, self.config.build
            )
        return fixed[head.construction]

    def gabp_block(
        self,
        x: Tensor,
        index: int,
        topology: GraphTopology,
        features: np.ndarray,
        fixed: dict[Construction, PrecisionBuild] | None = None,
    ) -> Tensor:
        """Multi-head GaBP subblock of layer `index` with its residual."""
        layer = self.layer_configs[index]
        params = self.layers[index]
        fixed = {} if fixed is None else fixed
        z = ag.layer_norm(x, params.ln1_gain, params.ln1_bias)
        outputs = []
        for k, (head, hp) in enumerate(zip(layer.heads, params.heads)):
            h = ag.leaky_relu(z @ hp.w_obs, LEAKY_SLOPE)
            telemetry = SolveTelemetry(layer=index, head=k)
            try:
                build = self._head_precision(z, topology, head, hp, fixed, features)
                mu = gabp_fixed_point(build, h, self.config.solver, telemetry=telemetry)
            except NumericBreakdownError as e:
                raise e.annotate(f"layer {index}, head {k}") from e
            self.telemetry.append(telemetry)
            outputs.append(
                ag.leaky_relu(ag.layer_norm(mu, hp.ln_gain, hp.ln_bias), LEAKY_SLOPE)
            )
        mixed = ag.concat_columns(outputs) @ params.w_proj + params.b_proj
        return x + mixed

    def ffn_block(
        self,
        x: Tensor,
        index: int,
        *,
        train: bool = False,
        streams: DropoutStreams | None = None,
    ) -> Tensor:
        """Node-wise feed-forward subblock of layer `index` with its residual."""
        layer = self.layer_configs[index]
        params = self.layers[index]
        y = ag.layer_norm(x, params.ffn_ln_gain, params.ffn_ln_bias)
        y = ag.leaky_relu(y @ params.ffn_w1 + params.ffn_b1, LEAKY_SLOPE)
        if train and layer.dropout > 0:
            y = ag.dropout(y, layer.dropout, True, _rng(streams))
        return x + (y @ params.ffn_w2 + params.ffn_b2)

    # -- network ---------------------------------------------------------------

    def _check_inputs(self, features: np.ndarray, topology: GraphTopology) -> None:
        if features.ndim != 2 or features.shape != (
            topology.node_count,
            self.config.d_in,
        ):
            raise InputError(
                f"features must be ({topology.node_count}, {self.config.d_in}), "
                f"got {features.shape}"
            )
        if not np.isfinite(features).all():
            raise InputError("features contain NaN or Inf")

    def _layer_outputs(
        self,
        features: np.ndarray,
        topology: GraphTopology,
        *,
        train: bool,
        streams: DropoutStreams | None,
        stop_before: int | None = None,
    ) -> Tensor:
        rate = self.config.dropout
        x = ag.constant(features)
        if train:
            x = ag.dropout(x, rate, True, _rng(streams))
        x = x @ self.w_in + self.b_in
        fixed: dict[Construction, PrecisionBuild] = {}
        for index in range(len(self.layers)):
            if train and index > 0:
                x = ag.dropout(x, rate, True, _rng(streams))
            if index == stop_before:
                return x
            x = self.gabp_block(x, index, topology, features, fixed)
            x = self.ffn_block(x, index, train=train, streams=streams)
        return x

    def forward(
        self,
        features: np.ndarray,
        topology: GraphTopology,
        mode: Mode = "eval",
        *,
        seed: int = 0,
        epoch: int = 0,
    ) -> Tensor:
        """Logits for every node, shape (N, num_classes).

        Dropout is active only in ``"train"`` mode; its masks depend on
        (`seed`, `epoch`) alone.  Per-solve telemetry of this pass is left
        in `telemetry`.
        """
        features = np.asarray(features, dtype=np.float64)
        self._check_inputs(features, topology)
        self.telemetry = []
        train = mode == "train"
        streams = DropoutStreams(seed, epoch) if train else None
        x = self._layer_outputs(features, topology, train=train, streams=streams)
        return x @ self.w_out + self.b_out

    def precision_for(
        self,
        features: np.ndarray,
        topology: GraphTopology,
        layer: int,
        head: int,
    ) -> PrecisionBuild:
        """Rebuild head `head` of layer `layer` on an eval-mode pass."""
        if not 0 <= layer < len(self.layers):
            raise InputError(
                f"layer {layer} does not exist ({len(self.layers)} layers)"
            )
        heads = self.layer_configs[layer].heads
        if not 0 <= head < len(heads):
            raise InputError(f"head {head} does not exist in layer {layer}")
        features = np.asarray(features, dtype=np.float64)
        self._check_inputs(features, topology)
        x = self._layer_outputs(
            features, topology, train=False, streams=None, stop_before=layer
        )
        params = self.layers[layer]
        z = ag.layer_norm(x, params.ln1_gain, params.ln1_bias)
        return self._head_precision(
            z, topology, heads[head], params.heads[head], {}, features
        )


def _rng(streams: DropoutStreams | None) -> np.random.Generator:
    if streams is None:
        raise ConfigurationError("train-mode dropout needs DropoutStreams")
    return streams.next()


def predictions(logits: Tensor) -> npt.NDArray[np.int64]:
    return np.argmax(logits.values, axis=1).astype(np.int64)


def accuracy(
    logits: Tensor, labels: np.ndarray, nodes: Sequence[int] | np.ndarray
) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return float("nan")
    return float((predictions(logits)[nodes] == np.asarray(labels)[nodes]).mean())
