"""Experiment configuration schema.

Config files are YAML (JSON is accepted unchanged) and are validated against
`ExperimentConfig`, a declarative mkdocs option schema.  Unknown keys are
rejected.  The fully resolved configuration, overrides applied, is written
next to run outputs as ``resolved_config.yaml``.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Any

import mkdocs.config.config_options as opt
import yaml
from mkdocs.config import Config
from mkdocs.config.base import ValidationError

from ._logging import get_logger
from .builders import BuildOptions, Construction, SimilarityConfig, SimilarityKind
from .exceptions import ConfigurationError
from .model import ModelConfig
from .solver import Schedule, SolverConfig

if TYPE_CHECKING:
    from collections.abc import Mapping

logger = get_logger(__name__)

RESOLVED_CONFIG = "resolved_config.yaml"
DEFAULT_PATIENCE = 100
FIXED_LAPLACIAN_PATIENCE = 200


class Real(opt.Type[float]):
    """A number (ints accepted) with optional bounds."""

    def __init__(
        self,
        default: float | None = None,
        *,
        above: float | None = None,
        at_least: float | None = None,
        below: float | None = None,
    ) -> None:
        super().__init__(float, default=default)
        self.above = above
        self.at_least = at_least
        self.below = below

    def run_validation(self, value: object) -> float:
        if isinstance(value, str):
            # pyyaml reads exponent literals without a dot (1e-6) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(
                f"Expected a number but received: {type(value).__name__}"
            )
        number = float(value)
        if self.above is not None and not number > self.above:
            raise ValidationError(f"Must be greater than {self.above}, got {number}")
        if self.at_least is not None and not number >= self.at_least:
            raise ValidationError(f"Must be at least {self.at_least}, got {number}")
        if self.below is not None and not number < self.below:
            raise ValidationError(f"Must be less than {self.below}, got {number}")
        return number


class Int(opt.Type[int]):
    """An integer with an optional lower bound."""

    def __init__(
        self, default: int | None = None, *, at_least: int | None = None
    ) -> None:
        super().__init__(int, default=default)
        self.at_least = at_least

    def run_validation(self, value: object) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(
                f"Expected an integer but received: {type(value).__name__}"
            )
        if self.at_least is not None and value < self.at_least:
            raise ValidationError(f"Must be at least {self.at_least}, got {value}")
        return value


class SolverOptions(Config):  # type: ignore [no-untyped-call]
    """GaBP stopping rule and damping."""

    tol = Real(1e-6, above=0)
    """Stop when the largest message change is at most `tol`."""
    max_iter = Int(1000, at_least=1)
    damping = Real(0.5, at_least=0, below=1)
    """Weight of the previous message in ``m <- d m + (1 - d) m_new``."""
    schedule = opt.Choice(
        [s.value for s in Schedule], default=Schedule.SYNCHRONOUS.value
    )


class SimilarityOptions(Config):  # type: ignore [no-untyped-call]
    kind = opt.Optional(opt.Choice([k.value for k in SimilarityKind]))
    """Default: ``gaussian_kernel`` for the Laplacian, ``cosine`` otherwise."""
    bandwidth = Real(1.0, above=0)


class ExperimentConfig(Config):  # type: ignore [no-untyped-call]
    """Everything a training run depends on."""

    dataset = opt.Type(str)
    """Dataset directory; relative paths resolve against the config file."""
    construction = opt.Choice(
        [c.value for c in Construction], default=Construction.DIAG_DOMINANT.value
    )
    learned = opt.Type(bool, default=True)
    seeds = opt.ListOfItems(Int(at_least=0), default=[0])
    learning_rate = Real(1e-3, above=0)
    weight_decay = Real(5e-4, at_least=0)
    dropout = Real(0.6, at_least=0, below=1)
    """Dropout on the input features and between consecutive layers."""
    ffn_dropout = Real(0.0, at_least=0, below=1)
    patience = opt.Optional(Int(at_least=1))
    """Default: 100, or 200 for the fixed Laplacian."""
    max_epochs = Int(2000, at_least=1)
    solver = opt.SubConfig(SolverOptions)
    hidden = Int(64, at_least=1)
    heads = opt.ListOfItems(Int(at_least=1), default=[8, 1])
    """Heads per layer; ``hidden`` must be divisible by each."""
    ffn_hidden = Int(128, at_least=1)
    similarity = opt.SubConfig(SimilarityOptions)
    margin = Real(1.1, above=1)
    slack = Real(0.1, above=0)
    epsilon_shift = Real(0.02, above=0, below=1)
    bump_scale = Real(0.1, at_least=0)


def _merge(base: dict[str, Any], patch: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def experiment_from_dict(
    raw: Mapping[str, Any],
    *,
    base_dir: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    source: str = "<config>",
) -> ExperimentConfig:
    """Validate a config mapping and resolve the derived defaults.

    Raises
    ------
    ConfigurationError
        On any invalid value or unknown key (every problem is logged first).
    """
    data = _merge(dict(raw), overrides or {})
    cfg = ExperimentConfig(config_file_path=source)
    cfg.load_dict(data)
    failed, warnings = cfg.validate()
    for key, error in failed:
        logger.error("%s: option %r: %s", source, key, error)
    for key, message in warnings:
        logger.error("%s: option %r: %s", source, key, message)
    if failed or warnings:
        problems = [*(k for k, _ in failed), *(k for k, _ in warnings)]
        raise ConfigurationError(
            f"{source}: invalid configuration (see log): {', '.join(problems)}"
        )
    if not cfg.dataset:
        raise ConfigurationError(f"{source}: 'dataset' is required")
    if base_dir is not None and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str(Path(base_dir) / cfg.dataset)
    if cfg.patience is None:
        fixed_laplacian = (
            cfg.construction == Construction.LAPLACIAN.value and not cfg.learned
        )
        cfg.patience = FIXED_LAPLACIAN_PATIENCE if fixed_laplacian else DEFAULT_PATIENCE
    if cfg.similarity.kind is None:
        cfg.similarity.kind = (
            SimilarityKind.GAUSSIAN_KERNEL.value
            if cfg.construction == Construction.LAPLACIAN.value
            else SimilarityKind.COSINE.value
        )
    for count in cfg.heads:
        if cfg.hidden % count:
            raise ConfigurationError(
                f"{source}: hidden={cfg.hidden} is not divisible by {count} heads"
            )
    return cfg


def load_experiment(
    path: str | Path, overrides: Mapping[str, Any] | None = None
) -> ExperimentConfig:
    """Read and validate a YAML/JSON config file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e.strerror}", path=path) from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        raise ConfigurationError(f"invalid YAML: {e}", path=path, line=line) from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping", path=path)
    return experiment_from_dict(
        raw, base_dir=path.parent, overrides=overrides, source=str(path)
    )


def resolved_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Plain-data view of every option, suitable for YAML."""

    def plain(value: Any) -> Any:
        if isinstance(value, Config):
            return {key: plain(value[key]) for key in value}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return {key: plain(cfg[key]) for key in cfg}


def write_resolved(cfg: ExperimentConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / RESOLVED_CONFIG
    target.write_text(yaml.safe_dump(resolved_dict(cfg), sort_keys=False))
    logger.info("wrote %s", target)
    return target


def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig.from_options(cfg.solver)


def build_options(cfg: ExperimentConfig) -> BuildOptions:
    return BuildOptions(
        similarity=SimilarityConfig(
            kind=SimilarityKind(cfg.similarity.kind),
            bandwidth=cfg.similarity.bandwidth,
        ),
        margin=cfg.margin,
        slack=cfg.slack,
        epsilon_shift=cfg.epsilon_shift,
        bump_scale=cfg.bump_scale,
    )


def model_config(cfg: ExperimentConfig, d_in: int, num_classes: int) -> ModelConfig:
    return ModelConfig(
        d_in=d_in,
        num_classes=num_classes,
        hidden=cfg.hidden,
        heads=tuple(cfg.heads),
        construction=Construction(cfg.construction),
        learned=cfg.learned,
        build=build_options(cfg),
        solver=solver_config(cfg),
        ffn_hidden=cfg.ffn_hidden,
        dropout=cfg.dropout,
        ffn_dropout=cfg.ffn_dropout,
    )
