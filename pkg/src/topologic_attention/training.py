"""Training loop, early stopping and the multi-seed protocol."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from . import autograd as ag
from ._logging import get_logger
from .autograd import Tape
from .checkpoint import save_checkpoint
from .config import experiment_from_dict, model_config, resolved_dict
from .datasets import Dataset, load_dataset, random_split
from .exceptions import (
    ConfigurationError,
    NumericBreakdownError,
    ProtocolError,
    TrainingStepError,
)
from .model import TopologicAttentionNetwork, accuracy

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    import numpy.typing as npt

    from .config import ExperimentConfig
    from .implicit import SolveTelemetry

    FloatArray = npt.NDArray[np.float64]

logger = get_logger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_FAILURE_FRACTION = 0.2
MIN_TREND_EPOCHS = 20
SUMMARY_COLUMNS = (
    "seed",
    "test_acc",
    "epochs",
    "mean_iters_fwd",
    "mean_iters_bwd",
    "converged_fraction",
)
EPOCH_COLUMNS = (
    "epoch",
    "train_loss",
    "val_loss",
    "val_acc",
    "layer",
    "head",
    "forward_iterations",
    "forward_converged",
    "residual",
    "backward_iterations",
    "backward_converged",
)


# -----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, FloatArray] = field(default_factory=dict)
    v: dict[str, FloatArray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[dict[str, FloatArray], AdamState]:
    """One bias-corrected Adam update with L2 decay added to the gradients.

    Parameters without a gradient entry are returned unchanged and keep their
    moments.
    """
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    out: dict[str, FloatArray] = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        grad = grads.get(name)
        if grad is None:
            out[name] = value
            continue
        if np.shape(grad) != value.shape:
            raise ConfigurationError(
                f"gradient for {name!r} has shape {np.shape(grad)}, "
                f"expected {value.shape}"
            )
        g = np.asarray(grad, dtype=np.float64) + weight_decay * value
        m[name] = BETA1 * m.get(name, np.zeros_like(value)) + (1 - BETA1) * g
        v[name] = BETA2 * v.get(name, np.zeros_like(value)) + (1 - BETA2) * g * g
        m_hat = m[name] / (1 - BETA1**step)
        v_hat = v[name] / (1 - BETA2**step)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out, AdamState(step, m, v)


# -----------------------------------------------------------------------------
# records


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    solves: list[SolveTelemetry]

    @property
    def mean_forward_iterations(self) -> float:
        if not self.solves:
            return float("nan")
        return float(np.mean([s.forward_iterations for s in self.solves]))

    @property
    def mean_backward_iterations(self) -> float:
        counts = [s.backward_iterations for s in self.solves]
        known = [c for c in counts if c is not None]
        return float(np.mean(known)) if known else float("nan")


@dataclass
class RunRecord:
    """Everything recorded for one seed.

    `test_acc` is measured once, with the parameters of `best_epoch`.
    """

    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    test_acc: float = float("nan")
    wall_time: float = 0.0
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    def _solves(self) -> list[SolveTelemetry]:
        return [s for epoch in self.epochs for s in epoch.solves]

    @property
    def mean_iters_fwd(self) -> float:
        solves = self._solves()
        if not solves:
            return float("nan")
        return float(np.mean([s.forward_iterations for s in solves]))

    @property
    def mean_iters_bwd(self) -> float:
        counts = [s.backward_iterations for s in self._solves()]
        known = [c for c in counts if c is not None]
        return float(np.mean(known)) if known else float("nan")

    @property
    def converged_fraction(self) -> float:
        solves = self._solves()
        if not solves:
            return float("nan")
        return float(np.mean([s.forward_converged for s in solves]))


@dataclass(frozen=True)
class IterationTrend:
    first_decile_median: float | None
    last_decile_median: float | None
    ratio: float | None
    note: str = ""


@dataclass
class ProtocolSummary:
    runs: list[RunRecord]
    mean_test_acc: float
    std_test_acc: float
    failures: int

    @property
    def succeeded(self) -> list[RunRecord]:
        return [run for run in self.runs if not run.failed]


# -----------------------------------------------------------------------------
# single run


def _telemetry_rows(record: EpochRecord) -> list[dict[str, Any]]:
    base = {
        "epoch": record.epoch,
        "train_loss": record.train_loss,
        "val_loss": record.val_loss,
        "val_acc": record.val_acc,
    }
    if not record.solves:
        return [base]
    return [
        {
            **base,
            "layer": s.layer,
            "head": s.head,
            "forward_iterations": s.forward_iterations,
            "forward_converged": int(s.forward_converged),
            "residual": s.residual,
            "backward_iterations": s.backward_iterations,
            "backward_converged": (
                None if s.backward_converged is None else int(s.backward_converged)
            ),
        }
        for s in record.solves
    ]


def write_epochs_csv(record: RunRecord, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
        writer.writeheader()
        for epoch in record.epochs:
            writer.writerows(_telemetry_rows(epoch))


def train_once(
    cfg: ExperimentConfig,
    seed: int,
    *,
    dataset: Dataset | None = None,
    output_dir: str | Path | None = None,
) -> RunRecord:
    """Train one model on the split drawn from `seed`.

    Each epoch runs a train-mode forward, cross entropy on the train nodes,
    backward and one Adam step, then scores the validation nodes in eval
    mode.  Training stops after `cfg.patience` epochs without a better
    validation accuracy (ties go to the lower validation loss) or at
    `cfg.max_epochs`.  The best parameters are restored before the test nodes
    are scored.

    A GaBP breakdown ends the run early; the returned record carries the
    failure message instead of raising.
    """
    started = time.perf_counter()
    dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
    split = random_split(dataset, seed)
    train_nodes, val_nodes = split.train, split.val
    if train_nodes.size == 0 or val_nodes.size == 0:
        raise ConfigurationError(
            f"split ratios {dataset.split_ratios} leave no train or validation "
            f"nodes on {dataset.node_count} nodes"
        )
    train_mask = np.zeros(dataset.node_count, dtype=bool)
    train_mask[train_nodes] = True
    val_mask = np.zeros(dataset.node_count, dtype=bool)
    val_mask[val_nodes] = True

    model = TopologicAttentionNetwork(
        model_config(cfg, dataset.d_in, dataset.num_classes), seed=seed
    )
    params = model.parameters()
    features, topology, labels = dataset.features, dataset.topology, dataset.labels
    record = RunRecord(seed=seed)
    adam = AdamState()
    best_state = model.state_dict()
    best_acc, best_loss = -np.inf, np.inf
    patience = int(cfg.patience)
    stale = 0

    try:
        for epoch in range(cfg.max_epochs):
            for tensor in params.values():
                tensor.zero_grad()
            with Tape() as tape:
                logits = model.forward(
                    features, topology, "train", seed=seed, epoch=epoch
                )
                loss = ag.row_softmax_cross_entropy(logits, labels, train_mask)
            tape.backward(loss)
            solves = model.telemetry
            grads = {
                name: t.grad for name, t in params.items() if t.grad is not None
            }
            values, adam = adam_step(
                {name: t.values for name, t in params.items()},
                grads,
                adam,
                cfg.learning_rate,
                cfg.weight_decay,
            )
            for name, tensor in params.items():
                tensor.values = values[name]

            eval_logits = model.forward(features, topology, "eval")
            val_loss = ag.row_softmax_cross_entropy(
                eval_logits, labels, val_mask
            ).item()
            val_acc = accuracy(eval_logits, labels, val_nodes)
            record.epochs.append(
                EpochRecord(epoch, loss.item(), val_loss, val_acc, solves)
            )
            if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
                best_acc, best_loss = val_acc, val_loss
                best_state = model.state_dict()
                record.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    logger.debug("seed %d: early stop at epoch %d", seed, epoch)
                    break
    except (NumericBreakdownError, TrainingStepError) as e:
        record.failure = e.message
        record.wall_time = time.perf_counter() - started
        logger.warning(
            "seed %d failed at epoch %d: %s", seed, len(record.epochs), e.message
        )
        if output_dir is not None:
            out = Path(output_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_epochs_csv(record, out / f"epochs_{seed}.csv")
        return record

    model.load_state_dict(best_state)
    test_logits = model.forward(features, topology, "eval")
    record.test_acc = accuracy(test_logits, labels, split.test)
    record.wall_time = time.perf_counter() - started
    logger.info(
        "seed %d: test accuracy %.4f (best epoch %d of %d)",
        seed,
        record.test_acc,
        record.best_epoch,
        record.epochs_run,
    )
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_epochs_csv(record, out / f"epochs_{seed}.csv")
        save_checkpoint(out / f"best_{seed}.tanckpt", best_state)
    return record


# -----------------------------------------------------------------------------
# protocol


def _run_seed(
    raw: dict[str, Any], seed: int, output_dir: str | None
) -> RunRecord:
    return train_once(experiment_from_dict(raw), seed, output_dir=output_dir)


def summarize(runs: Sequence[RunRecord]) -> ProtocolSummary:
    """Mean and sample standard deviation of test accuracy over successful runs."""
    accs = np.array([run.test_acc for run in runs if not run.failed])
    failures = sum(run.failed for run in runs)
    if accs.size == 0:
        mean = std = float("nan")
    else:
        mean = float(accs.mean())
        std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
    return ProtocolSummary(list(runs), mean, std, failures)


def write_summary_csv(summary: ProtocolSummary, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for run in summary.runs:
            writer.writerow(
                [
                    run.seed,
                    run.test_acc,
                    run.epochs_run,
                    run.mean_iters_fwd,
                    run.mean_iters_bwd,
                    run.converged_fraction,
                ]
            )


def run_protocol(
    cfg: ExperimentConfig,
    *,
    output_dir: str | Path | None = None,
    threads: int = 1,
) -> ProtocolSummary:
    """Train every seed in `cfg.seeds` and aggregate the test accuracies.

    Seeds run in up to `threads` worker processes; results are collected in
    seed order.

    Raises
    ------
    ProtocolError
        If more than 20% of the seeds failed (``summary.csv`` is still
        written).
    """
    seeds = list(cfg.seeds)
    if not seeds:
        raise ConfigurationError("seeds must list at least one seed")
    out = None if output_dir is None else str(output_dir)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
    workers = max(1, min(threads, len(seeds)))
    if workers == 1:
        dataset = load_dataset(cfg.dataset)
        runs = [
            train_once(cfg, seed, dataset=dataset, output_dir=out) for seed in seeds
        ]
    else:
        raw = resolved_dict(cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            count = len(seeds)
            runs = list(pool.map(_run_seed, [raw] * count, seeds, [out] * count))

    summary = summarize(runs)
    if out is not None:
        write_summary_csv(summary, Path(out) / "summary.csv")
    logger.info(
        "%d seed(s): test accuracy %.4f +- %.4f, %d failed",
        len(seeds),
        summary.mean_test_acc,
        summary.std_test_acc,
        summary.failures,
    )
    if summary.failures > MAX_FAILURE_FRACTION * len(seeds):
        raise ProtocolError(
            f"{summary.failures} of {len(seeds)} seeds failed "
            f"(more than {MAX_FAILURE_FRACTION:.0%})"
        )
    return summary


def iteration_trend(record: RunRecord) -> IterationTrend:
    """Median forward iterations over the first and last deciles of epochs.

    ``ratio = first / last``; a ratio above 1 means solves got cheaper as
    training progressed.
    """
    series = [epoch.mean_forward_iterations for epoch in record.epochs]
    if len(series) < MIN_TREND_EPOCHS:
        return IterationTrend(
            None, None, None, f"only {len(series)} epochs (< {MIN_TREND_EPOCHS})"
        )
    width = max(1, len(series) // 10)
    first = float(np.median(series[:width]))
    last = float(np.median(series[-width:]))
    ratio = first / last if last > 0 else None
    return IterationTrend(first, last, ratio)
