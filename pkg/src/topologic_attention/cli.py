"""The ``tan`` command line.

Exit codes: 0 success, 1 invariant or numeric failure, 2 input error,
3 non-convergence (``solve`` only).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Any

import click

from . import __version__
from .analysis import export_correlation
from .builders import Construction
from .checkpoint import load_checkpoint
from .config import load_experiment, model_config, solver_config, write_resolved
from .datasets import dataset_summary, load_dataset
from .exceptions import InvariantError
from .formats import read_dense, read_matrix, write_dense
from .model import TopologicAttentionNetwork
from .solver import SolverConfig, gabp_solve, residual
from .training import (
    iteration_trend,
    run_protocol,
    summarize,
    train_once,
    write_summary_csv,
)
from .verify import SUITES, format_report, run_suites, write_report

if TYPE_CHECKING:
    from collections.abc import Callable

    F = Callable[..., Any]

PACKAGE_LOGGER = "topologic_attention"
HOMOPHILY_TOLERANCE = 0.01
EXIT_NOT_CONVERGED = 3


class ClickEchoHandler(logging.Handler):
    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:  # pragma: no cover
            self.handleError(record)


def _configure_logging(verbose: int, quiet: bool) -> None:
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        if isinstance(handler, ClickEchoHandler):
            logger.removeHandler(handler)
    handler = ClickEchoHandler()
    handler.setFormatter(logging.Formatter("%(levelname)-7s -  %(message)s"))
    logger.addHandler(handler)
    if quiet:
        level = logging.ERROR
    elif verbose > 1:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logger.setLevel(level)


def solver_options(f: F) -> F:
    f = click.option(
        "--damping",
        type=float,
        help=(
            "Weight kept on the previous message: m <- d*m + (1-d)*m_new. "
            "0 is undamped; a weight w on the new message is d = 1-w."
        ),
    )(f)
    f = click.option("--max-iter", type=int, help="Iteration cap per solve.")(f)
    f = click.option(
        "--tol", type=float, help="Stop when messages change by <= tol."
    )(f)
    return f


def experiment_options(f: F) -> F:
    f = solver_options(f)
    f = click.option(
        "--learned/--fixed", default=None, help="Learned or fixed precision matrices."
    )(f)
    f = click.option(
        "--construction",
        type=click.Choice([c.value for c in Construction]),
        help="Precision matrix construction.",
    )(f)
    f = click.option("--seed", type=int, multiple=True, help="Seed(s); repeatable.")(f)
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        required=True,
        help="Experiment config (YAML or JSON).",
    )(f)
    return f


def _overrides(
    seed: tuple[int, ...],
    construction: str | None,
    learned: bool | None,
    tol: float | None,
    max_iter: int | None,
    damping: float | None,
) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if seed:
        out["seeds"] = list(seed)
    if construction is not None:
        out["construction"] = construction
    if learned is not None:
        out["learned"] = learned
    solver = {
        key: value
        for key, value in (("tol", tol), ("max_iter", max_iter), ("damping", damping))
        if value is not None
    }
    if solver:
        out["solver"] = solver
    return out


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, "-V", "--version")
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
@click.option("-q", "--quiet", is_flag=True, help="Only log errors.")
def cli(verbose: int, quiet: bool) -> None:
    """Topologic attention networks: GaBP solver, training and diagnostics."""
    _configure_logging(verbose, quiet)


@cli.command()
@click.argument("matrix_file", type=click.Path(path_type=Path))
@click.argument("h_file", type=click.Path(path_type=Path))
@click.option(
    "-o",
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Where to write mu.",
)
@solver_options
def solve(
    matrix_file: Path,
    h_file: Path,
    out: Path,
    tol: float | None,
    max_iter: int | None,
    damping: float | None,
) -> None:
    """Solve J mu = h by GaBP (exit 3 if it does not converge)."""
    matrix = read_matrix(matrix_file)
    h = read_dense(h_file, rows=matrix.node_count)
    defaults = SolverConfig()
    cfg = SolverConfig(
        tol=defaults.tol if tol is None else tol,
        max_iter=defaults.max_iter if max_iter is None else max_iter,
        damping=defaults.damping if damping is None else damping,
    )
    result = gabp_solve(matrix, h, cfg)
    res = residual(matrix, result.mu, h)
    write_dense(
        out,
        result.mu,
        header=(
            f"iterations {result.iterations}",
            f"converged {str(result.converged).lower()}",
            f"residual {res!r}",
        ),
    )
    click.echo(
        f"iterations={result.iterations} converged={result.converged} "
        f"residual={res:.3g} -> {out}"
    )
    if not result.converged:
        raise click.exceptions.Exit(EXIT_NOT_CONVERGED)


@cli.command()
@click.option(
    "--suite",
    "suites",
    type=click.Choice(SUITES),
    multiple=True,
    help="Suite(s) to run; default all.",
)
@click.option("--quick", is_flag=True, help="Reduced sizes.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--report",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Also write the results as CSV.",
)
def verify(
    suites: tuple[str, ...], quick: bool, seed: int, report: Path | None
) -> None:
    """Run the invariant suites (exit 1 on any violation)."""
    results = run_suites(suites or SUITES, quick=quick, seed=seed)
    click.echo(format_report(results))
    if report is not None:
        write_report(results, report)
    failed = sorted({r.invariant for r in results if not r.passed})
    if failed:
        raise InvariantError(f"violated invariant(s): {'; '.join(failed)}")


@cli.command()
@experiment_options
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Output directory.",
)
def train(
    config_path: Path,
    seed: tuple[int, ...],
    construction: str | None,
    learned: bool | None,
    tol: float | None,
    max_iter: int | None,
    damping: float | None,
    out: Path,
) -> None:
    """Train one seed (the first configured seed unless --seed is given)."""
    cfg = load_experiment(
        config_path, _overrides(seed, construction, learned, tol, max_iter, damping)
    )
    write_resolved(cfg, out)
    record = train_once(cfg, cfg.seeds[0], output_dir=out)
    summary = summarize([record])
    write_summary_csv(summary, out / "summary.csv")
    if record.failed:
        click.echo(f"seed {record.seed} failed: {record.failure}")
        raise click.exceptions.Exit(1)
    click.echo(
        f"seed {record.seed}: test accuracy {record.test_acc:.4f} "
        f"after {record.epochs_run} epochs (best {record.best_epoch})"
    )
    trend = iteration_trend(record)
    if trend.ratio is None:
        click.echo(f"iteration trend: {trend.note or 'undefined'}")
    else:
        click.echo(
            f"iteration trend: first-decile median {trend.first_decile_median:.1f}, "
            f"last-decile median {trend.last_decile_median:.1f}, "
            f"ratio {trend.ratio:.2f}"
        )


@cli.command()
@experiment_options
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Output directory.",
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    envvar="TAN_THREADS",
    default=1,
    show_default=True,
    help="Worker processes for seeds.",
)
def sweep(
    config_path: Path,
    seed: tuple[int, ...],
    construction: str | None,
    learned: bool | None,
    tol: float | None,
    max_iter: int | None,
    damping: float | None,
    out: Path,
    threads: int,
) -> None:
    """Train every configured seed and summarize test accuracy."""
    cfg = load_experiment(
        config_path, _overrides(seed, construction, learned, tol, max_iter, damping)
    )
    write_resolved(cfg, out)
    summary = run_protocol(cfg, output_dir=out, threads=threads)
    click.echo(
        f"{len(summary.runs)} seed(s): test accuracy "
        f"{100 * summary.mean_test_acc:.1f} +- {100 * summary.std_test_acc:.1f} "
        f"({summary.failures} failed) -> {out / 'summary.csv'}"
    )


@cli.command()
@experiment_options
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
)
@click.option("--layer", type=int, default=0, show_default=True)
@click.option("--head", type=int, default=0, show_default=True)
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Output directory for the CSV files.",
)
def analyze(
    config_path: Path,
    seed: tuple[int, ...],
    construction: str | None,
    learned: bool | None,
    tol: float | None,
    max_iter: int | None,
    damping: float | None,
    checkpoint: Path,
    layer: int,
    head: int,
    out: Path,
) -> None:
    """Export the correlation structure of one head's precision matrix."""
    cfg = load_experiment(
        config_path, _overrides(seed, construction, learned, tol, max_iter, damping)
    )
    dataset = load_dataset(cfg.dataset)
    model = TopologicAttentionNetwork(
        model_config(cfg, dataset.d_in, dataset.num_classes)
    )
    model.load_state_dict(load_checkpoint(checkpoint))
    build = model.precision_for(dataset.features, dataset.topology, layer, head)
    write_resolved(cfg, out)
    result = export_correlation(build.matrix, out, solver_config(cfg))
    click.echo(
        f"layer {layer} head {head}: {dataset.node_count} nodes, "
        f"max iterations {result.max_iterations}, "
        f"converged {result.all_converged} -> {out}"
    )


@cli.command("convert-check")
@click.argument("dataset_dir", type=click.Path(path_type=Path))
def convert_check(dataset_dir: Path) -> None:
    """Validate a converted dataset directory and print its statistics."""
    dataset = load_dataset(dataset_dir)
    summary = dataset_summary(dataset)
    homophily = "n/a" if summary.homophily is None else f"{summary.homophily:.4f}"
    click.echo(
        f"{summary.name}: {summary.nodes} nodes, {summary.edges} edges, "
        f"{summary.classes} classes, d_in={summary.d_in}, homophily={homophily}, "
        f"split_ratios={list(summary.split_ratios)}"
    )
    expected = dataset.expected_homophily
    if expected is not None:
        if summary.homophily is None:
            raise InvariantError("expected_homophily is set but the graph has no edges")
        if abs(summary.homophily - expected) > HOMOPHILY_TOLERANCE:
            raise InvariantError(
                f"homophily {summary.homophily:.4f} differs from the expected "
                f"{expected:.4f} by more than {HOMOPHILY_TOLERANCE}"
            )
