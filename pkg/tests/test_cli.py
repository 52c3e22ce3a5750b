from __future__ import annotations

import csv
import json
from typing import TYPE_CHECKING

import numpy as np
import pytest
from click.testing import CliRunner
from conftest import MATRICES

from topologic_attention import __version__, verify
from topologic_attention.cli import cli
from topologic_attention.formats import read_dense
from topologic_attention.graph import SparseSymmetricMatrix

if TYPE_CHECKING:
    from pathlib import Path

    from topologic_attention.graph import GraphTopology


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def test_version(runner: CliRunner) -> None:
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_solve_converges(runner: CliRunner, tmp_path: Path) -> None:
    out = tmp_path / "mu.txt"
    result = runner.invoke(
        cli,
        [
            "solve",
            str(MATRICES / "two_node.txt"),
            str(MATRICES / "two_node_h.txt"),
            "-o",
            str(out),
            "--tol",
            "1e-10",
        ],
    )
    assert result.exit_code == 0, result.output
    assert "converged=True" in result.output
    assert out.read_text().startswith("# iterations ")
    np.testing.assert_allclose(read_dense(out)[:, 0], [1.0, 1.0], atol=1e-8)


def test_solve_not_converged_exits_3(runner: CliRunner, tmp_path: Path) -> None:
    out = tmp_path / "mu.txt"
    result = runner.invoke(
        cli,
        [
            "solve",
            str(MATRICES / "two_node.txt"),
            str(MATRICES / "two_node_h.txt"),
            "-o",
            str(out),
            "--max-iter",
            "1",
        ],
    )
    assert result.exit_code == 3
    # the partial solution is still written
    assert "# converged false" in out.read_text()


def test_solve_malformed_input_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(
        cli,
        [
            "solve",
            str(MATRICES / "malformed.txt"),
            str(MATRICES / "two_node_h.txt"),
            "-o",
            str(tmp_path / "mu.txt"),
        ],
    )
    assert result.exit_code == 2
    assert "malformed.txt:3:" in result.output


def test_solve_bad_damping_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(
        cli,
        [
            "solve",
            str(MATRICES / "diagonal.txt"),
            str(MATRICES / "diagonal_h.txt"),
            "-o",
            str(tmp_path / "mu.txt"),
            "--damping",
            "1.5",
        ],
    )
    assert result.exit_code == 2


def test_solve_help_states_the_damping_convention(runner: CliRunner) -> None:
    result = runner.invoke(cli, ["solve", "--help"])
    assert result.exit_code == 0
    text = " ".join(result.output.split())
    assert "Weight kept on the previous message: m <- d*m + (1-d)*m_new" in text
    assert "0 is undamped" in text


def test_solve_damping_weights_the_previous_message(
    runner: CliRunner, tmp_path: Path
) -> None:
    iterations = {}
    for damping in ("0", "0.9"):
        out = tmp_path / f"mu_{damping}.txt"
        result = runner.invoke(
            cli,
            [
                "solve",
                str(MATRICES / "two_node.txt"),
                str(MATRICES / "two_node_h.txt"),
                "-o",
                str(out),
                "--tol",
                "1e-10",
                "--damping",
                damping,
            ],
        )
        assert result.exit_code == 0, result.output
        header = out.read_text().splitlines()[0]
        iterations[damping] = int(header.split()[-1])
    # undamped GaBP is exact on a tree after a couple of sweeps
    assert iterations["0"] <= 3
    assert iterations["0.9"] > 20


def test_verify_quick_passes(runner: CliRunner, tmp_path: Path) -> None:
    report = tmp_path / "report.csv"
    result = runner.invoke(cli, ["verify", "--quick", "--report", str(report)])
    assert result.exit_code == 0, result.output
    assert " 0 failed" in result.output
    with open(report, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {row["suite"] for row in rows} == set(verify.SUITES)
    assert all(row["passed"] == "True" for row in rows)


def test_verify_violation_exits_1(
    runner: CliRunner, monkeypatch: pytest.MonkeyPatch
) -> None:
    def too_strong(
        rng: np.random.Generator, topology: GraphTopology
    ) -> SparseSymmetricMatrix:
        n = topology.node_count
        return SparseSymmetricMatrix(
            topology, np.ones(n), np.full(topology.edge_count, 1.5)
        )

    monkeypatch.setitem(verify.WALK_SUMMABILITY_BUILDERS, "too_strong", too_strong)
    result = runner.invoke(
        cli, ["verify", "--quick", "--suite", "walk-summability"]
    )
    assert result.exit_code == 1
    assert "FAIL" in result.output
    assert "too_strong output is walk-summable" in result.output


def test_train_then_analyze(
    runner: CliRunner, toy_config: Path, tmp_path: Path
) -> None:
    run = tmp_path / "run"
    result = runner.invoke(
        cli, ["train", "--config", str(toy_config), "-o", str(run), "--seed", "2"]
    )
    assert result.exit_code == 0, result.output
    assert "seed 2: test accuracy" in result.output
    # 30 epochs is above the trend minimum
    assert "ratio" in result.output
    for name in ("resolved_config.yaml", "summary.csv", "epochs_2.csv"):
        assert (run / name).is_file()
    checkpoint = run / "best_2.tanckpt"
    assert checkpoint.is_file()

    corr = tmp_path / "corr"
    result = runner.invoke(
        cli,
        [
            "analyze",
            "--config",
            str(toy_config),
            "--checkpoint",
            str(checkpoint),
            "--layer",
            "1",
            "-o",
            str(corr),
        ],
    )
    assert result.exit_code == 0, result.output
    correlation = np.loadtxt(corr / "correlation.csv", delimiter=",")
    assert correlation.shape == (10, 10)
    np.testing.assert_allclose(np.diag(correlation), 1.0, atol=1e-6)
    assert np.loadtxt(corr / "order.csv", dtype=np.int64).shape == (10,)


def test_train_with_overrides(
    runner: CliRunner, toy_config: Path, tmp_path: Path
) -> None:
    run = tmp_path / "run"
    result = runner.invoke(
        cli,
        [
            "train",
            "--config",
            str(toy_config),
            "-o",
            str(run),
            "--construction",
            "laplacian",
            "--fixed",
            "--damping",
            "0.3",
        ],
    )
    assert result.exit_code == 0, result.output
    resolved = (run / "resolved_config.yaml").read_text()
    assert "construction: laplacian" in resolved
    assert "learned: false" in resolved
    assert "damping: 0.3" in resolved


def test_train_rejects_bad_config(runner: CliRunner, tmp_path: Path) -> None:
    config = tmp_path / "bad.yaml"
    config.write_text("dataset: toy\nhiden: 8\n")
    result = runner.invoke(
        cli, ["train", "--config", str(config), "-o", str(tmp_path / "out")]
    )
    assert result.exit_code == 2
    assert "hiden" in result.output


def test_sweep(runner: CliRunner, toy_config: Path, tmp_path: Path) -> None:
    out = tmp_path / "sweep"
    result = runner.invoke(
        cli,
        [
            "sweep",
            "--config",
            str(toy_config),
            "-o",
            str(out),
            "--seed",
            "0",
            "--seed",
            "1",
        ],
    )
    assert result.exit_code == 0, result.output
    assert "2 seed(s): test accuracy" in result.output
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [row["seed"] for row in rows] == ["0", "1"]


def test_convert_check_reports_statistics(runner: CliRunner, toy_dir: Path) -> None:
    result = runner.invoke(cli, ["convert-check", str(toy_dir)])
    assert result.exit_code == 0, result.output
    assert "toy: 10 nodes, 11 edges, 2 classes, d_in=4" in result.output
    assert "homophily=0.9091" in result.output


def test_convert_check_homophily_mismatch_exits_1(
    runner: CliRunner, toy_dir: Path
) -> None:
    meta_file = toy_dir / "meta.json"
    meta = json.loads(meta_file.read_text())
    meta["expected_homophily"] = 0.5
    meta_file.write_text(json.dumps(meta))
    result = runner.invoke(cli, ["convert-check", str(toy_dir)])
    assert result.exit_code == 1
    assert "differs from the expected" in result.output


def test_convert_check_unreadable_directory_exits_2(
    runner: CliRunner, tmp_path: Path
) -> None:
    result = runner.invoke(cli, ["convert-check", str(tmp_path / "missing")])
    assert result.exit_code == 2
