from __future__ import annotations

import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from topologic_attention.datasets import Dataset, load_dataset
from topologic_attention.graph import (
    GraphTopology,
    SparseSymmetricMatrix,
    build_topology,
)

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"
MATRICES = FIXTURES / "matrices"


@pytest.fixture(autouse=True)
def _reset_package_logger() -> None:
    # the CLI installs a handler and a level on the package logger
    logger = logging.getLogger("topologic_attention")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy() -> Dataset:
    return load_dataset(TOY)


@pytest.fixture
def toy_dir(tmp_path: Path) -> Path:
    target = tmp_path / "toy"
    shutil.copytree(TOY, target)
    return target


@pytest.fixture
def toy_config(tmp_path: Path, toy_dir: Path) -> Path:
    config = tmp_path / "toy.yaml"
    shutil.copy(FIXTURES / "toy.yaml", config)
    return config


@pytest.fixture
def path4() -> GraphTopology:
    return build_topology(4, [(0, 1), (1, 2), (2, 3)])


def random_walk_summable(
    rng: np.random.Generator, n: int, extra: int | None = None
) -> SparseSymmetricMatrix:
    """A random connected graph with a strictly diagonally dominant matrix."""
    tree = [(k, int(rng.integers(0, k))) for k in range(1, n)]
    more = rng.integers(0, n, size=(n if extra is None else extra, 2)).tolist()
    topology = build_topology(n, tree + more)
    off = rng.normal(size=topology.edge_count)
    magnitude = np.abs(off)
    diag = (
        np.bincount(topology.edges[:, 0], magnitude, minlength=n)
        + np.bincount(topology.edges[:, 1], magnitude, minlength=n)
        + rng.uniform(0.2, 1.0, n)
    )
    return SparseSymmetricMatrix(topology, diag, off)
