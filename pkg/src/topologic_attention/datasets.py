"""Transductive node-classification datasets stored as a small TSV/JSON directory.

A dataset directory holds::

    meta.json      {"name", "num_classes", "d_in", "node_count", "split_ratios",
                    optional "expected_homophily", optional "features_normalized"}
    edges.tsv      one "i<TAB>j" pair per line
    features.tsv   node_count lines of d_in reals
    labels.tsv     node_count integers
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from ._logging import get_logger
from .exceptions import DatasetError, InputError
from .graph import GraphTopology, build_topology

if TYPE_CHECKING:
    from collections.abc import Iterator

    import numpy.typing as npt

    FloatArray = npt.NDArray[np.float64]
    IntArray = npt.NDArray[np.int64]

logger = get_logger(__name__)

META_FILE = "meta.json"
EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.tsv"
LABELS_FILE = "labels.tsv"
RATIO_TOL = 1e-9

TRAIN, VAL, TEST = 0, 1, 2


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    topology: GraphTopology
    features: FloatArray
    """(N, d_in), rows with unit L1 norm (zero rows stay zero)."""
    labels: IntArray
    num_classes: int
    split_ratios: tuple[float, float, float]
    expected_homophily: float | None = None

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True, eq=False)
class SplitMask:
    """Assignment of every node to train (0), val (1) or test (2)."""

    assignment: npt.NDArray[np.int8]
    seed: int

    def _nodes(self, part: int) -> IntArray:
        return np.flatnonzero(self.assignment == part).astype(np.int64)

    @property
    def train(self) -> IntArray:
        return self._nodes(TRAIN)

    @property
    def val(self) -> IntArray:
        return self._nodes(VAL)

    @property
    def test(self) -> IntArray:
        return self._nodes(TEST)

    def sizes(self) -> tuple[int, int, int]:
        counts = np.bincount(self.assignment, minlength=3)
        return int(counts[0]), int(counts[1]), int(counts[2])


@dataclass(frozen=True)
class DatasetSummary:
    name: str
    nodes: int
    edges: int
    classes: int
    d_in: int
    homophily: float | None
    split_ratios: tuple[float, float, float]


# -----------------------------------------------------------------------------
# loading


def _lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetError(f"cannot read file: {e.strerror}", path=path) from e
    for number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if tokens:
            yield number, tokens


def _read_meta(path: Path) -> dict[str, Any]:
    try:
        meta = json.loads(path.read_text())
    except OSError as e:
        raise DatasetError(f"cannot read file: {e.strerror}", path=path) from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON: {e.msg}", path=path, line=e.lineno) from e
    if not isinstance(meta, dict):
        raise DatasetError("meta.json must hold an object", path=path)
    required = ("name", "num_classes", "d_in", "node_count", "split_ratios")
    missing = [key for key in required if key not in meta]
    if missing:
        raise DatasetError(f"missing keys {missing}", path=path)
    ratios = meta["split_ratios"]
    if (
        not isinstance(ratios, list)
        or len(ratios) != 3
        or any(not isinstance(r, (int, float)) or r < 0 for r in ratios)
        or abs(sum(ratios) - 1.0) > RATIO_TOL
    ):
        raise DatasetError(
            f"split_ratios must be 3 nonnegative numbers summing to 1, got {ratios}",
            path=path,
        )
    for key in ("num_classes", "d_in", "node_count"):
        if not isinstance(meta[key], int) or meta[key] < 1:
            raise DatasetError(f"{key} must be a positive integer", path=path)
    return meta


def _read_edges(path: Path, node_count: int) -> list[tuple[int, int]]:
    pairs = []
    for number, tokens in _lines(path):
        if len(tokens) != 2:
            raise DatasetError("expected 'i<TAB>j'", path=path, line=number)
        try:
            i, j = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise DatasetError(
                f"unreadable node index in {tokens}", path=path, line=number
            ) from None
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise DatasetError(
                f"edge ({i}, {j}) outside [0, {node_count})", path=path, line=number
            )
        pairs.append((i, j))
    return pairs


def _read_features(path: Path, node_count: int, d_in: int) -> FloatArray:
    rows = []
    for number, tokens in _lines(path):
        if len(tokens) != d_in:
            raise DatasetError(
                f"expected {d_in} values, found {len(tokens)}", path=path, line=number
            )
        try:
            row = np.array(tokens, dtype=np.float64)
        except ValueError:
            raise DatasetError(
                "unreadable feature value", path=path, line=number
            ) from None
        if not np.isfinite(row).all():
            raise DatasetError("non-finite feature value", path=path, line=number)
        rows.append(row)
    if len(rows) != node_count:
        raise DatasetError(
            f"expected {node_count} feature rows, found {len(rows)}", path=path
        )
    return np.stack(rows)


def _read_labels(path: Path, node_count: int, num_classes: int) -> IntArray:
    labels = []
    for number, tokens in _lines(path):
        if len(tokens) != 1:
            raise DatasetError("expected one label per line", path=path, line=number)
        try:
            label = int(tokens[0])
        except ValueError:
            raise DatasetError(
                f"unreadable label {tokens[0]!r}", path=path, line=number
            ) from None
        if not 0 <= label < num_classes:
            raise DatasetError(
                f"label {label} outside [0, {num_classes})", path=path, line=number
            )
        labels.append(label)
    if len(labels) != node_count:
        raise DatasetError(
            f"expected {node_count} labels, found {len(labels)}", path=path
        )
    return np.array(labels, dtype=np.int64)


def l1_normalize(features: np.ndarray) -> FloatArray:
    """Divide every row by its L1 norm; all-zero rows are left as zero."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.abs(features).sum(axis=1, keepdims=True)
    return np.divide(features, norms, out=np.zeros_like(features), where=norms > 0)


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory.

    Self loops are dropped and duplicate or reversed edges collapsed.

    Raises
    ------
    DatasetError
        On missing files, count mismatches, unreadable values or labels out of
        range; the message names the file and line.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError("not a dataset directory", path=root)
    meta = _read_meta(root / META_FILE)
    n = meta["node_count"]
    edges = _read_edges(root / EDGES_FILE, n)
    features = _read_features(root / FEATURES_FILE, n, meta["d_in"])
    labels = _read_labels(root / LABELS_FILE, n, meta["num_classes"])
    if not meta.get("features_normalized", False):
        features = l1_normalize(features)
    expected = meta.get("expected_homophily")
    dataset = Dataset(
        name=str(meta["name"]),
        topology=build_topology(n, edges),
        features=features,
        labels=labels,
        num_classes=meta["num_classes"],
        split_ratios=tuple(  # type: ignore[arg-type]
            float(r) for r in meta["split_ratios"]
        ),
        expected_homophily=None if expected is None else float(expected),
    )
    logger.debug(
        "loaded %s: %d nodes, %d edges, %d classes",
        dataset.name,
        n,
        dataset.topology.edge_count,
        dataset.num_classes,
    )
    return dataset


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write `dataset` so that `load_dataset` returns identical arrays."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta: dict[str, Any] = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "d_in": dataset.d_in,
        "node_count": dataset.node_count,
        "split_ratios": list(dataset.split_ratios),
        "features_normalized": True,
    }
    if dataset.expected_homophily is not None:
        meta["expected_homophily"] = dataset.expected_homophily
    (root / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    (root / EDGES_FILE).write_text(
        "".join(f"{i}\t{j}\n" for i, j in dataset.topology.edge_list())
    )
    (root / FEATURES_FILE).write_text(
        "".join(
            "\t".join(repr(v) for v in row) + "\n"
            for row in dataset.features.tolist()
        )
    )
    (root / LABELS_FILE).write_text(
        "".join(f"{label}\n" for label in dataset.labels.tolist())
    )


# -----------------------------------------------------------------------------
# splits and statistics


def random_split(dataset: Dataset, seed: int) -> SplitMask:
    """Slice a seeded uniform permutation of the nodes by the split ratios.

    The first ``round(r_train * N)`` nodes of the permutation train, the next
    ``round(r_val * N)`` validate and the rest test.  Classes are not balanced.
    """
    n = dataset.node_count
    train_ratio, val_ratio, _ = dataset.split_ratios
    n_train = min(round(train_ratio * n), n)
    n_val = min(round(val_ratio * n), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.full(n, TEST, dtype=np.int8)
    assignment[order[:n_train]] = TRAIN
    assignment[order[n_train : n_train + n_val]] = VAL
    return SplitMask(assignment, seed)


def edge_homophily(dataset: Dataset) -> float:
    """Fraction of undirected edges whose endpoints share a label.

    Raises
    ------
    InputError
        If the graph has no edges.
    """
    edges = dataset.topology.edges
    if edges.shape[0] == 0:
        raise InputError(
            f"edge homophily is undefined for edgeless dataset {dataset.name!r}"
        )
    labels = dataset.labels
    return float((labels[edges[:, 0]] == labels[edges[:, 1]]).mean())


def dataset_summary(dataset: Dataset) -> DatasetSummary:
    homophily = edge_homophily(dataset) if dataset.topology.edge_count else None
    return DatasetSummary(
        name=dataset.name,
        nodes=dataset.node_count,
        edges=dataset.topology.edge_count,
        classes=dataset.num_classes,
        d_in=dataset.d_in,
        homophily=homophily,
        split_ratios=dataset.split_ratios,
    )
