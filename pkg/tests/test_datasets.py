from __future__ import annotations

import json
from typing import TYPE_CHECKING

import numpy as np
import pytest

from topologic_attention.datasets import (
    Dataset,
    dataset_summary,
    edge_homophily,
    l1_normalize,
    load_dataset,
    random_split,
    save_dataset,
)
from topologic_attention.exceptions import DatasetError, InputError
from topologic_attention.graph import build_topology

if TYPE_CHECKING:
    from pathlib import Path


def make_dataset(
    labels: list[int],
    edges: list[tuple[int, int]],
    ratios: tuple[float, float, float] = (0.5, 0.25, 0.25),
) -> Dataset:
    n = len(labels)
    return Dataset(
        name="made",
        topology=build_topology(n, edges),
        features=np.eye(n),
        labels=np.array(labels, dtype=np.int64),
        num_classes=max(labels) + 1,
        split_ratios=ratios,
    )


def test_load_toy(toy: Dataset) -> None:
    assert toy.name == "toy"
    assert toy.node_count == 10
    assert toy.d_in == 4
    assert toy.num_classes == 2
    # duplicate "1 0" and self loop "3 3" are dropped
    assert toy.topology.edge_count == 11
    assert toy.split_ratios == (0.6, 0.2, 0.2)
    assert toy.expected_homophily == pytest.approx(0.9091)
    assert toy.labels.tolist() == [0] * 5 + [1] * 5


def test_features_are_l1_normalized(toy: Dataset) -> None:
    np.testing.assert_allclose(np.abs(toy.features).sum(axis=1), 1.0)
    np.testing.assert_allclose(toy.features[0], np.array([1.0, 0.0, 0.5, 0.1]) / 1.6)


def test_l1_normalize_keeps_zero_rows() -> None:
    out = l1_normalize(np.array([[0.0, 0.0], [1.0, -3.0]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0], [0.25, -0.75]])


def test_duplicate_and_reversed_edges(toy_dir: Path) -> None:
    clean = load_dataset(toy_dir)
    edges = toy_dir / "edges.tsv"
    edges.write_text(edges.read_text() + "5\t4\n0\t4\n0\t4\n")
    assert load_dataset(toy_dir).topology == clean.topology


def test_two_node_directory(tmp_path: Path) -> None:
    meta = {
        "name": "pair",
        "num_classes": 2,
        "d_in": 3,
        "node_count": 2,
        "split_ratios": [0.5, 0.5, 0.0],
    }
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    (tmp_path / "edges.tsv").write_text("0\t1\n")
    (tmp_path / "features.tsv").write_text("1\t2\t3\n0\t0\t0\n")
    (tmp_path / "labels.tsv").write_text("0\n1\n")
    dataset = load_dataset(tmp_path)
    assert dataset.topology.edge_count == 1
    assert dataset.features.shape == (2, 3)
    np.testing.assert_array_equal(dataset.features[1], [0.0, 0.0, 0.0])


@pytest.mark.parametrize(
    ("filename", "content", "message"),
    [
        (
            "labels.tsv",
            "0\n0\n0\n0\n0\n1\n1\n2\n1\n1\n",
            r"labels.tsv:8: label 2 outside",
        ),
        ("labels.tsv", "0\n0\n", "expected 10 labels, found 2"),
        ("labels.tsv", "0\nzero\n", r"labels.tsv:2: unreadable label 'zero'"),
        ("edges.tsv", "0\t1\n1\t12\n", r"edges.tsv:2: edge \(1, 12\) outside"),
        ("edges.tsv", "0\t1\t2\n", r"edges.tsv:1: expected"),
        ("features.tsv", "1\t2\t3\n", r"features.tsv:1: expected 4 values, found 3"),
        ("features.tsv", "1\t2\tnan\t3\n", r"features.tsv:1: non-finite"),
        ("meta.json", "{", "invalid JSON"),
        ("meta.json", '{"name": "x"}', "missing keys"),
    ],
)
def test_load_errors(toy_dir: Path, filename: str, content: str, message: str) -> None:
    (toy_dir / filename).write_text(content)
    with pytest.raises(DatasetError, match=message) as info:
        load_dataset(toy_dir)
    assert info.value.exit_code == 2


def test_split_ratios_must_sum_to_one(toy_dir: Path) -> None:
    meta = json.loads((toy_dir / "meta.json").read_text())
    meta["split_ratios"] = [0.6, 0.2, 0.3]
    (toy_dir / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="summing to 1"):
        load_dataset(toy_dir)


def test_missing_directory(tmp_path: Path) -> None:
    with pytest.raises(DatasetError, match="not a dataset directory"):
        load_dataset(tmp_path / "nope")


def test_missing_file(toy_dir: Path) -> None:
    (toy_dir / "labels.tsv").unlink()
    with pytest.raises(DatasetError, match="cannot read file"):
        load_dataset(toy_dir)


def test_round_trip(toy: Dataset, tmp_path: Path) -> None:
    save_dataset(toy, tmp_path / "copy")
    again = load_dataset(tmp_path / "copy")
    assert again.topology == toy.topology
    np.testing.assert_array_equal(again.features, toy.features)
    np.testing.assert_array_equal(again.labels, toy.labels)
    assert again.split_ratios == toy.split_ratios
    assert again.expected_homophily == toy.expected_homophily


def test_split_sizes() -> None:
    dataset = make_dataset([0, 1] * 4, [(0, 1)])
    split = random_split(dataset, seed=0)
    assert split.sizes() == (4, 2, 2)
    assert len(split.train) == 4


def test_split_of_toy(toy: Dataset) -> None:
    assert random_split(toy, 3).sizes() == (6, 2, 2)


def test_split_is_deterministic_and_partitions(toy: Dataset) -> None:
    for seed in range(20):
        a, b = random_split(toy, seed), random_split(toy, seed)
        np.testing.assert_array_equal(a.assignment, b.assignment)
        together = np.sort(np.concatenate([a.train, a.val, a.test]))
        np.testing.assert_array_equal(together, np.arange(10))
    assert not np.array_equal(
        random_split(toy, 0).assignment, random_split(toy, 1).assignment
    )


def test_split_is_not_stratified() -> None:
    dataset = make_dataset([0] * 10 + [1] * 10, [(0, 1)])
    imbalance = [
        abs(dataset.labels[random_split(dataset, seed).train].mean() - 0.5)
        for seed in range(1000)
    ]
    assert max(imbalance) >= 0.1


def test_edge_homophily(toy: Dataset) -> None:
    assert edge_homophily(toy) == pytest.approx(10 / 11)


def test_homophily_all_same_label() -> None:
    dataset = make_dataset([1, 1, 1], [(0, 1), (1, 2)])
    assert edge_homophily(dataset) == 1.0


def test_homophily_invariant_under_relabeling(
    toy: Dataset, rng: np.random.Generator
) -> None:
    perm = rng.permutation(10)
    new_id = np.empty(10, dtype=np.int64)
    new_id[perm] = np.arange(10)
    relabeled = Dataset(
        name="toy",
        topology=build_topology(10, new_id[toy.topology.edges].tolist()),
        features=toy.features[perm],
        labels=toy.labels[perm],
        num_classes=2,
        split_ratios=toy.split_ratios,
    )
    assert edge_homophily(relabeled) == edge_homophily(toy)


def test_homophily_needs_edges() -> None:
    with pytest.raises(InputError, match="edgeless"):
        edge_homophily(make_dataset([0, 1], []))


def test_summary(toy: Dataset) -> None:
    summary = dataset_summary(toy)
    assert (summary.nodes, summary.edges, summary.classes, summary.d_in) == (
        10,
        11,
        2,
        4,
    )
    assert summary.homophily == pytest.approx(10 / 11)
    assert dataset_summary(make_dataset([0, 1], [])).homophily is None
