"""Plain-text exchange formats for precision matrices and dense columns.

Matrix files::

    # comments are ignored
    n m
    i j value      (m off-diagonal lines, i < j)
    i value        (n diagonal lines)

Dense files hold one whitespace-separated row per node.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .exceptions import InputError
from .graph import SparseSymmetricMatrix, build_topology

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

    import numpy.typing as npt


def _content_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    """Yield (line number, tokens) for every non-empty, non-comment line."""
    try:
        text = path.read_text()
    except OSError as e:
        raise InputError(f"cannot read file: {e.strerror}", path=path) from e
    for number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if tokens:
            yield number, tokens


def _parse(kind: type, token: str, path: Path, line: int) -> float | int:
    try:
        return kind(token)  # type: ignore[no-any-return]
    except ValueError:
        raise InputError(
            f"expected {kind.__name__}, got {token!r}", path=path, line=line
        ) from None


def read_matrix(path: str | Path) -> SparseSymmetricMatrix:
    """Read a matrix in the ``n m / i j value / i value`` format."""
    path = Path(path)
    lines = _content_lines(path)
    try:
        number, header = next(lines)
    except StopIteration:
        raise InputError("empty matrix file", path=path) from None
    if len(header) != 2:
        raise InputError("header must be 'n m'", path=path, line=number)
    n = int(_parse(int, header[0], path, number))
    m = int(_parse(int, header[1], path, number))
    if n < 1 or m < 0:
        raise InputError(f"invalid sizes n={n}, m={m}", path=path, line=number)

    pairs: list[tuple[int, int]] = []
    values: dict[tuple[int, int], float] = {}
    for _ in range(m):
        try:
            number, tokens = next(lines)
        except StopIteration:
            raise InputError(
                f"expected {m} off-diagonal lines, found {len(pairs)}", path=path
            ) from None
        if len(tokens) != 3:
            raise InputError(
                "off-diagonal line must be 'i j value'", path=path, line=number
            )
        i = int(_parse(int, tokens[0], path, number))
        j = int(_parse(int, tokens[1], path, number))
        value = float(_parse(float, tokens[2], path, number))
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise InputError(
                f"invalid off-diagonal index ({i}, {j})", path=path, line=number
            )
        key = (min(i, j), max(i, j))
        if key in values:
            raise InputError(f"duplicate entry for edge {key}", path=path, line=number)
        values[key] = value
        pairs.append(key)

    diagonal = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    for _ in range(n):
        try:
            number, tokens = next(lines)
        except StopIteration:
            raise InputError(f"expected {n} diagonal lines", path=path) from None
        if len(tokens) != 2:
            raise InputError("diagonal line must be 'i value'", path=path, line=number)
        i = int(_parse(int, tokens[0], path, number))
        if not 0 <= i < n or seen[i]:
            raise InputError(
                f"invalid or repeated diagonal index {i}", path=path, line=number
            )
        diagonal[i] = float(_parse(float, tokens[1], path, number))
        seen[i] = True
    for number, _tokens in lines:
        raise InputError("unexpected trailing content", path=path, line=number)
    if not np.isfinite(diagonal).all():
        i = int(np.flatnonzero(~np.isfinite(diagonal))[0])
        raise InputError(f"non-finite diagonal entry for node {i}", path=path)
    bad = [key for key in pairs if not np.isfinite(values[key])]
    if bad:
        raise InputError(f"non-finite off-diagonal entry for edge {bad[0]}", path=path)

    topology = build_topology(n, pairs)
    off = np.array([values[pair] for pair in topology.edge_list()], dtype=np.float64)
    return SparseSymmetricMatrix(topology, diagonal, off)


def write_matrix(path: str | Path, matrix: SparseSymmetricMatrix) -> None:
    """Write `matrix` in the format read by `read_matrix`."""
    topology = matrix.topology
    out = [f"{topology.node_count} {topology.edge_count}"]
    out.extend(
        f"{i} {j} {value!r}"
        for (i, j), value in zip(topology.edge_list(), matrix.off_diagonal.tolist())
    )
    out.extend(f"{i} {value!r}" for i, value in enumerate(matrix.diagonal.tolist()))
    Path(path).write_text("\n".join(out) + "\n")


def read_dense(path: str | Path, rows: int | None = None) -> npt.NDArray[np.float64]:
    """Read a whitespace-separated real matrix (one row per line)."""
    path = Path(path)
    data: list[list[float]] = []
    width: int | None = None
    for number, tokens in _content_lines(path):
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise InputError(
                f"expected {width} columns, found {len(tokens)}", path=path, line=number
            )
        data.append([float(_parse(float, t, path, number)) for t in tokens])
    if not data:
        raise InputError("no rows found", path=path)
    if rows is not None and len(data) != rows:
        raise InputError(f"expected {rows} rows, found {len(data)}", path=path)
    return np.array(data, dtype=np.float64)


def write_dense(
    path: str | Path, array: np.ndarray, header: Sequence[str] = ()
) -> None:
    """Write a 2-D array with optional ``# ``-prefixed header lines."""
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    out = [f"# {line}" for line in header]
    out.extend(" ".join(repr(v) for v in row) for row in array.tolist())
    Path(path).write_text("\n".join(out) + "\n")
