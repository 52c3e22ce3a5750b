"""A small reverse-mode gradient engine over 2-D float64 tensors.

Operations are recorded on the active `Tape` (entered with ``with Tape():``)
whenever one of their inputs requires a gradient.  Outside a tape every op is
a plain numpy computation, which is how evaluation runs.

Broadcasting is limited to size-1 axes of 2-D shapes: a ``(1, c)`` row
(bias/gain) or an ``(n, 1)`` column (per-node or per-edge scalars).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .exceptions import ConfigurationError, InputError, NonFiniteError, TapeError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Sequence

    import numpy.typing as npt

    FloatArray = npt.NDArray[np.float64]
    BackwardFn = Callable[[FloatArray], "Sequence[FloatArray | None]"]

LAYER_NORM_EPS = 1e-5

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


@dataclass(eq=False)
class Tensor:
    """A 2-D value buffer with an optional gradient buffer."""

    values: FloatArray
    requires_grad: bool = False
    name: str = ""
    grad: FloatArray | None = field(default=None, repr=False)
    tape: Tape | None = field(default=None, repr=False)
    tape_id: int | None = None
    """Index of the producing record on `tape`; ``None`` for leaves."""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise InputError(f"tensors are 2-D, got shape {values.shape}")
        self.values = values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __truediv__(self, other: Tensor) -> Tensor:
        return div(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def constant(values: np.ndarray | float, name: str = "") -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), name=name)


def parameter(values: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order; `backward` walks it once in
    reverse and then releases every record.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._consumed = False
        self._token: contextvars.Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        if self._consumed:
            raise TapeError("tape was already consumed by backward()")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def ops(self) -> Iterator[str]:
        return (record.op for record in self._records)

    def _append(self, record: _Record) -> int:
        if self._consumed:
            raise TapeError("cannot record on a tape consumed by backward()")
        self._records.append(record)
        return len(self._records) - 1

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into every leaf's ``grad``."""
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got shape {loss.shape}")
        if loss.tape is not self or loss.tape_id is None:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True
        pending: dict[int, FloatArray] = {loss.tape_id: np.ones((1, 1))}
        records, self._records = self._records, []
        for index in range(len(records) - 1, -1, -1):
            upstream = pending.pop(index, None)
            if upstream is None:
                continue
            record = records[index]
            grads = record.backward(upstream)
            for tensor, grad in zip(record.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.shape)
                if tensor.tape_id is not None and tensor.tape is self:
                    previous = pending.get(tensor.tape_id)
                    pending[tensor.tape_id] = (
                        grad if previous is None else previous + grad
                    )
                else:
                    tensor.grad = (
                        grad.copy() if tensor.grad is None else tensor.grad + grad
                    )
            records[index] = None  # type: ignore[call-overload]


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the tape that recorded `loss`."""
    if loss.tape is None:
        raise TapeError("loss was not recorded on a tape")
    loss.tape.backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record_op(
    op: str,
    values: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap `values` as the output of a differentiable op.

    `backward_fn` maps the upstream gradient (shaped like `values`) to one
    gradient (or ``None``) per input.  Nothing is recorded when no tape is
    active or no input requires a gradient.

    Raises
    ------
    NonFiniteError
        If `values` contains NaN or Inf.
    """
    out = np.asarray(values, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    index = tape._append(_Record(tuple(inputs), backward_fn, op))
    return Tensor(out, requires_grad=True, tape=tape, tape_id=index)


def _unbroadcast(grad: FloatArray, shape: tuple[int, int]) -> FloatArray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    if grad.shape != shape:
        raise TapeError(f"gradient shape {grad.shape} does not match {shape}")
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise InputError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -----------------------------------------------------------------------------
# elementary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise InputError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return record_op(
        "matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g)
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return record_op("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return record_op("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return record_op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return record_op("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def scale(a: Tensor, factor: float) -> Tensor:
    return record_op("scale", a.values * factor, (a,), lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return record_op("add_scalar", a.values + value, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return record_op("exp", out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    if (a.values <= 0).any():
        raise InputError("sqrt: input must be strictly positive")
    out = np.sqrt(a.values)
    return record_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.values)
    return record_op("abs", np.abs(a.values), (a,), lambda g: (g * sign,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slopes = np.where(a.values > 0, 1.0, slope)
    return record_op("leaky_relu", a.values * slopes, (a,), lambda g: (g * slopes,))


def softplus(a: Tensor) -> Tensor:
    x = a.values
    out = np.logaddexp(0.0, x)
    return record_op("softplus", out, (a,), lambda g: (g * expit(x),))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient passes where ``a > floor``."""
    mask = a.values > floor
    return record_op(
        "clip_min", np.where(mask, a.values, floor), (a,), lambda g: (g * mask,)
    )


def clamp_abs(a: Tensor, bound: Tensor) -> Tensor:
    """``sign(a) * min(|a|, bound)`` elementwise, with ``bound >= 0``."""
    _check_broadcast("clamp_abs", a, bound)
    av, bv = a.values, bound.values
    inside = np.abs(av) <= bv
    sign = np.sign(av)
    out = np.where(inside, av, sign * bv)
    return record_op(
        "clamp_abs",
        out,
        (a, bound),
        lambda g: (g * inside, g * np.where(inside, 0.0, sign)),
    )


def row_sum(a: Tensor) -> Tensor:
    """Sum each row into an ``(n, 1)`` column."""
    cols = a.shape[1]
    return record_op(
        "row_sum",
        a.values.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, cols, axis=1),),
    )


def total_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op(
        "total_sum",
        np.array([[a.values.sum()]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]`` (rows may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    rows = a.shape[0]

    def backward(g: FloatArray) -> tuple[FloatArray]:
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, index, g)
        return (out,)

    return record_op("gather_rows", a.values[index], (a,), backward)


def segment_sum(a: Tensor, index: np.ndarray, count: int) -> Tensor:
    """Scatter-add row ``k`` of `a` into output row ``index[k]``.

    Rows accumulate in the order they appear in `a`.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise InputError(f"segment_sum: {index.shape[0]} indices for {a.shape[0]} rows")
    out = np.zeros((count, a.shape[1]))
    np.add.at(out, index, a.values)
    return record_op("segment_sum", out, (a,), lambda g: (g[index],))


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise InputError(f"concat_columns: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g: FloatArray) -> list[FloatArray]:
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return record_op(
        "concat_columns",
        np.concatenate([t.values for t in tensors], axis=1),
        tuple(tensors),
        backward,
    )


def split_columns(a: Tensor, widths: Sequence[int]) -> list[Tensor]:
    if sum(widths) != a.shape[1]:
        raise InputError(
            f"split_columns: widths {list(widths)} do not sum to {a.shape[1]}"
        )
    bounds = np.cumsum([0, *widths])
    pieces = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):

        def backward(g: FloatArray, lo: int = lo, hi: int = hi) -> tuple[FloatArray]:
            full = np.zeros(a.shape)
            full[:, lo:hi] = g
            return (full,)

        pieces.append(record_op("split_columns", a.values[:, lo:hi], (a,), backward))
    return pieces


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then ``* gain + bias``."""
    width = a.shape[1]
    if gain.shape != (1, width) or bias.shape != (1, width):
        raise InputError(
            f"layer_norm: gain/bias must be (1, {width}), "
            f"got {gain.shape}, {bias.shape}"
        )
    centered = a.values - a.values.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + LAYER_NORM_EPS)
    normalized = centered * inv_std
    gv = gain.values

    def backward(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        gn = g * gv
        dx = inv_std * (
            gn
            - gn.mean(axis=1, keepdims=True)
            - normalized * (gn * normalized).mean(axis=1, keepdims=True)
        )
        d_gain = (g * normalized).sum(axis=0, keepdims=True)
        return dx, d_gain, g.sum(axis=0, keepdims=True)

    return record_op(
        "layer_norm", normalized * gv + bias.values, (a, gain, bias), backward
    )


def dropout(
    a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout; identity at eval time or when ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return a
    if rng is None:
        raise ConfigurationError("dropout at train time needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return record_op("dropout", a.values * mask, (a,), lambda g: (g * mask,))


def row_softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Mean cross entropy over the rows selected by `mask`."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    n, classes = logits.shape
    if labels.shape != (n,):
        raise InputError(f"cross entropy: {labels.shape[0]} labels for {n} rows")
    if rows.size == 0:
        raise InputError("cross entropy: mask selects no rows")
    if (labels[rows] < 0).any() or (labels[rows] >= classes).any():
        raise InputError("cross entropy: label out of range")
    selected = logits.values[rows]
    target = labels[rows]
    loss = float(
        np.mean(logsumexp(selected, axis=1) - selected[np.arange(rows.size), target])
    )

    def backward(g: FloatArray) -> tuple[FloatArray]:
        probs = softmax(selected, axis=1)
        probs[np.arange(rows.size), target] -= 1.0
        full = np.zeros((n, classes))
        full[rows] = probs * (g[0, 0] / rows.size)
        return (full,)

    return record_op("cross_entropy", np.array([[loss]]), (logits,), backward)


# -----------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_relative_error: float
    passed: bool


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> list[GradCheckResult]:
    """Compare recorded gradients of a scalar `fn` with central differences.

    `fn` is re-evaluated with every entry of every input perturbed by
    ``+-step``; it must be deterministic.  The relative error of an input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|, atol)``.
    """
    for tensor in inputs:
        tensor.zero_grad()
    with Tape():
        loss = fn()
    backward(loss)
    results = []
    for k, tensor in enumerate(inputs):
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad
        numeric = np.zeros(tensor.shape)
        tensor.values = np.ascontiguousarray(tensor.values)
        flat = tensor.values.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = fn().item()
            flat[idx] = original - step
            minus = fn().item()
            flat[idx] = original
            numeric.reshape(-1)[idx] = (plus - minus) / (2 * step)
        denom = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), atol)
        error = float(np.abs(analytic - numeric).max()) / denom
        results.append(
            GradCheckResult(tensor.name or f"input{k}", error, error <= rtol)
        )
    return results
