"""Error hierarchy.

Every error derives from `click.ClickException` (the same arrangement mkdocs
uses for its own exceptions), so the CLI maps each failure to its exit code
without a translation table: 1 invariant / numeric failure, 2 input error.
Non-convergence is reported through result flags, never raised.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

from click import ClickException

if TYPE_CHECKING:
    from pathlib import Path


class TanError(ClickException):
    """Base class for all errors raised by topologic_attention."""

    exit_code = 1


class InputError(TanError):
    """Malformed or out-of-range input (files, indices, shapes, values)."""

    exit_code = 2

    def __init__(
        self, message: str, *, path: str | Path | None = None, line: int | None = None
    ) -> None:
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class DomainError(InputError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigurationError(InputError):
    """Invalid option values or an inconsistent combination of options."""


class DatasetError(InputError):
    """A dataset directory could not be loaded."""


class NumericBreakdownError(TanError):
    """GaBP produced a nonpositive cavity precision (non-walk-summable input)."""

    def __init__(
        self, message: str, *, iteration: int, edge: tuple[int, int], value: float
    ) -> None:
        self.iteration = iteration
        self.edge = edge
        self.value = value
        super().__init__(message)

    def annotate(self, context: str) -> NumericBreakdownError:
        """Return a copy whose message is prefixed with `context`."""
        return NumericBreakdownError(
            f"{context}: {self.message}",
            iteration=self.iteration,
            edge=self.edge,
            value=self.value,
        )


class NonFiniteError(TanError):
    """A tensor operation produced NaN or Inf."""


class TapeError(TanError):
    """The gradient tape was used incorrectly."""


class TrainingStepError(TanError):
    """The backward (implicit) solve failed during a training step."""


class InvariantError(TanError):
    """A verification suite found a violated invariant."""


class ProtocolError(TanError):
    """Too many seeds of a multi-seed protocol failed."""
