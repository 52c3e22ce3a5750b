"""Prefixed loggers shared by every module."""

from __future__ import annotations

import logging

from mkdocs.plugins import PrefixedLogger

LOG_PREFIX = "tan"


def get_logger(name: str) -> PrefixedLogger:
    """Return a logger whose messages read ``tan: <message>``."""
    return PrefixedLogger(LOG_PREFIX, logging.getLogger(name))
