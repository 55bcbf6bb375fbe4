"""
Logging setup shared by the CLI and the job service.
"""
import logging
import sys
from typing import Literal, Optional

import torch

from app.core.config import settings

LOG_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)s | %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_handler: Optional[logging.Handler] = None


class ConsoleHandler(logging.StreamHandler):
    """StreamHandler that resolves sys.stdout or sys.stderr on every record."""

    def __init__(self, target: Literal["stdout", "stderr"] = "stdout"):
        self.target = target
        super().__init__()

    @property
    def stream(self):
        return getattr(sys, self.target)

    @stream.setter
    def stream(self, value):
        pass


def setup_logging(level: Optional[str] = None, stream: Literal["stdout", "stderr"] = "stdout") -> None:
    """
    Configure root logging and quiet chatty libraries.

    Replaces the handler installed by an earlier call, so the level and
    stream of the latest call win. The service logs to stdout;
    the CLI passes "stderr" so stdout carries only its result line.
    """
    global _handler
    root = logging.getLogger()
    if _handler is not None:
        root.removeHandler(_handler)
    _handler = ConsoleHandler(stream)
    _handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    root.addHandler(_handler)
    root.setLevel((level or settings.LOG_LEVEL).upper())

    # Set specific loggers
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("httpcore").setLevel(logging.WARNING)
    logging.getLogger("urllib3").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def setup_torch() -> None:
    """Apply the thread count and determinism switches from settings."""
    torch.set_num_threads(max(1, settings.TORCH_NUM_THREADS))
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True)
