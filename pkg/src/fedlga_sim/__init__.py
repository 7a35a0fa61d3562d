"""FedLGA Sim - deterministic simulator of system-heterogeneous federated learning."""

import logging
import os

__version__ = "0.1.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | int | None = None) -> None:
    """Send package logs to stderr.

    Args:
        level: Level name or number; defaults to ``FEDLGA_LOG_LEVEL``, then ``INFO``
    """
    if level is None:
        level = os.getenv("FEDLGA_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = level.upper()
    package_logger = logging.getLogger(__name__)
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    package_logger.setLevel(level)
