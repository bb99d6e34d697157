"""Logging setup used by the command-line entry point."""
import logging
import os

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def resolve_log_level(level: str = "INFO") -> int:
    """Numeric level for ``level``; DEBUG=true in the environment wins over it.

    Unknown names fall back to INFO.
    """
    if os.getenv("DEBUG", "false").lower() == "true":
        return logging.DEBUG
    return getattr(logging, level.upper(), logging.INFO)


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging once.

    ``level`` normally comes from ``settings.log_level`` (RLCM_LOG_LEVEL).
    Setting DEBUG=true in the environment overrides it with DEBUG.
    """
    logging.basicConfig(level=resolve_log_level(level), format=LOG_FORMAT)
