"""Module configuring the root logger for the CLI and the service."""

from __future__ import annotations

import logging

from app.config_loader import get_config, resolve_path


def configure_logging(level: str | None = None, log_file: str | None = None) -> None:
    """Installs the shared format with a stream handler and the configured log file."""
    settings = get_config()["global"]
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    target = log_file or settings.get("log_file")
    if target:
        handlers.append(logging.FileHandler(resolve_path(target)))
    logging.basicConfig(
        level=getattr(logging, (level or settings.get("log_level", "INFO")).upper()),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )
