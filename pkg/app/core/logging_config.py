import logging
import sys

import structlog

# Basic configuration
LOGGING_LEVEL = logging.INFO
LOGGING_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_configured = False


def configure_logging(level: str = "INFO", json_logs: bool = False) -> None:
    """
    Configures stdlib logging and structlog on top of it.

    Args:
        level: Log level name (e.g. "INFO", "DEBUG").
        json_logs: Render events as JSON lines instead of the console format.
    """
    global _configured
    numeric_level = logging.getLevelName(level.upper())
    if not isinstance(numeric_level, int):
        numeric_level = LOGGING_LEVEL

    root = logging.getLogger() # Get root logger
    root.setLevel(numeric_level)

    # Check if handler already exists to prevent duplicates during reconfiguration
    if not any(getattr(h, "_glc_handler", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(LOGGING_FORMAT))
        handler._glc_handler = True
        root.addHandler(handler)
    for h in root.handlers:
        if getattr(h, "_glc_handler", False):
            h.setLevel(numeric_level)

    renderer = structlog.processors.JSONRenderer() if json_logs else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )
    _configured = True


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    """Convenience function to get a logger instance."""
    if not _configured:
        configure_logging(logging.getLevelName(LOGGING_LEVEL))
    return structlog.get_logger(name)
