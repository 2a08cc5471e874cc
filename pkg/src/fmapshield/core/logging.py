import json
import logging
import sys
from datetime import datetime, timezone

from fmapshield.config import settings

_RESERVED = frozenset(
    {
        "name", "msg", "args", "created", "filename", "funcName",
        "levelname", "levelno", "lineno", "module", "msecs",
        "pathname", "process", "processName", "relativeCreated",
        "stack_info", "exc_info", "exc_text", "thread", "threadName",
        "taskName", "message", "asctime",
    }
)

# Stamped on every record by RunContextFilter
_CONTEXT = ("command", "seed")


class RunContextFilter(logging.Filter):
    """Attach the running subcommand and the current master seed to each record."""

    def __init__(self, command: str | None = None) -> None:
        super().__init__()
        self.command = command

    def filter(self, record: logging.LogRecord) -> bool:
        record.command = self.command
        record.seed = settings.seed
        return True


class JSONFormatter(logging.Formatter):
    """One JSON object per line: run context, then the extra= payload."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "time": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
        }
        for key in _CONTEXT:
            entry[key] = getattr(record, key, None)
        entry["message"] = record.getMessage()
        entry.update(
            (key, value)
            for key, value in record.__dict__.items()
            if key not in _RESERVED and key not in _CONTEXT
        )
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


class ExtraFormatter(logging.Formatter):
    """Human-readable format that appends extra= fields as key=value pairs."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        extras = {
            k: v for k, v in record.__dict__.items() if k not in _RESERVED and k not in _CONTEXT
        }
        if extras:
            line += " | " + " ".join(f"{k}={v}" for k, v in extras.items())
        return line


def setup_logging(level: str | None = None, command: str | None = None) -> None:
    """Configure application logging for one CLI invocation."""
    level_name = (level or settings.log_level).upper()
    log_level = getattr(logging, level_name, logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers.clear()

    # stdout carries command results
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(log_level)
    handler.addFilter(RunContextFilter(command))

    if settings.app_env == "production":
        handler.setFormatter(JSONFormatter())
    else:
        handler.setFormatter(
            ExtraFormatter(
                "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )

    root_logger.addHandler(handler)

    logging.getLogger("numexpr").setLevel(logging.WARNING)
