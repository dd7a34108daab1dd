import logging
import json
import os
from logging import Formatter, LogRecord, getLogger, StreamHandler
from logging.handlers import RotatingFileHandler
from typing import Optional

from auif.config import settings

_RESERVED = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename', 'module',
    'lineno', 'funcName', 'created', 'msecs', 'relativeCreated', 'thread', 'threadName',
    'processName', 'process', 'getMessage', 'exc_info', 'exc_text', 'stack_info',
    'taskName', 'message', 'asctime',
}


class JsonFormatter(Formatter):
    """Formats log records as a JSON string for structured logging."""

    def format(self, record: LogRecord) -> str:
        log_object = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "message": record.getMessage(),
            "logger_name": record.name,
        }

        if record.exc_info:
            log_object["exception"] = self.formatException(record.exc_info)

        # Fields passed through ``extra=`` carry training/eval metrics
        extra_fields = {k: v for k, v in record.__dict__.items() if k not in _RESERVED}
        if extra_fields:
            log_object["metrics"] = extra_fields

        return json.dumps(log_object, default=str)


def setup_logging(level: Optional[str] = None, log_dir: Optional[str] = None,
                  to_file: Optional[bool] = None) -> None:
    """Initializes and configures the root logger for the toolkit."""
    level = (level or settings.LOG_LEVEL).upper()
    log_dir = log_dir or settings.LOG_DIR
    to_file = settings.LOG_TO_FILE if to_file is None else to_file

    logger = getLogger()
    logger.setLevel(getattr(logging, level, logging.INFO))

    # Clear existing handlers to prevent duplicate logs
    if logger.hasHandlers():
        logger.handlers.clear()

    if to_file:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            filename=os.path.join(log_dir, "auif.log"),
            maxBytes=1024 * 1024 * 5,  # 5 MB
            backupCount=5,
        )
        file_handler.setFormatter(JsonFormatter())
        logger.addHandler(file_handler)

    # Console output goes to stderr; stdout carries command results
    console_handler = StreamHandler()
    console_handler.setFormatter(Formatter("%(asctime)s %(levelname)s: %(message)s"))
    logger.addHandler(console_handler)

    # Suppress noisy third-party loggers
    logging.getLogger("PIL").setLevel("ERROR")
    logging.getLogger("wandb").setLevel("ERROR")
    logging.getLogger("wandb.sdk").setLevel("ERROR")

    logger.debug("Logging system initialized", extra={"component": "logging_setup"})
