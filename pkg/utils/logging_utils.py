import logging
import os
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = "run.log"


def resolve_log_level(level: Optional[str] = None) -> int:
    """Level from the argument, else ``SLL_LOG_LEVEL``, else INFO."""
    name = (level or os.environ.get("SLL_LOG_LEVEL") or "INFO").upper()
    value = logging.getLevelName(name)
    if not isinstance(value, int):
        raise ValueError(f"Unknown log level '{name}'")
    return value


def configure_logging(out_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """
    Configure the root logger with a console handler and, when ``out_dir``
    is given, a file handler writing ``<out_dir>/run.log``.
    """
    handlers = [logging.StreamHandler()]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(out_dir, LOG_FILE), encoding="utf-8"))
    logging.basicConfig(level=resolve_log_level(level), format=LOG_FORMAT, handlers=handlers, force=True)
    return logging.getLogger()
