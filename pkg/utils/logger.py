"""
Centralized Logger Configuration
Single logging setup for solver, workflows and scripts
"""
import logging
import sys
from pathlib import Path

import config

LOGS_DIR = Path(__file__).parent.parent / "logs"

# Global flag to prevent multiple configurations
_logging_configured = False


def setup_logging(log_level=None, log_file=None):
    """
    Setup centralized logging configuration for the solver

    Args:
        log_level: Logging level name or number (default: config.LOG_LEVEL)
        log_file: Name of log file under logs/ (default: config.LOG_FILE)
    """
    global _logging_configured

    level = log_level if log_level is not None else config.LOG_LEVEL
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    if config.DEBUG_MODE:
        level = logging.DEBUG

    if _logging_configured:
        # handlers stay; an explicit level (e.g. --log-level) still applies
        if log_level is not None:
            logging.getLogger().setLevel(level)
        return

    # Numerical stack is chatty at DEBUG
    logging.getLogger('numexpr').setLevel(logging.WARNING)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)

    handlers = [logging.StreamHandler(sys.stdout)]
    try:
        LOGS_DIR.mkdir(exist_ok=True)
        handlers.append(logging.FileHandler(LOGS_DIR / (log_file or config.LOG_FILE), mode='a'))
    except OSError:
        # read-only checkouts still get console logging
        pass

    logging.basicConfig(
        level=level,
        format='%(asctime)s | %(levelname)-8s | %(name)-30s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=handlers,
        force=True
    )

    _logging_configured = True


def get_logger(name):
    """Module logger; configures logging on first use"""
    if not _logging_configured:
        setup_logging()

    return logging.getLogger(name)
