"""
Logging setup.
"""
import sys
from pathlib import Path

from loguru import logger

FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}"


def setup_logging(trace_mode: bool = False, log_file: Path | None = None) -> None:
    """Install stderr sink (TRACE in trace mode) and an optional file sink"""
    logger.remove()
    logger.add(sys.stderr, level="TRACE" if trace_mode else "INFO", format=FORMAT)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(log_file, level="DEBUG", format=FORMAT, colorize=False)
