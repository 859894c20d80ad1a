"""
Logging and output-directory setup shared by all CLI commands.
"""

import logging
from pathlib import Path
from typing import Dict

from rich.logging import RichHandler

LOG_FORMAT = "%(asctime)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_FILE_NAME = "ilro.log"

# Sub-directories created under --out
OUTPUT_SUBDIRS = ("calibration", "sweeps", "locking", "figures", "waves", "logs")

CONSOLE_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def output_dirs(out_dir: Path) -> Dict[str, Path]:
    return {name: out_dir / name for name in OUTPUT_SUBDIRS}


def setup_environment(out_dir: Path) -> Dict[str, Path]:
    """Creates required output directories if they do not exist."""
    dirs = output_dirs(out_dir)
    for directory in dirs.values():
        directory.mkdir(parents=True, exist_ok=True)
    return dirs


def setup_logging(log_file: Path, verbosity: int = 0) -> None:
    """
    Configure the root logger with a file handler and a rich console handler.

    The file always records INFO and above (DEBUG with -vv); the console shows
    WARNING by default, INFO with -v and DEBUG with -vv.
    """
    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    console_level = CONSOLE_LEVELS.get(verbosity, logging.DEBUG)
    file_level = logging.DEBUG if verbosity >= 2 else logging.INFO

    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(file_level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    root_logger.addHandler(file_handler)

    console_handler = RichHandler(level=console_level, show_path=False, rich_tracebacks=False)
    root_logger.addHandler(console_handler)
    root_logger.setLevel(min(console_level, file_level))

    # numba's own debug output is not useful here
    logging.getLogger("numba").setLevel(logging.WARNING)
