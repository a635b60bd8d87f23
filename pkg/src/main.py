"""
Logging setup shared by the CLI and the MCP server.
"""

import logging
import sys
from typing import Optional

from src.core.config import settings


def setup_logging(log_level: Optional[str] = None):
    """
    Set up logging configuration.

    Logs go to stderr; stdout carries the JSON results.

    Args:
        log_level: Optional log level to override the default
    """
    level = getattr(logging, (log_level or settings.LOG_LEVEL).upper())

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )
