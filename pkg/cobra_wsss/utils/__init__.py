"""
Utility modules for console formatting and logging.
"""

from .formatters import Formatters
from .logging import setup_logging

__all__ = ["Formatters", "setup_logging"]
