"""
Command-line interface for the CoBra pipeline.
"""

from .commands import CobraCLI, app, run

__all__ = ["CobraCLI", "app", "run"]
