"""
Main entry point for the cobra command.
"""

import sys

from .cli.commands import CobraCLI


def main():
    """Main entry point for the CLI application."""
    sys.exit(CobraCLI.run())


if __name__ == "__main__":
    main()
