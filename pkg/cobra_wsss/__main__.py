"""
Entry point for running the pipeline as a module.
"""

from .main import main

if __name__ == "__main__":
    main()
