"""
Main entry point for running the s2ap package.
This allows the package to be run with 'python -m src'.
"""

import sys

from src.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
