"""
Entry point: ``python main.py <command> [flags]``.

See ``python main.py --help`` for commands and config keys.
"""

import sys

from src.harness.cli import main

if __name__ == "__main__":
    sys.exit(main())
