"""
Entry point for bconv when executed as a module.

Enables running every command with:
    python -m bconv [train|eval|distill|gradcheck|inspect-state] ...
"""

import sys

from .main import main

if __name__ == "__main__":
    sys.exit(main())
