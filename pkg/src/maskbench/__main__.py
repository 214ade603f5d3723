"""Run the command-line interface with ``python -m maskbench``."""

import sys

from .cli import main

sys.exit(main())
