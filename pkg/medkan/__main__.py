"""``python -m medkan <command>``."""
import sys

from .cli import main

sys.exit(main())
