#!/usr/bin/env python3
"""
Main runner script for the Bregman divergence learner
Forwards to the command-line interface, e.g. ``python run.py train --data iris``
"""

import sys

from dotenv import load_dotenv

load_dotenv()

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
