#!/usr/bin/env python3
"""Run the ctxlearn command line from a source checkout (same verbs as ``python -m ctxlearn``)."""

import os
import sys

# Add the repository root to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from ctxlearn.harness.cli import main

if __name__ == "__main__":
    sys.exit(main())
