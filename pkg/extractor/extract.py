#!/usr/bin/env python3
"""Convenience entry point; equivalent to the installed `partdisc-extract` script."""

import sys

from partdisc_extract.extract import main

if __name__ == "__main__":
    sys.exit(main())
