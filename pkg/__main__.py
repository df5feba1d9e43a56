#!/usr/bin/env python3
"""
Launcher for the multiloc command-line interface
Run with: python __main__.py <command> [options]
"""

import sys

from src.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
