#!/usr/bin/env python3
"""
Convenience script to run the partparse command line from the root directory.

    python run_partparse.py synth --config configs/synth_default.json --out data/synth
    python run_partparse.py train --config configs/default.json --deterministic
"""

import os
import sys

# Make the `src` package importable
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli.main import main

if __name__ == "__main__":
    main()
