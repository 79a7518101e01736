#!/usr/bin/env python3
"""Oracle experiment: deterministic power driver, both solvers against the
closed-form comparison solution, full verification suite and plots.

    python scripts/run_power_oracle.py [out_dir]
"""

import sys
from pathlib import Path

from singfbsde.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/power-oracle"
    Path(out).mkdir(parents=True, exist_ok=True)
    sys.exit(main(["run", "--config", "preset:power-oracle", "--out", out]))
