#!/usr/bin/env python3
"""Cross-solver validation on the smooth liquidation problem: regression solver
against finite differences at nine interior points, 5% relative tolerance.

    python scripts/run_cross_validation.py [out_dir] [n_paths]
"""

import sys
from pathlib import Path

from singfbsde.bsde import McConfig, monotone_limit
from singfbsde.config import build_spec, load_config
from singfbsde.ipde import SpaceGrid, solve_truncated_ipde
from singfbsde.presets import PRESET_CONFIGS
from singfbsde.reporting import write_dict_csv, write_solution_csv
from singfbsde.verify import TolPolicy, cross_validate


def main(out_dir: str = "runs/cross-validation", n_paths: str = "100000") -> int:
    spec = build_spec(load_config(PRESET_CONFIGS["liquidation-smooth"]))
    points = [(0.0, x) for x in (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0)]

    sol_p = solve_truncated_ipde(spec, 10, SpaceGrid(-6, 6, 400), 1000,
                                 delta_cut=0.5)
    mc = McConfig(n_paths=int(n_paths), n_steps=50, seed=1, delta_cut=0.5)
    sols = [monotone_limit(spec, t, x, [10], 1e-3, mc) for (t, x) in points]
    rep = cross_validate(sols, sol_p, points,
                         TolPolicy(mode="relative", rel_tol=0.05))
    print(rep.render_text())

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_solution_csv(out / "ipde_solution.csv", sol_p)
    write_dict_csv(out / "verification.csv", rep.rows())
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
