#!/usr/bin/env python3
"""Blow-up rate study: singular ray S = [1, inf), several decay powers q.

For each q the terminal slice u(T-s, x0) at an interior point of S is fitted
log-log against s; the theoretical slope is -1/q.  Writes one artifact
directory per q and prints a small summary table.

    python scripts/run_blowup_study.py [out_root]
"""

import sys
from pathlib import Path

import numpy as np

from singfbsde.ipde import SpaceGrid, solve_singular_ipde
from singfbsde.model import (ForwardModel, IntervalUnion, LevyMeasureSpec,
                             ProblemSpec, TerminalData)
from singfbsde.presets import power_generator
from singfbsde.reporting import plot_blowup, write_solution_csv
from singfbsde.verify import blowup_rate_fit


def make_spec(q: float) -> ProblemSpec:
    mod = ForwardModel(
        drift=lambda x: np.zeros_like(np.asarray(x, float)),
        diffusion=lambda x: np.full_like(np.asarray(x, float), 0.1),
        jump_coef=lambda x, e: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(e))),
        levy=LevyMeasureSpec.from_atoms([]), horizon=1.0)
    term = TerminalData(
        g=lambda x: 1.0 / np.maximum(1.0 - np.asarray(x, float), 1e-300),
        singular_set=IntervalUnion([(1.0, np.inf)]))
    return ProblemSpec(model=mod, gen=power_generator(q), terminal=term,
                       label=f"blowup-q{q:g}")


def main(out_root: str = "runs/blowup") -> int:
    x0 = 2.0
    window = (0.01, 0.3)
    print(f"{'q':>4} {'fitted slope':>14} {'expected':>10} {'r2':>8}")
    for q in (1.0, 2.0, 3.0, 5.0):
        res = solve_singular_ipde(make_spec(q), SpaceGrid(-2, 6, 161), 2000,
                                  [10, 40, 160, 320], 1e-2, dt_max=5e-4)
        sol = res.solution
        s = 1.0 - sol.t_nodes[:-1]
        keep = (s >= window[0]) & (s <= window[1])
        samples = [(sv, sol.value(1.0 - sv, x0)) for sv in s[keep]]
        fit = blowup_rate_fit(samples, window)
        print(f"{q:4g} {fit.slope:14.4f} {-1.0 / q:10.4f} {fit.r2:8.5f}")

        out = Path(out_root) / f"q{q:g}"
        out.mkdir(parents=True, exist_ok=True)
        write_solution_csv(out / "ipde_solution.csv", sol)
        plot_blowup(out / "blowup.svg", [p[0] for p in samples],
                    [p[1] for p in samples], fit.slope, x0)
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
