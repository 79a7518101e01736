"""Artifact emission: CSV files (RFC 4180 via the csv module), SVG plots, and the
JSON run manifest with content hashes.

Numbers are written with repr (shortest round-trip), so identical numerics give
identical bytes and identical hashes -- the determinism contract of the CLI.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ipde import IpdeSolution, SpaceGrid


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_dict_csv(path: Path, rows: Sequence[dict]) -> Path:
    if not rows:
        return write_csv(path, ["empty"], [])
    header = list(rows[0].keys())
    return write_csv(path, header, [[r[k] for k in header] for r in rows])


def write_solution_csv(path: Path, sol: IpdeSolution) -> Path:
    """Matrix layout: header row = x nodes, first column = t nodes."""
    header = ["t\\x"] + [_fmt(x) for x in sol.grid.nodes]
    rows = [[sol.t_nodes[i]] + list(sol.u[i]) for i in range(len(sol.t_nodes))]
    return write_csv(path, header, rows)


def read_solution_csv(path: Path) -> IpdeSolution:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        xs = np.asarray([float(v) for v in header[1:]])
        ts, vals = [], []
        for row in r:
            ts.append(float(row[0]))
            vals.append([float(v) for v in row[1:]])
    grid = SpaceGrid(float(xs[0]), float(xs[-1]), len(xs))
    return IpdeSolution(u=np.asarray(vals), t_nodes=np.asarray(ts), grid=grid)


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, *, config_ini: str, seed: int, threads: int,
                   timings: dict, artifacts: Sequence[Path],
                   verification: Optional[dict], exit_code: int) -> Path:
    import scipy

    from . import __version__

    manifest = {
        "config": config_ini,
        "seed": seed,
        "threads": threads,
        "versions": {
            "singfbsde": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "timings_sec": {k: round(v, 4) for k, v in timings.items()},
        "outputs": [{"path": p.name, "sha256": sha256_of(p),
                     "bytes": p.stat().st_size} for p in artifacts],
        "verification": verification,
        "exit_code": exit_code,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# SVG plots
# ---------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def plot_profiles(path: Path, sol: IpdeSolution, n_times: int = 6) -> Path:
    plt = _pyplot()
    idx = np.unique(np.linspace(0, len(sol.t_nodes) - 1, n_times).astype(int))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i in idx:
        ax.plot(sol.grid.nodes, sol.u[i], label=f"t={sol.t_nodes[i]:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel("u(t, x)")
    ax.set_title("solution profiles")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_blowup(path: Path, s_vals, u_vals, slope: Optional[float],
                x0: float) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.loglog(s_vals, u_vals, "o-", ms=3, label=f"u(T-s, {x0:g})")
    if slope is not None and len(s_vals):
        s = np.asarray(s_vals, dtype=float)
        anchor = u_vals[len(u_vals) // 2] / (s[len(s) // 2] ** slope)
        ax.loglog(s, anchor * s ** slope, "--",
                  label=f"fit slope {slope:+.3f}")
    ax.set_xlabel("T - t")
    ax.set_ylabel("u")
    ax.set_title("terminal blow-up")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ladder(path: Path, levels, u_bsde, u_ipde=None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(levels, u_bsde, "o-", label="regression solver")
    if u_ipde is not None:
        ax.plot(levels, u_ipde, "s--", label="finite differences")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("truncation level n")
    ax.set_ylabel("u(t0, x0)")
    ax.set_title("monotone level ladder")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
