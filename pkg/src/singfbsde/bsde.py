"""Backward least-squares Monte Carlo solver for the truncated equation and the
monotone limit over truncation levels.

Discrete scheme on a path bundle (states X, Brownian increments dW, compensated
jump-weight functionals M):

    Y_N  = g_n(X_T)
    Z_i  = E[Y_{i+1} dW_i | X_i] / dt_i
    B_i  = E[Y_{i+1} M_i  | X_i] / dt_i
    Yc   = E[Y_{i+1} | X_i]
    Y_i  = Yc + dt_i * f_n(t_i, X_i, Yc, Z_i, B_i)        (y_update="explicit")
           Yc + dt_i/2 * (f_n(..., Yc, ...) + f_n(..., Yp, ...)),
           Yp the explicit predictor                       (y_update="heun", default)
    Y_i  clamped to [0, n(T+1)]

Conditional expectations are ridge-regularized least-squares projections on a
basis of the current state.  Truncation levels share one path bundle (common
random numbers), which is what makes the level monotonicity testable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .forward import PathBundle, TimeGrid, graded_time_grid, simulate_paths
from .model import Generator, ProblemSpec, truncate_generator, truncate_terminal

Array = np.ndarray


class RegressionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# regression basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """Basis functions of the state for the conditional-expectation projections.

    kind "polynomial": [1, x~, x~^2, ..., x~^degree] on the standardized state.
    kind "piecewise_linear": [1, x~, (x~-k_j)_+] with knots at empirical quantiles
    (n_bins bins).  Both include the constant; ridge keeps the design full rank.
    """

    kind: str = "polynomial"
    degree: int = 3
    n_bins: int = 8
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise_linear"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.kind == "piecewise_linear" and self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    def design(self, states: Array) -> Array:
        s = np.asarray(states, dtype=float)
        mu, sd = s.mean(), s.std()
        sd = sd if sd > 0 else 1.0
        u = (s - mu) / sd
        if self.kind == "polynomial":
            cols = [np.ones_like(u)]
            cols += [u ** k for k in range(1, self.degree + 1)]
        else:
            qs = np.quantile(u, np.linspace(0, 1, self.n_bins + 1)[1:-1])
            cols = [np.ones_like(u), u]
            cols += [np.maximum(u - k, 0.0) for k in qs]
        return np.column_stack(cols)


def condexp_regress(bundle: PathBundle, values: Array, basis: RegressionBasis,
                    step: int) -> Array:
    """Fitted E[values | X_step] at each path's state.

    Constant values are returned unchanged; a degenerate state column (all paths
    at the same point) reduces to the plain mean.  Both cases keep the
    deterministic degenerate mode bitwise exact.
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if not 0 <= step <= bundle.n_steps:
        raise ValueError(f"step {step} out of range")
    if np.ptp(values) == 0.0:
        return values.copy()
    states = bundle.x_paths[:, step]
    if np.ptp(states) == 0.0:
        return np.full_like(values, values.mean())
    A = basis.design(states)
    gram = A.T @ A
    lam = basis.ridge * np.trace(gram) / gram.shape[0]
    gram[np.diag_indices_from(gram)] += lam
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e14:
        raise RegressionError(f"design rank-deficient after ridge: cond={cond:.3e}")
    coef = np.linalg.solve(gram, A.T @ values)
    return A @ coef


# ---------------------------------------------------------------------------
# one truncation level
# ---------------------------------------------------------------------------

@dataclass
class TruncatedSolution:
    """Discrete (Y, Z, B) fields of one truncation level plus diagnostics."""

    n: int
    y_vals: Array                      # [path, node]
    z_vals: Array                      # [path, step]
    b_vals: Array                      # [path, step]
    u_root: float
    diagnostics: dict = field(default_factory=dict)
    times: Array = field(default_factory=lambda: np.asarray([]))
    meta: dict = field(default_factory=dict)

    @property
    def u_se(self) -> float:
        return self.diagnostics.get("u_se", 0.0)


def backward_sweep(bundle: PathBundle, gen_n: Generator, g_n: Callable[[Array], Array],
                   basis: RegressionBasis, *, y_update: str = "heun") -> TruncatedSolution:
    """Regression-based backward sweep for one truncation level.

    In the degenerate deterministic case (sigma = 0, no jumps, state-independent
    driver) the scheme with y_update="explicit" reduces bitwise to explicit Euler
    on y' = -f_n(y).
    """
    if y_update not in ("explicit", "heun"):
        raise ValueError(f"unknown y_update {y_update!r}")
    nodes = bundle.grid.nodes
    n_steps = bundle.n_steps
    n_paths = bundle.n_paths
    cap = gen_n.y_cap
    level = gen_n.trunc_level or 0

    y_vals = np.empty((n_paths, n_steps + 1))
    z_vals = np.zeros((n_paths, n_steps))
    b_vals = np.zeros((n_paths, n_steps))
    y = np.asarray(g_n(bundle.x_paths[:, -1]), dtype=float)
    if cap is not None:
        y = np.clip(y, 0.0, cap)
    y_vals[:, -1] = y

    clamp_lo = clamp_hi = 0
    preclamp_max = float(y.max())
    cond_max = 0.0
    resid = []
    for i in range(n_steps - 1, -1, -1):
        dt = nodes[i + 1] - nodes[i]
        t_i = nodes[i]
        x_i = bundle.x_paths[:, i]
        yc = condexp_regress(bundle, y, basis, i)
        # centering by the conditional mean changes nothing in expectation
        # (dW and M are conditionally mean-zero) but kills the O(E[Y^2]) noise
        resid_y = y - yc
        z = condexp_regress(bundle, resid_y * bundle.dw[:, i], basis, i) / dt
        b = condexp_regress(bundle, resid_y * bundle.m_gamma[:, i], basis, i) / dt
        f1 = np.asarray(gen_n.core(t_i, x_i, yc, z, b), dtype=float)
        if y_update == "explicit":
            y_new = yc + dt * f1
        else:
            y_pred = yc + dt * f1
            if cap is not None:
                y_pred = np.clip(y_pred, 0.0, cap)
            f2 = np.asarray(gen_n.core(t_i, x_i, y_pred, z, b), dtype=float)
            y_new = yc + 0.5 * dt * (f1 + f2)
        preclamp_max = max(preclamp_max, float(y_new.max()))
        if cap is not None:
            clamp_lo += int((y_new < 0.0).sum())
            clamp_hi += int((y_new > cap).sum())
            y_new = np.clip(y_new, 0.0, cap)
        resid.append(float(np.mean((y - yc) ** 2)))
        y = y_new
        y_vals[:, i] = y
        z_vals[:, i] = z
        b_vals[:, i] = b

    u_root = float(y_vals[:, 0].mean())
    total = n_paths * n_steps
    clamp_fraction = (clamp_lo + clamp_hi) / total if total else 0.0
    if clamp_fraction > 0.5:
        warnings.warn(f"clamp active on {clamp_fraction:.0%} of (path, step) values; "
                      "the scheme looks under-resolved")
    u_se = float(y_vals[:, 1].std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    diag = {"clamp_fraction": clamp_fraction, "clamp_lo": clamp_lo, "clamp_hi": clamp_hi,
            "preclamp_max": preclamp_max, "u_se": u_se,
            "mean_sq_residual": float(np.mean(resid)) if resid else 0.0}
    return TruncatedSolution(n=level, y_vals=y_vals, z_vals=z_vals, b_vals=b_vals,
                             u_root=u_root, diagnostics=diag, times=nodes,
                             meta={"ell": gen_n.ell, "y_update": y_update,
                                   "seed": bundle.seed, "x0": bundle.x0,
                                   "t0": bundle.t0})


# ---------------------------------------------------------------------------
# monotone limit over truncation levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo configuration shared by all truncation levels of one limit run."""

    n_paths: int = 20000
    n_steps: int = 200
    seed: int = 0
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    delta_cut: float = 1e-3
    small_jump_mode: str = "drop"
    threads: int = 1
    y_update: str = "heun"
    dt_max: Optional[float] = None     # graded-mesh cap; None = uniform n_steps grid
    grading_cfl: float = 0.4


@dataclass
class LimitSolution:
    """Per-level root values of the monotone construction and its convergence state."""

    levels: list[int]
    u_values: list[float]
    u_limit: float
    gap: float
    converged: bool
    monotone_ok: bool = True
    se_values: list[float] = field(default_factory=list)
    se_diffs: list[float] = field(default_factory=list)
    per_level: list[TruncatedSolution] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def monotone_limit(spec: ProblemSpec, t: float, x: float, schedule: Sequence[int],
                   tol: float, mc: McConfig = McConfig(), *,
                   keep_solutions: bool = False) -> LimitSolution:
    """Run backward sweeps along an increasing truncation schedule on common
    random numbers and declare convergence once the root gap falls below tol.

    u values must be non-decreasing within 3 pooled standard errors; a violation
    only flags the result (monotone_ok=False), it does not raise.
    """
    schedule = [int(n) for n in schedule]
    if any(b <= a for a, b in zip(schedule, schedule[1:])) or not schedule:
        raise ValueError("schedule must be strictly increasing and non-empty")
    T = spec.horizon
    if not t < T:
        raise ValueError("need t < T")

    if mc.dt_max is not None:
        a_probe = _decay_range(spec, t, x)
        grid = graded_time_grid(t, T, schedule[-1], spec.gen.decay_power,
                               a_probe[1], mc.dt_max, a_lo=a_probe[0],
                               cfl=mc.grading_cfl)
    else:
        grid = TimeGrid(t, T, mc.n_steps)
    bundle = simulate_paths(spec.model, t, x, grid, mc.n_paths, mc.seed,
                            gamma=spec.gen.gamma, small_jump_mode=mc.small_jump_mode,
                            delta_cut=mc.delta_cut, threads=mc.threads)

    u_values, se_values, se_diffs, sols = [], [], [], []
    prev_y1: Optional[Array] = None
    monotone_ok = True
    for n in schedule:
        gen_n = truncate_generator(spec.gen, n, T)
        g_n = truncate_terminal(spec.terminal, n)
        sol = backward_sweep(bundle, gen_n, g_n, mc.basis, y_update=mc.y_update)
        u_values.append(sol.u_root)
        se_values.append(sol.u_se)
        y1 = sol.y_vals[:, 1]
        if prev_y1 is not None:
            d = y1 - prev_y1
            se_d = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
            se_diffs.append(se_d)
            if u_values[-1] < u_values[-2] - 3.0 * se_d - 1e-12:
                monotone_ok = False
        prev_y1 = y1
        if keep_solutions:
            sols.append(sol)

    gaps = [b - a for a, b in zip(u_values, u_values[1:])]
    gap = abs(gaps[-1]) if gaps else math.inf
    converged = bool(gaps and gap <= tol)
    return LimitSolution(levels=schedule, u_values=u_values, u_limit=u_values[-1],
                         gap=gap, converged=converged, monotone_ok=monotone_ok,
                         se_values=se_values, se_diffs=se_diffs, per_level=sols,
                         meta={"t": t, "x": x, "tol": tol, "seed": mc.seed,
                               "n_paths": mc.n_paths,
                               "n_steps": bundle.n_steps,
                               "spec": spec.fingerprint()})


def _decay_range(spec: ProblemSpec, t: float, x: float) -> tuple[float, float]:
    """(min, max) of the decay coefficient on a coarse (t, x) probe lattice."""
    ts = np.linspace(t, spec.horizon, 9)
    xs = np.linspace(x - 3.0, x + 3.0, 9)
    TT, XX = np.meshgrid(ts, xs, indexing="ij")
    av = np.asarray(spec.gen.decay_coef(TT, XX), dtype=float)
    av = av[np.isfinite(av) & (av > 0)]
    if av.size == 0:
        raise ValueError("decay coefficient is nowhere positive on the probe lattice")
    return float(av.min()), float(av.max())


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def zu_weighted_norm(sol: TruncatedSolution, rho: float, *,
                     ell: Optional[float] = None,
                     theta_l2: Optional[float] = None) -> float:
    """Weighted control-norm diagnostic ( E int (T-s)^rho (|Z|^2 + B^2/|theta|^2) ds )^(ell/2).

    The jump component is proxied through the aggregate B scaled by the L^2 norm
    of the dominating mark function; with theta_l2 == 0 (no jump coupling) the
    B part is 0.  Reported per level for boundedness-in-n inspection.
    """
    if not 0 <= rho < 1:
        raise ValueError("need 0 <= rho < 1 (see check_rho_condition)")
    ell = ell if ell is not None else sol.meta.get("ell", 2.0)
    th2 = theta_l2 if theta_l2 is not None else sol.meta.get("theta_l2", 0.0)
    times = sol.times
    T = times[-1]
    dts = np.diff(times)
    w = (T - times[:-1]) ** rho
    zsq = sol.z_vals ** 2
    bsq = (sol.b_vals ** 2 / th2 ** 2) if th2 > 0 else np.zeros_like(sol.b_vals)
    integral = ((zsq + bsq) * w[None, :] * dts[None, :]).sum(axis=1)
    return float(integral.mean() ** (ell / 2.0))
