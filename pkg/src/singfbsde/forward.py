"""Forward jump-diffusion simulation and jump-measure quadrature.

The sigma-finite jump measure is replaced by a finite-activity compound-Poisson
approximation beyond a small-jump cut delta_cut; the small-jump remainder is
either dropped (default, with its variance recorded) or replaced by an
independent Gaussian with matched variance.

Paths are simulated in fixed-size blocks, each block drawing from its own
seed-derived stream, so the output is bit-identical for a given seed no matter
how many worker threads are used.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

Array = np.ndarray


class QuadratureError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing nodes t0 = tau_0 < ... < tau_N = T; uniform by default."""

    t0: float
    T: float
    n_steps: int
    custom_nodes: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.custom_nodes is not None:
            nd = np.asarray(self.custom_nodes, dtype=float)
            if nd.size != self.n_steps + 1:
                raise ValueError("custom_nodes length must be n_steps+1")
            if not np.all(np.diff(nd) > 0):
                raise ValueError("nodes must be strictly increasing")
            if nd[0] != self.t0 or nd[-1] != self.T:
                raise ValueError("nodes must span [t0, T] exactly")
        elif not (self.T > self.t0 and self.n_steps >= 1):
            raise ValueError("need T > t0 and n_steps >= 1")

    @classmethod
    def from_nodes(cls, nodes) -> "TimeGrid":
        nd = tuple(float(v) for v in nodes)
        return cls(t0=nd[0], T=nd[-1], n_steps=len(nd) - 1, custom_nodes=nd)

    @property
    def nodes(self) -> Array:
        if self.custom_nodes is not None:
            return np.asarray(self.custom_nodes, dtype=float)
        nd = np.linspace(self.t0, self.T, self.n_steps + 1)
        nd[-1] = self.T
        return nd

    @property
    def dts(self) -> Array:
        return np.diff(self.nodes)


def graded_time_grid(t0: float, T: float, n: int, q: float, a_hi: float,
                     dt_max: float, *, a_lo: Optional[float] = None,
                     cfl: float = 0.4) -> TimeGrid:
    """Backward-graded mesh resolving the terminal reaction layer of a level-n run.

    The reaction Lipschitz scale along the run is L(s) ~ (q+1)*a_hi*y(s)^q with
    y(s) <= (q*a_lo*s + n^-q)^(-1/q) (s = time to terminal).  Steps are chosen so
    dt*L <= cfl, growing geometrically away from T and capped at dt_max.
    """
    if a_lo is None:
        a_lo = a_hi
    if not (a_hi > 0 and a_lo > 0 and q > 0 and n >= 1):
        raise ValueError("need positive a, q and n >= 1")
    horizon = T - t0

    def lip(s):
        y_env = (q * a_lo * s + float(n) ** (-q)) ** (-1.0 / q)
        return (q + 1.0) * a_hi * y_env ** q

    s_nodes = [0.0]
    s = min(cfl / lip(0.0), dt_max)
    while s < horizon:
        s_nodes.append(s)
        s = s + min(cfl / lip(s), dt_max)
    s_nodes.append(horizon)
    if s_nodes[-1] - s_nodes[-2] < 1e-3 * dt_max:
        del s_nodes[-2]
    t_nodes = T - np.asarray(s_nodes[::-1])
    t_nodes[0], t_nodes[-1] = t0, T
    return TimeGrid.from_nodes(t_nodes)


# ---------------------------------------------------------------------------
# jump-measure quadrature
# ---------------------------------------------------------------------------

def _tail_pieces(levy, delta_cut: float):
    """Support pieces restricted to {|e| > delta_cut}."""
    pieces = []
    for lo, hi in levy.support:
        if hi <= -delta_cut or lo >= delta_cut:
            pieces.append((lo, hi))
            continue
        if lo < -delta_cut:
            pieces.append((lo, min(hi, -delta_cut)))
        if hi > delta_cut:
            pieces.append((max(lo, delta_cut), hi))
    return [(a, b) for a, b in pieces if b > a]


def _ladder_points(lo: float, hi: float) -> list[float]:
    """Geometric breakpoints toward the small-|e| end of a piece.

    Jump densities are typically steep near 0; plain adaptive quadrature can
    silently skip a boundary layer at a tiny positive endpoint, so we hand it
    a dyadic-in-magnitude ladder of interior breakpoints.
    """
    if lo < 0 < hi:
        raise ValueError("support pieces must not straddle 0")
    pts = []
    if 0 < lo < hi:
        p = lo * 10.0
        while p < hi / 2:
            pts.append(p)
            p *= 10.0
    elif lo < hi < 0:
        p = hi * 10.0
        while p > lo / 2:
            pts.append(p)
            p *= 10.0
    return pts


def _quad_piece(integrand, lo: float, hi: float) -> float:
    val, err = integrate.quad(integrand, lo, hi, epsrel=1e-8, epsabs=1e-12,
                              limit=400, points=_ladder_points(lo, hi) or None)
    if not np.isfinite(val) or (abs(val) > 1e-12 and err > 1e-6 * abs(val) + 1e-10):
        raise QuadratureError(
            f"quadrature on ({lo}, {hi}) did not converge: value={val}, abserr={err}")
    return val


def levy_quadrature(levy, h: Callable[[Array], Array], delta_cut: float = 0.0) -> float:
    """integral of h(e) over {|e| > delta_cut} against the jump measure.

    Exact sum for atoms; adaptive quadrature (relative tolerance 1e-8) for
    densities.  Non-convergent quadrature raises QuadratureError.
    """
    if levy.is_atomic:
        return float(sum(m * float(np.asarray(h(np.asarray(e))))
                         for e, m in levy.atoms if abs(e) > delta_cut and m > 0))
    total = 0.0
    dens = levy.density
    for lo, hi in _tail_pieces(levy, delta_cut):
        total += _quad_piece(lambda e: float(np.asarray(h(np.asarray(e)))
                                             * np.asarray(dens(np.asarray(e)))), lo, hi)
    return float(total)


def _gauss_nodes(levy, delta_cut: float, tail: bool, panels: int = 8, order: int = 24):
    """Fixed composite Gauss-Legendre nodes/weights (density included in weights)."""
    if levy.is_atomic:
        sel = [(e, m) for e, m in levy.atoms
               if (abs(e) > delta_cut) == tail and m > 0]
        nodes = np.asarray([e for e, _ in sel], dtype=float)
        wts = np.asarray([m for _, m in sel], dtype=float)
        return nodes, wts
    if tail:
        pieces = _tail_pieces(levy, delta_cut)
    else:
        pieces = []
        for lo, hi in levy.support:
            a, b = max(lo, -delta_cut), min(hi, delta_cut)
            if b > a:
                pieces.append((a, b))
    gx, gw = np.polynomial.legendre.leggauss(order)
    nodes, wts = [], []
    for lo, hi in pieces:
        edges = np.linspace(lo, hi, panels + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            nodes.append(mid + half * gx)
            wts.append(half * gw)
    if not nodes:
        return np.asarray([]), np.asarray([])
    nodes = np.concatenate(nodes)
    wts = np.concatenate(wts) * np.asarray(levy.density(nodes), dtype=float)
    return nodes, wts


# ---------------------------------------------------------------------------
# compound-Poisson approximation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompoundPoissonApprox:
    """Finite-activity approximation of the jump measure beyond delta_cut.

    total_rate          -- mass of {|e| > delta_cut}
    small_jump_variance -- integral of e^2 over {|e| <= delta_cut}
    tail_nodes/weights  -- fixed quadrature of the tail measure (exact for atoms):
                           used for state-dependent compensators.
    """

    delta_cut: float
    total_rate: float
    small_jump_variance: float
    small_jump_mode: str = "drop"
    tail_nodes: Array = field(default_factory=lambda: np.asarray([]))
    tail_weights: Array = field(default_factory=lambda: np.asarray([]))
    small_nodes: Array = field(default_factory=lambda: np.asarray([]))
    small_weights: Array = field(default_factory=lambda: np.asarray([]))
    no_tail: bool = False
    _inv_cdf: Optional[tuple[Array, Array]] = None

    def draw_marks(self, rng: np.random.Generator, count: int) -> Array:
        if count == 0 or self.no_tail:
            return np.asarray([])
        if self._inv_cdf is None:
            p = self.tail_weights / self.tail_weights.sum()
            return rng.choice(self.tail_nodes, size=count, p=p)
        cdf, grid = self._inv_cdf
        return np.interp(rng.random(count), cdf, grid)

    def compensator(self, fn: Callable[[Array, Array], Array], x: Array) -> Array:
        """integral of fn(x, e) over the tail measure, per state (fixed-node rule)."""
        x = np.asarray(x, dtype=float)
        if self.tail_nodes.size == 0:
            return np.zeros(x.shape)
        shape = x.shape + (self.tail_nodes.size,)
        vals = np.broadcast_to(np.asarray(
            fn(x[..., None], self.tail_nodes[None, ...]), dtype=float), shape)
        return vals @ self.tail_weights

    def small_variance_of(self, beta: Callable[[Array, Array], Array], x: Array) -> Array:
        """integral of beta(x,e)^2 over {|e| <= delta_cut}, per state."""
        x = np.asarray(x, dtype=float)
        if self.small_nodes.size == 0:
            return np.zeros(x.shape)
        shape = x.shape + (self.small_nodes.size,)
        vals = np.broadcast_to(np.asarray(
            beta(x[..., None], self.small_nodes[None, ...]), dtype=float), shape) ** 2
        return vals @ self.small_weights


def build_jump_sampler(levy, delta_cut: float,
                       small_jump_mode: str = "drop") -> CompoundPoissonApprox:
    """Split the jump measure at delta_cut and package the tail as compound Poisson."""
    if delta_cut <= 0:
        raise ValueError("delta_cut must be > 0")
    if small_jump_mode not in ("drop", "gaussian_surrogate"):
        raise ValueError(f"unknown small_jump_mode {small_jump_mode!r}")

    total_rate = levy_quadrature(levy, lambda e: np.ones_like(np.asarray(e, dtype=float)),
                                 delta_cut)
    if levy.tail_mass is not None:
        analytic = float(levy.tail_mass(delta_cut))
        if abs(analytic - total_rate) > 1e-6 * max(abs(analytic), 1e-30):
            raise QuadratureError(
                f"declared analytic tail mass {analytic} disagrees with quadrature "
                f"{total_rate} at delta_cut={delta_cut}")
        total_rate = analytic
    if levy.is_atomic:
        small_var = sum(m * e * e for e, m in levy.atoms if abs(e) <= delta_cut)
        has_mass = any(m > 0 for _, m in levy.atoms)
    else:
        small_var, has_mass = 0.0, True
        for lo, hi in levy.support:
            a, b = max(lo, -delta_cut), min(hi, delta_cut)
            if b > a:
                small_var += _quad_piece(
                    lambda e: e * e * float(np.asarray(levy.density(np.asarray(e)))), a, b)
    tail_nodes, tail_weights = _gauss_nodes(levy, delta_cut, tail=True)
    small_nodes, small_weights = _gauss_nodes(levy, delta_cut, tail=False)

    inv_cdf = None
    if not levy.is_atomic and tail_nodes.size:
        grids, cdfs, acc = [], [], 0.0
        for lo, hi in _tail_pieces(levy, delta_cut):
            g = np.linspace(lo, hi, 4097)
            d = np.asarray(levy.density(g), dtype=float)
            c = integrate.cumulative_trapezoid(d, g, initial=0.0)
            grids.append(g)
            cdfs.append(acc + c)
            acc += c[-1]
        grid = np.concatenate(grids)
        cdf = np.concatenate(cdfs) / acc
        cdf, idx = np.unique(cdf, return_index=True)
        inv_cdf = (cdf, grid[idx])

    no_tail = total_rate <= 0.0
    if no_tail and has_mass and small_jump_mode == "drop":
        warnings.warn(f"delta_cut={delta_cut} leaves no compound-Poisson mass and "
                      "the small-jump remainder is dropped")
    return CompoundPoissonApprox(
        delta_cut=float(delta_cut), total_rate=float(total_rate),
        small_jump_variance=float(small_var), small_jump_mode=small_jump_mode,
        tail_nodes=tail_nodes, tail_weights=tail_weights,
        small_nodes=small_nodes, small_weights=small_weights,
        no_tail=no_tail, _inv_cdf=inv_cdf)


# ---------------------------------------------------------------------------
# path bundle
# ---------------------------------------------------------------------------

@dataclass
class PathBundle:
    """Simulated paths with the per-interval functionals the backward solver needs.

    x_paths  -- [path, node] states
    dw       -- [path, step] Brownian increments
    m_gamma  -- [path, step] compensated jump-weight functionals
                sum_{jumps in step} gamma(X_i, e_j) - dt * int_tail gamma(X_i, e)
    """

    x_paths: Array
    dw: Array
    m_gamma: Array
    seed: int
    grid: TimeGrid
    x0: float
    t0: float
    sampler: Optional[CompoundPoissonApprox] = None
    small_jump_mode: str = "drop"

    @property
    def n_paths(self) -> int:
        return self.x_paths.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]


_BLOCK = 16384


def _simulate_block(model, t0, x0, nodes, nb, seed, block_idx, sampler, gamma, mode):
    rng = np.random.default_rng(np.random.SeedSequence((seed, block_idx)))
    n_steps = len(nodes) - 1
    x = np.full(nb, float(x0))
    xs = np.empty((nb, n_steps + 1))
    dws = np.empty((nb, n_steps))
    mgs = np.zeros((nb, n_steps))
    xs[:, 0] = x
    rate = 0.0 if sampler is None else sampler.total_rate
    for i in range(n_steps):
        dt = nodes[i + 1] - nodes[i]
        sq = np.sqrt(dt)
        dw = rng.standard_normal(nb) * sq
        bsum = np.zeros(nb)
        gsum = np.zeros(nb)
        if rate > 0.0:
            counts = rng.poisson(rate * dt, nb)
            total = int(counts.sum())
            if total:
                marks = sampler.draw_marks(rng, total)
                owner = np.repeat(np.arange(nb), counts)
                xrep = np.repeat(x, counts)
                bw = np.broadcast_to(np.asarray(
                    model.jump_coef(xrep, marks), dtype=float), marks.shape)
                bsum = np.bincount(owner, weights=bw, minlength=nb)
                if gamma is not None:
                    gw = np.broadcast_to(np.asarray(
                        gamma(xrep, marks), dtype=float), marks.shape)
                    gsum = np.bincount(owner, weights=gw, minlength=nb)
        surrogate = 0.0
        if mode == "gaussian_surrogate" and sampler is not None:
            var = sampler.small_variance_of(model.jump_coef, x)
            surrogate = np.sqrt(np.maximum(var, 0.0) * dt) * rng.standard_normal(nb)
        comp_b = sampler.compensator(model.jump_coef, x) if sampler is not None else 0.0
        x_next = (x + np.asarray(model.drift(x), dtype=float) * dt
                  + np.asarray(model.diffusion(x), dtype=float) * dw
                  + bsum - dt * comp_b + surrogate)
        if not np.all(np.isfinite(x_next)):
            bad = int(np.argmax(~np.isfinite(x_next)))
            raise SimulationError(
                f"non-finite state at step {i}, path {block_idx * _BLOCK + bad}")
        if gamma is not None:
            comp_g = sampler.compensator(gamma, x) if sampler is not None else 0.0
            mgs[:, i] = gsum - dt * comp_g
        dws[:, i] = dw
        x = x_next
        xs[:, i + 1] = x
    return xs, dws, mgs


def simulate_paths(model, t: float, x: float, grid: TimeGrid, n_paths: int,
                   seed: int, *, sampler: Optional[CompoundPoissonApprox] = None,
                   gamma: Optional[Callable[[Array, Array], Array]] = None,
                   small_jump_mode: str = "drop", delta_cut: float = 1e-3,
                   threads: int = 1) -> PathBundle:
    """Euler scheme for the forward equation on the grid, with compound-Poisson jumps.

    X_{i+1} = X_i + b(X_i) dt + sigma(X_i) dW + sum_jumps beta(X_i, e)
              - dt * int_{|e|>cut} beta(X_i, e) lambda(de)  [+ Gaussian surrogate]

    Jumps are binned into their containing interval.  m_gamma freezes gamma at the
    left endpoint, matching the predictable integrand of the driver coupling.
    Output is bit-identical for identical (inputs, seed) regardless of `threads`.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if abs(grid.t0 - t) > 1e-12:
        raise ValueError("grid must start at t")
    if sampler is None and model.levy is not None:
        sampler = build_jump_sampler(model.levy, delta_cut, small_jump_mode)
    mode = sampler.small_jump_mode if sampler is not None else small_jump_mode
    nodes = grid.nodes
    blocks = [(k, min(_BLOCK, n_paths - k * _BLOCK))
              for k in range((n_paths + _BLOCK - 1) // _BLOCK)]

    def work(item):
        k, nb = item
        return _simulate_block(model, t, x, nodes, nb, seed, k, sampler, gamma, mode)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    xs = np.concatenate([p[0] for p in parts], axis=0)
    dws = np.concatenate([p[1] for p in parts], axis=0)
    mgs = np.concatenate([p[2] for p in parts], axis=0)
    return PathBundle(x_paths=xs, dw=dws, m_gamma=mgs, seed=seed, grid=grid,
                      x0=float(x), t0=float(t), sampler=sampler, small_jump_mode=mode)


# ---------------------------------------------------------------------------
# diagnostics and persistence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentCheck:
    statistic: float
    bound: float
    se: float


def moment_check(bundle: PathBundle, p: float, x: float, c_cal: float = 4.0) -> MomentCheck:
    """Monte-Carlo E sup_s |X_s - x|^p against the calibrated bound C(1+|x|^p)(T-t)."""
    if p < 2:
        raise ValueError("need p >= 2")
    sup_p = np.max(np.abs(bundle.x_paths - x), axis=1) ** p
    stat = float(sup_p.mean())
    se = float(sup_p.std(ddof=1) / np.sqrt(len(sup_p))) if len(sup_p) > 1 else 0.0
    span = bundle.grid.T - bundle.grid.t0
    return MomentCheck(statistic=stat, bound=c_cal * (1.0 + abs(x) ** p) * span, se=se)


_MAGIC = b"SFBB\x01"


def save_bundle(bundle: PathBundle, path) -> None:
    """Flat binary layout: header (shapes, seed, grid span) + little-endian f8 body."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqddd", bundle.n_paths, bundle.n_steps, bundle.seed,
                             bundle.t0, bundle.grid.T, bundle.x0))
        fh.write(bundle.grid.nodes.astype("<f8").tobytes())
        for arr in (bundle.x_paths, bundle.dw, bundle.m_gamma):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        if fh.read(5) != _MAGIC:
            raise ValueError("not a path-bundle file")
        n_paths, n_steps, seed, t0, T, x0 = struct.unpack("<qqqddd", fh.read(48))
        nodes = np.frombuffer(fh.read(8 * (n_steps + 1)), dtype="<f8")
        grid = TimeGrid.from_nodes(nodes)
        xs = np.frombuffer(fh.read(8 * n_paths * (n_steps + 1)),
                           dtype="<f8").reshape(n_paths, n_steps + 1).copy()
        dw = np.frombuffer(fh.read(8 * n_paths * n_steps),
                           dtype="<f8").reshape(n_paths, n_steps).copy()
        mg = np.frombuffer(fh.read(8 * n_paths * n_steps),
                           dtype="<f8").reshape(n_paths, n_steps).copy()
    return PathBundle(x_paths=xs, dw=dw, m_gamma=mg, seed=int(seed), grid=grid,
                      x0=float(x0), t0=float(t0))


def bundle_summary_rows(bundle: PathBundle) -> list[dict]:
    """Per-node path summaries for the CSV exporter."""
    rows = []
    for j, t in enumerate(bundle.grid.nodes):
        col = bundle.x_paths[:, j]
        rows.append({"t": t, "mean": float(col.mean()), "std": float(col.std()),
                     "min": float(col.min()), "max": float(col.max()),
                     "q05": float(np.quantile(col, 0.05)),
                     "q95": float(np.quantile(col, 0.95))})
    return rows
