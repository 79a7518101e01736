"""Problem definitions: forward coefficients, driver structure, terminal data, condition audits.

Everything downstream (path simulation, backward regression, finite differences)
consumes the three pieces bundled in :class:`ProblemSpec`:

* :class:`ForwardModel` -- drift / diffusion / jump coefficient and the jump measure,
* :class:`Generator`    -- the driver f(t,x,y,z,B) with its structural constants,
* :class:`TerminalData` -- terminal payoff g, possibly +inf on a closed singular set.

The audit machinery probes the structural conditions on user-declared boxes and
reports worst-case witnesses.  Audits are sampled falsification checks, never proofs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

Array = np.ndarray

_INF = float("inf")


# ---------------------------------------------------------------------------
# singular-set geometry (d = 1)
# ---------------------------------------------------------------------------

class IntervalUnion:
    """Finite union of closed intervals/rays on the real line.

    Intervals are normalized at construction: sorted, overlapping or touching
    pieces merged.  Membership and distance-to-boundary queries are exact,
    which is what makes the jump-invariance checks exact in the atom case.
    """

    def __init__(self, intervals: Sequence[tuple[float, float]] = ()):
        pieces = []
        for lo, hi in intervals:
            lo, hi = float(lo), float(hi)
            if math.isnan(lo) or math.isnan(hi) or lo > hi:
                raise ValueError(f"bad interval ({lo}, {hi})")
            pieces.append((lo, hi))
        pieces.sort()
        merged: list[tuple[float, float]] = []
        for lo, hi in pieces:
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        self.intervals: tuple[tuple[float, float], ...] = tuple(merged)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def is_whole_line(self) -> bool:
        return len(self.intervals) == 1 and self.intervals[0] == (-_INF, _INF)

    def boundary(self) -> Array:
        """Finite endpoints; empty for the empty set and for the whole line."""
        pts = [p for piece in self.intervals for p in piece if math.isfinite(p)]
        return np.unique(np.asarray(pts, dtype=float))

    def contains(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.intervals:
            out |= (x >= lo) & (x <= hi)
        return out

    def distance(self, x) -> Array:
        """Distance to the set itself (0 inside)."""
        x = np.asarray(x, dtype=float)
        if self.is_empty:
            return np.full(x.shape, _INF)
        d = np.full(x.shape, _INF)
        for lo, hi in self.intervals:
            d = np.minimum(d, np.maximum.reduce([lo - x, x - hi, np.zeros_like(x)]))
        return d

    def distance_to_boundary(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        pts = self.boundary()
        if pts.size == 0:
            return np.full(x.shape, _INF)
        return np.min(np.abs(x[..., None] - pts[None, ...]), axis=-1)

    def __repr__(self):
        return f"IntervalUnion({list(self.intervals)!r})"


# ---------------------------------------------------------------------------
# jump measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevyMeasureSpec:
    """Jump-mark measure, either finitely many atoms or a density on intervals.

    atoms      -- tuple of (mark, mass) with mass >= 0; exact arithmetic downstream.
    density    -- mark density, vectorized over numpy arrays.
    support    -- tuple of disjoint (lo, hi) intervals carrying the density.
    tail_mass  -- optional analytic mass of {|e| > delta}; cross-checked against
                  quadrature to 1e-6 relative wherever it is consulted.
    """

    atoms: Optional[tuple[tuple[float, float], ...]] = None
    density: Optional[Callable[[Array], Array]] = None
    support: Optional[tuple[tuple[float, float], ...]] = None
    tail_mass: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if (self.atoms is None) == (self.density is None):
            raise ValueError("exactly one of atoms / density must be given")
        if self.atoms is not None:
            for e, m in self.atoms:
                if m < 0:
                    raise ValueError(f"negative mass {m} at mark {e}")
                if e == 0.0:
                    raise ValueError("marks live on E = R \\ {0}")
        if self.density is not None and not self.support:
            raise ValueError("density variant requires a support")

    @classmethod
    def from_atoms(cls, pairs: Sequence[tuple[float, float]]) -> "LevyMeasureSpec":
        return cls(atoms=tuple((float(e), float(m)) for e, m in pairs))

    @classmethod
    def from_density(cls, density, support, tail_mass=None) -> "LevyMeasureSpec":
        sup = tuple((float(a), float(b)) for a, b in support)
        return cls(density=density, support=sup, tail_mass=tail_mass)

    @property
    def is_atomic(self) -> bool:
        return self.atoms is not None

    @property
    def max_mark(self) -> float:
        if self.is_atomic:
            return max((abs(e) for e, _ in self.atoms), default=0.0)
        return max(max(abs(a), abs(b)) for a, b in self.support)

    @property
    def two_moment(self) -> float:
        """integral of (1 ^ e^2) against the measure."""
        from .forward import levy_quadrature

        return levy_quadrature(self, lambda e: np.minimum(1.0, e * e), 0.0)


# ---------------------------------------------------------------------------
# the problem triple
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForwardModel:
    """Jump-diffusion coefficients.  All callables are vectorized over numpy arrays.

    Declared constants (lip_drift_diffusion etc.) are optional; when present the
    audits check the sampled quotients against them, otherwise the quotients are
    only required to stay finite.
    """

    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    jump_coef: Callable[[Array, Array], Array]
    levy: LevyMeasureSpec
    horizon: float
    dim: int = 1
    lip_drift_diffusion: Optional[float] = None   # K_{b,sigma}
    lip_jump: Optional[float] = None              # K_beta
    bound_jump: Optional[float] = None            # C_beta

    def __post_init__(self):
        if self.dim != 1:
            raise ValueError("only state dimension 1 is supported")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be a finite positive real")


@dataclass(frozen=True)
class Generator:
    """Driver f(t,x,y,z,B) acting on the jump component only through the scalar
    aggregate B, with the structural constants used by the audits and the bounds.

    core        -- f itself, vectorized: scalars or same-shape arrays in, array out.
    gamma       -- jump weight gamma(x,e) >= 0; None means gamma == 0 (B unused).
    decay_power -- q > 0 in the decay condition f(y) <= -a*y^(q+1) + f(0).
    decay_coef  -- a(t,x) > 0.
    f0          -- f(t,x,0,0,0) >= 0.
    theta       -- dominating mark function with 0 <= gamma <= theta.
    ell         -- integrability exponent > 1 for the a priori machinery.
    """

    core: Callable[..., Array]
    decay_power: float
    decay_coef: Callable[[Array, Array], Array]
    f0: Callable[[Array, Array], Array]
    gamma: Optional[Callable[[Array, Array], Array]] = None
    theta: Optional[Callable[[Array], Array]] = None
    ell: float = 2.0
    growth_delta: float = 0.0
    lip_z: float = 0.0
    lip_u: float = 0.0
    mono_chi: float = 0.0
    trunc_level: Optional[int] = None
    y_cap: Optional[float] = None

    def __post_init__(self):
        if self.decay_power <= 0:
            raise ValueError("decay_power must be > 0")
        if self.ell <= 1:
            raise ValueError("ell must be > 1")


@dataclass(frozen=True)
class TerminalData:
    """Terminal payoff g with the explicit singular set S = {g = +inf}.

    g is the finite branch; evaluation forces +inf exactly on the singular set,
    so the invariant 'g(x) = +inf iff x in S' holds by construction.
    nu is the declared boundary-penetration constant for the jump audit (0 means
    'discover it empirically').
    """

    g: Callable[[Array], Array]
    singular_set: IntervalUnion = field(default_factory=IntervalUnion)
    nu: float = 0.0

    def evaluate(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            vals = np.broadcast_to(np.asarray(self.g(x), dtype=float), x.shape).copy()
        inside = self.singular_set.contains(x)
        vals[inside] = _INF
        return vals


@dataclass(frozen=True)
class ProblemSpec:
    """The full problem triple plus a label used for artifact fingerprinting."""

    model: ForwardModel
    gen: Generator
    terminal: TerminalData
    label: str = "unnamed"

    @property
    def horizon(self) -> float:
        return self.model.horizon

    def theta_norms(self) -> tuple[float, float]:
        """(L^2, L^ltilde) norms of theta against the jump measure (0 if no theta)."""
        if self.gen.theta is None:
            return 0.0, 0.0
        from .forward import levy_quadrature

        th = self.gen.theta
        lt = self.gen.ell / (self.gen.ell - 1.0)
        n2 = levy_quadrature(self.model.levy, lambda e: np.asarray(th(e)) ** 2, 0.0)
        nl = levy_quadrature(self.model.levy, lambda e: np.abs(th(e)) ** lt, 0.0)
        return math.sqrt(max(n2, 0.0)), nl ** (1.0 / lt)

    def fingerprint(self) -> str:
        bits = (
            self.label,
            self.model.horizon,
            self.gen.decay_power,
            self.gen.ell,
            self.gen.lip_z,
            self.gen.lip_u,
            tuple(self.terminal.singular_set.intervals),
            self.model.levy.atoms,
        )
        import hashlib

        return hashlib.sha256(repr(bits).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# driver operations
# ---------------------------------------------------------------------------

def eval_generator(gen: Generator, t, x, y, z, B):
    """Evaluate the driver; rejects non-finite inputs."""
    args = [np.asarray(v, dtype=float) for v in (t, x, y, z, B)]
    for name, v in zip("txyzB", args):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite value in argument {name!r}")
    out = np.asarray(gen.core(*args), dtype=float)
    if out.shape == ():
        return float(out)
    return out


def clamp_y(y, cap: float):
    """T_n(y) = cap * y / (|y| v cap): identity on |y| <= cap, radial clamp beyond."""
    y = np.asarray(y, dtype=float)
    return cap * y / np.maximum(np.abs(y), cap)


def truncate_generator(gen: Generator, n: int, horizon: float) -> Generator:
    """Level-n driver: f_n = (f(t,x,T_n(y),z,B) - f0) + (f0 ^ n).

    The clamp scale is n*(horizon+1), the level-n bound on the solution.  All
    structural constants are carried over; the zero-order part becomes f0 ^ n.
    """
    if n < 1:
        raise ValueError("truncation level must be >= 1")
    cap = float(n) * (float(horizon) + 1.0)
    core, f0 = gen.core, gen.f0

    def core_n(t, x, y, z, B):
        f0v = np.asarray(f0(t, x), dtype=float)
        return (np.asarray(core(t, x, clamp_y(y, cap), z, B), dtype=float) - f0v) + np.minimum(f0v, float(n))

    def f0_n(t, x):
        return np.minimum(np.asarray(f0(t, x), dtype=float), float(n))

    return replace(gen, core=core_n, f0=f0_n, trunc_level=int(n), y_cap=cap)


def truncate_terminal(term: TerminalData, n: int) -> Callable[[Array], Array]:
    """g_n = g ^ n: bounded continuous, monotone non-decreasing in n."""
    if n < 1:
        raise ValueError("truncation level must be >= 1")

    def g_n(x):
        return np.minimum(term.evaluate(x), float(n))

    return g_n


class RhoCheck(NamedTuple):
    rho: float
    passed: bool
    base: float
    eta: float


def check_rho_condition(q: float, ell: float, eta: Optional[float] = None) -> RhoCheck:
    """Balance condition between the nonlinearity and the driver integrability.

    base = 2/q + 2(1 - 1/ell) must be strictly below 1, and
    rho = base + 2*eta/ell must stay below 1 for the chosen eta.
    eta=None picks the midpoint choice rho = (1 + base)/2 when base < 1.
    """
    if not (q > 0 and ell > 1):
        raise ValueError("need q > 0 and ell > 1")
    if eta is not None and eta < 0:
        raise ValueError("eta must be >= 0")
    base = 2.0 / q + 2.0 * (1.0 - 1.0 / ell)
    if eta is None:
        eta = ell * (1.0 - base) / 4.0 if base < 1.0 else 0.0
    rho = base + 2.0 * eta / ell
    return RhoCheck(rho=rho, passed=(base < 1.0 and rho < 1.0), base=base, eta=eta)


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbePlan:
    """Sampling plan for the condition audits: counts, state box, ranges, seed."""

    n_samples: int = 512
    box: tuple[float, float] = (-5.0, 5.0)
    seed: int = 0
    y_max: float = 10.0
    z_max: float = 5.0
    b_max: float = 5.0


@dataclass
class ConditionCheck:
    condition: str
    passed: Optional[bool]          # None = reported/vacuous, no verdict
    margin: float
    witness: dict
    probes: int
    note: str = ""


@dataclass
class AuditReport:
    checks: list[ConditionCheck]

    _EXPECTED = ("A1", "A2", "A3", "B1", "B2", "B3",
                 "C2", "C3", "C4", "C5", "C6", "C7", "C8", "C9", "C10",
                 "D1", "D2", "rho")

    def __post_init__(self):
        ids = [c.condition for c in self.checks]
        if sorted(ids) != sorted(self._EXPECTED):
            raise ValueError(f"audit must cover {self._EXPECTED} exactly once, got {ids}")

    def __getitem__(self, condition: str) -> ConditionCheck:
        for c in self.checks:
            if c.condition == condition:
                return c
        raise KeyError(condition)

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def failures(self) -> list[ConditionCheck]:
        return [c for c in self.checks if c.passed is False]


def _rng(plan: ProbePlan, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((plan.seed, salt)))


def _probe_marks(levy: LevyMeasureSpec, rng: np.random.Generator, n: int) -> Array:
    """Deterministic support sweep plus random draws; atoms are taken exactly."""
    if levy.is_atomic:
        return np.asarray([e for e, m in levy.atoms if m > 0], dtype=float)
    pieces = []
    for lo, hi in levy.support:
        pieces.append(np.linspace(lo, hi, 33)[1:-1])
        pieces.append(rng.uniform(lo, hi, size=n))
    return np.concatenate(pieces) if pieces else np.asarray([])


def _pair_probes(rng, lo, hi, n):
    """Half independent pairs, half tight perturbations (resolves local slopes)."""
    x1 = rng.uniform(lo, hi, size=n)
    x2 = np.where(np.arange(n) % 2 == 0,
                  rng.uniform(lo, hi, size=n),
                  x1 + 1e-4 * rng.standard_normal(n))
    keep = np.abs(x1 - x2) > 1e-12
    return x1[keep], x2[keep]


def _quotient_check(cond, quotients, declared, points, note=""):
    quotients = np.asarray(quotients, dtype=float)
    if quotients.size == 0:
        return ConditionCheck(cond, None, math.nan, {}, 0, note="vacuous: no probes. " + note)
    i = int(np.nanargmax(quotients))
    worst = float(quotients[i])
    witness = {"point": points[i], "quotient": worst}
    if declared is None:
        ok = bool(np.isfinite(worst))
        margin = worst
        note = (note + " no declared constant; finiteness only").strip()
    else:
        ok = bool(worst <= declared * (1.0 + 1e-9) + 1e-12)
        margin = declared - worst
    return ConditionCheck(cond, ok, margin, witness, int(quotients.size), note=note)


def audit_assumptions(spec: ProblemSpec, probes: ProbePlan = ProbePlan()) -> AuditReport:
    """Sampled falsification of conditions (A), (B), (C2..C10), (D) and the rho balance.

    Every verdict is of the form "no violation found among N probes" -- a pass is
    not a proof.  Deterministic given (spec, probes.seed).
    """
    model, gen, term = spec.model, spec.gen, spec.terminal
    T = spec.horizon
    lo, hi = probes.box
    n = probes.n_samples
    checks: list[ConditionCheck] = []
    eps = 1e-9

    # --- (A) forward coefficients ------------------------------------------------
    rng = _rng(probes, 1)
    x1, x2 = _pair_probes(rng, lo, hi, max(n, 4))
    dx = np.abs(x1 - x2)
    qbs = (np.abs(np.asarray(model.drift(x1)) - np.asarray(model.drift(x2)))
           + np.abs(np.asarray(model.diffusion(x1)) - np.asarray(model.diffusion(x2)))) / dx
    checks.append(_quotient_check("A1", qbs, model.lip_drift_diffusion,
                                  list(zip(x1, x2))))

    marks = _probe_marks(model.levy, _rng(probes, 2), 64)
    if marks.size:
        X1, E = np.meshgrid(x1, marks, indexing="ij")
        X2 = np.broadcast_to(x2[:, None], X1.shape)
        wt = np.minimum(1.0, np.abs(E))
        qb = np.abs(np.asarray(model.jump_coef(X1, E)) - np.asarray(model.jump_coef(X2, E))) \
            / (np.abs(X1 - X2) * wt)
        pts = [(float(a), float(b), float(e)) for (a, b, e)
               in zip(X1.ravel(), X2.ravel(), E.ravel())]
        checks.append(_quotient_check("A2", qb.ravel(), model.lip_jump, pts))
        xs = _rng(probes, 3).uniform(lo, hi, size=n)
        XX, EE = np.meshgrid(xs, marks, indexing="ij")
        qa = np.abs(np.asarray(model.jump_coef(XX, EE))) / np.minimum(1.0, np.abs(EE))
        pts = [(float(a), float(e)) for a, e in zip(XX.ravel(), EE.ravel())]
        checks.append(_quotient_check("A3", qa.ravel(), model.bound_jump, pts))
    else:
        for cid in ("A2", "A3"):
            checks.append(ConditionCheck(cid, None, math.nan, {}, 0,
                                         note="vacuous: jump measure carries no mass"))

    # --- (B) terminal data --------------------------------------------------------
    checks.append(ConditionCheck("B1", True, math.nan, {},
                                 0, note="structural: terminal value is g(X_T) by construction"))

    rng = _rng(probes, 4)
    xr = rng.uniform(lo, hi, size=n)
    xr = xr[~term.singular_set.contains(xr)]
    if xr.size:
        gv = term.evaluate(xr)
        bad = ~np.isfinite(gv)
        ok = not bad.any()
        wit = {"point": float(xr[np.argmax(bad)])} if not ok else {"max_g": float(gv.max())}
        checks.append(ConditionCheck("B2", ok, math.nan, wit, int(xr.size),
                                     note="sampled finiteness of g on the regular set"))
    else:
        checks.append(ConditionCheck("B2", None, math.nan, {}, 0,
                                     note="vacuous: no regular probes in the box"))

    checks.append(_continuity_check(term, probes))

    # --- (C) driver structure ------------------------------------------------------
    rng = _rng(probes, 6)
    ts = rng.uniform(0.0, T, size=n)
    xs = rng.uniform(lo, hi, size=n)
    zeros = np.zeros(n)

    f0v = np.asarray(gen.f0(ts, xs), dtype=float)
    core0 = np.asarray(gen.core(ts, xs, zeros, zeros, zeros), dtype=float)
    consistent = float(np.max(np.abs(core0 - f0v) / (1.0 + np.abs(f0v))))
    ok = bool((f0v >= -eps).all() and consistent < 1e-8)
    i = int(np.argmin(f0v))
    checks.append(ConditionCheck("C2", ok, float(f0v.min()),
                                 {"point": (float(ts[i]), float(xs[i])),
                                  "core_vs_f0": consistent}, n,
                                 note="f0 >= 0 and core(...,0,0,0) == f0"))

    y1 = rng.uniform(-probes.y_max, probes.y_max, size=n)
    y2 = y1 + rng.standard_normal(n) * (0.5 + 0.1 * np.abs(y1))
    dy = y1 - y2
    keep = np.abs(dy) > 1e-9
    fy1 = np.asarray(gen.core(ts, xs, y1, zeros, zeros), dtype=float)
    fy2 = np.asarray(gen.core(ts, xs, y2, zeros, zeros), dtype=float)
    q3 = ((fy1 - fy2) * dy)[keep] / (dy[keep] ** 2)
    i = int(np.argmax(q3))
    checks.append(ConditionCheck("C3", bool(q3.max() <= gen.mono_chi + 1e-6),
                                 float(gen.mono_chi - q3.max()),
                                 {"point": (float(y1[keep][i]), float(y2[keep][i])),
                                  "quotient": float(q3.max())}, int(q3.size),
                                 note=f"monotonicity constant chi={gen.mono_chi}"))

    q4 = np.abs(fy1 - fy2)[keep] / np.abs(dy[keep])
    checks.append(_quotient_check("C4", q4, None,
                                  list(zip(y1[keep], y2[keep])),
                                  note=f"local Lipschitz estimate on |y|<={probes.y_max}"))

    z1 = rng.uniform(-probes.z_max, probes.z_max, size=n)
    z2 = rng.uniform(-probes.z_max, probes.z_max, size=n)
    dz = np.abs(z1 - z2)
    keep = dz > 1e-9
    fz = np.abs(np.asarray(gen.core(ts, xs, y1, z1, zeros)) -
                np.asarray(gen.core(ts, xs, y1, z2, zeros)))[keep] / dz[keep]
    checks.append(_quotient_check("C5", fz, gen.lip_z if gen.lip_z > 0 else None,
                                  list(zip(z1[keep], z2[keep])),
                                  note=f"declared lip_z={gen.lip_z}"))

    b1 = rng.uniform(-probes.b_max, probes.b_max, size=n)
    b2 = rng.uniform(-probes.b_max, probes.b_max, size=n)
    blo, bhi = np.minimum(b1, b2), np.maximum(b1, b2)
    db = bhi - blo
    keep = db > 1e-9
    dfb = (np.asarray(gen.core(ts, xs, y1, zeros, bhi)) -
           np.asarray(gen.core(ts, xs, y1, zeros, blo)))[keep]
    slope = dfb / db[keep]
    ok = bool((slope >= -1e-8).all() and (slope <= gen.lip_u + 1e-8).all())
    i = int(np.argmin(slope))
    checks.append(ConditionCheck("C6", ok, float(slope.min()),
                                 {"point": (float(blo[keep][i]), float(bhi[keep][i])),
                                  "slope_range": (float(slope.min()), float(slope.max()))},
                                 int(slope.size),
                                 note=f"nondecreasing in B, slope <= lip_u={gen.lip_u}"))

    if gen.gamma is not None and marks.size:
        XX, EE = np.meshgrid(xs, marks, indexing="ij")
        gv = np.asarray(gen.gamma(XX, EE), dtype=float)
        tv = np.asarray(gen.theta(EE), dtype=float) if gen.theta is not None \
            else np.full_like(gv, np.inf)
        viol = np.maximum(-gv, gv - tv)
        i = int(np.argmax(viol))
        ok = bool(viol.ravel()[i] <= eps)
        checks.append(ConditionCheck("C7", ok, float(-viol.ravel()[i]),
                                     {"point": (float(XX.ravel()[i]), float(EE.ravel()[i]))},
                                     int(gv.size), note="0 <= gamma <= theta"))
    else:
        checks.append(ConditionCheck("C7", True, 0.0, {}, 0,
                                     note="gamma is identically 0"))

    ypos = rng.uniform(0.0, probes.y_max, size=n)
    av = np.asarray(gen.decay_coef(ts, xs), dtype=float)
    lhs = np.asarray(gen.core(ts, xs, ypos, z1, b1), dtype=float)
    rhs = -av * ypos ** (gen.decay_power + 1.0) + np.asarray(gen.core(ts, xs, zeros, z1, b1), dtype=float)
    gap = lhs - rhs
    i = int(np.argmax(gap))
    scale = 1.0 + np.abs(rhs[i])
    checks.append(ConditionCheck("C8", bool(gap[i] <= 1e-7 * scale), float(-gap[i]),
                                 {"point": (float(ts[i]), float(xs[i]), float(ypos[i]))}, n,
                                 note=f"decay f(y) <= -a*y^(q+1)+f(0,z,B), q={gen.decay_power}"))

    with np.errstate(all="ignore"):
        growth = av ** (-1.0 / gen.decay_power) + f0v
    ratio = growth / (1.0 + np.abs(xs) ** gen.growth_delta)
    ok = bool(np.all(np.isfinite(ratio)))
    i = int(np.argmax(ratio)) if ok else int(np.argmax(~np.isfinite(ratio)))
    checks.append(ConditionCheck("C9", ok, float(np.nanmax(ratio)),
                                 {"point": (float(ts[i]), float(xs[i]))}, n,
                                 note=f"polynomial growth with delta={gen.growth_delta}"))

    try:
        l2, lt = spec.theta_norms()
        checks.append(ConditionCheck("C10", bool(np.isfinite(l2) and np.isfinite(lt)),
                                     lt, {"theta_l2": l2, "theta_ltilde": lt}, 0,
                                     note=f"ell={gen.ell}, ltilde={gen.ell/(gen.ell-1.0):.4g}"))
    except Exception as exc:  # quadrature failure is a verdict, not a crash
        checks.append(ConditionCheck("C10", False, math.nan, {"error": str(exc)}, 0))

    # --- (D) singular set vs jumps -------------------------------------------------
    S = term.singular_set
    if S.is_empty:
        for cid in ("D1", "D2"):
            checks.append(ConditionCheck(cid, None, math.nan, {}, 0,
                                         note="vacuous: empty singular set"))
    else:
        bpts = S.boundary()
        checks.append(ConditionCheck("D1", True, math.nan,
                                     {"boundary": bpts.tolist()}, 0,
                                     note="closed by construction; boundary finite"
                                          + ("; boundary empty (S is the whole line)"
                                             if bpts.size == 0 else "")))
        checks.append(_jump_invariance_check(model, term, probes, marks))

    rc = check_rho_condition(gen.decay_power, gen.ell)
    checks.append(ConditionCheck("rho", rc.passed, 1.0 - rc.rho,
                                 {"rho": rc.rho, "base": rc.base, "eta": rc.eta}, 0,
                                 note=f"q={gen.decay_power}, ell={gen.ell}"))

    return AuditReport(checks=checks)


def _continuity_check(term: TerminalData, probes: ProbePlan) -> ConditionCheck:
    """B3: g finite-continuous on the regular set and blowing up toward the boundary."""
    lo, hi = probes.box
    S = term.singular_set
    grid = np.linspace(lo, hi, max(probes.n_samples, 64))
    reg = grid[~S.contains(grid)]
    if reg.size < 4:
        return ConditionCheck("B3", None, math.nan, {}, int(reg.size),
                              note="vacuous: not enough regular probes")
    gv = term.evaluate(reg)
    if np.isnan(gv).any():
        return ConditionCheck("B3", False, math.nan,
                              {"point": float(reg[np.argmax(np.isnan(gv))])},
                              int(reg.size), note="NaN value on the regular set")
    blow_ok, wit = True, {}
    for b in S.boundary():
        for side in (-1.0, 1.0):
            ds = b + side * np.asarray([0.4, 0.2, 0.1, 0.05, 0.025])
            ds = ds[(ds >= lo) & (ds <= hi)]
            ds = ds[~S.contains(ds)]
            if ds.size < 3:
                continue
            seq = term.evaluate(ds)
            if not np.all(np.diff(seq) >= -1e-9 * (1.0 + np.abs(seq[:-1]))):
                blow_ok = False
                wit = {"boundary": float(b), "approach": ds.tolist(), "values": seq.tolist()}
    return ConditionCheck("B3", blow_ok, math.nan, wit, int(reg.size),
                          note="finite on probes; monotone blow-up toward the boundary "
                               "(heuristic, not a proof of continuity)")


def _jump_invariance_check(model: ForwardModel, term: TerminalData,
                           probes: ProbePlan, marks: Array) -> ConditionCheck:
    """D2: jumps keep S invariant and push the boundary inward by at least nu."""
    S = term.singular_set
    if marks.size == 0:
        return ConditionCheck("D2", None, math.nan, {}, 0,
                              note="vacuous: jump measure carries no mass")
    rng = _rng(probes, 9)
    lo, hi = probes.box
    xs = rng.uniform(lo, hi, size=probes.n_samples)
    xs = np.concatenate([xs[S.contains(xs)], S.boundary()])
    if xs.size == 0:
        return ConditionCheck("D2", None, math.nan, {}, 0,
                              note="vacuous: no singular probes in the box")
    XX, EE = np.meshgrid(xs, marks, indexing="ij")
    targets = XX + np.asarray(model.jump_coef(XX, EE), dtype=float)
    stay = S.contains(targets)
    if not stay.all():
        i = int(np.argmax(~stay.ravel()))
        return ConditionCheck("D2", False, math.nan,
                              {"x": float(XX.ravel()[i]), "mark": float(EE.ravel()[i]),
                               "target": float(targets.ravel()[i])},
                              int(stay.size), note="jump exits the singular set")
    bpts = S.boundary()
    min_pen = _INF
    wit: dict = {}
    if bpts.size:
        BB, EE = np.meshgrid(bpts, marks, indexing="ij")
        tgt = BB + np.asarray(model.jump_coef(BB, EE), dtype=float)
        pen = S.distance_to_boundary(tgt)
        i = int(np.argmin(pen.ravel()))
        min_pen = float(pen.ravel()[i])
        wit = {"x": float(BB.ravel()[i]), "mark": float(EE.ravel()[i]),
               "penetration": min_pen}
    need = term.nu if term.nu > 0 else 0.0
    ok = min_pen >= need - 1e-12 and min_pen > 0
    note = (f"no violation among {stay.size} probes; boundary penetration >= "
            f"{min_pen:.6g} (declared nu={term.nu})")
    return ConditionCheck("D2", bool(ok), min_pen - need, wit, int(stay.size), note=note)


# ---------------------------------------------------------------------------
# a priori bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AprioriBound:
    """Monte-Carlo form of the a priori estimate, plus the sharp constant-coefficient
    bound (q*a0*(T-t))^(-1/q) whenever the decay coefficient is constant and f0 == 0."""

    value: float
    sharp: Optional[float]
    integrand_mean: float


def apriori_bound(spec: ProblemSpec, t: float, x: float, k_cal: float = 1.0, *,
                  n_paths: int = 2000, n_steps: int = 200, seed: int = 0) -> AprioriBound:
    """Upper bound on the minimal solution at (t, x), independent of the terminal data.

    value = k_cal * (T-t)^(-1-1/q) * ( E int_t^T [ (1/(q a_r))^(1/q)
            + (T-r)^(1+1/q) f0_r ]^ell dr )^(1/ell), Monte-Carlo estimate.
    """
    T = spec.horizon
    if not t < T:
        raise ValueError("need t < T")
    from .forward import TimeGrid, simulate_paths

    q, ell = spec.gen.decay_power, spec.gen.ell
    grid = TimeGrid(t, T, n_steps)
    bundle = simulate_paths(spec.model, t, x, grid, n_paths, seed)
    nodes = grid.nodes
    tt = np.broadcast_to(nodes[None, :], bundle.x_paths.shape)
    with np.errstate(all="ignore"):
        a_v = np.asarray(spec.gen.decay_coef(tt, bundle.x_paths), dtype=float)
        f0_v = np.asarray(spec.gen.f0(tt, bundle.x_paths), dtype=float)
        integ = ((1.0 / (q * a_v)) ** (1.0 / q)
                 + (T - tt) ** (1.0 + 1.0 / q) * f0_v) ** ell
    per_path = np.trapezoid(integ, nodes, axis=1)
    mean = float(per_path.mean())
    value = k_cal * (T - t) ** (-1.0 - 1.0 / q) * mean ** (1.0 / ell)

    sharp = None
    tp = np.linspace(t, T, 9)
    xp = np.linspace(-abs(x) - 2.0, abs(x) + 2.0, 9)
    TT, XP = np.meshgrid(tp, xp, indexing="ij")
    a_probe = np.asarray(spec.gen.decay_coef(TT, XP), dtype=float)
    f0_probe = np.asarray(spec.gen.f0(TT, XP), dtype=float)
    if np.ptp(a_probe) <= 1e-12 * (1.0 + abs(float(a_probe.flat[0]))) and np.all(f0_probe == 0.0):
        a0 = float(a_probe.flat[0])
        sharp = (q * a0 * (T - t)) ** (-1.0 / q)
    return AprioriBound(value=value, sharp=sharp, integrand_mean=mean)
