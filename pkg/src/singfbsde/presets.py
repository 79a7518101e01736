"""Named driver forms and ready-made problem configurations.

Driver presets:
  power        f = -a(t,x) * y|y|^q + f0(t,x) [+ c_B * B]
  liquidation  f = -y|y|^q / (q * eta(t,x)^q) + f0(t,x)
  heat         f = 0 (outside the singular framework; the decay audit is
               expected to fail for it)

The full problem presets below double as embedded config files for the CLI
(`--config preset:NAME`).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .model import Generator

Array = np.ndarray


def _const(c: float) -> Callable:
    def fn(*args):
        shape = np.broadcast_shapes(*[np.shape(a) for a in args]) if args else ()
        return np.full(shape, float(c))
    fn.source = repr(float(c))
    return fn


def power_generator(q: float, a: Callable | float = 1.0, f0: Callable | float = 0.0,
                    *, b_coupling: float = 0.0,
                    gamma: Optional[Callable] = None, theta: Optional[Callable] = None,
                    ell: float = 2.0, growth_delta: float = 0.0,
                    mono_chi: float = 0.0) -> Generator:
    a_fn = a if callable(a) else _const(a)
    f0_fn = f0 if callable(f0) else _const(f0)

    def core(t, x, y, z, B):
        y = np.asarray(y, dtype=float)
        return (-np.asarray(a_fn(t, x), dtype=float) * y * np.abs(y) ** q
                + np.asarray(f0_fn(t, x), dtype=float)
                + b_coupling * np.asarray(B, dtype=float))

    return Generator(core=core, decay_power=q, decay_coef=a_fn, f0=f0_fn,
                     gamma=gamma, theta=theta, ell=ell, growth_delta=growth_delta,
                     lip_z=0.0, lip_u=b_coupling, mono_chi=mono_chi)


def liquidation_generator(q: float, eta: Callable | float = 1.0,
                          f0: Callable | float = 0.0, *,
                          gamma: Optional[Callable] = None,
                          theta: Optional[Callable] = None,
                          ell: float = 2.0, growth_delta: float = 0.0) -> Generator:
    eta_fn = eta if callable(eta) else _const(eta)
    f0_fn = f0 if callable(f0) else _const(f0)

    def a_fn(t, x):
        return 1.0 / (q * np.asarray(eta_fn(t, x), dtype=float) ** q)

    def core(t, x, y, z, B):
        y = np.asarray(y, dtype=float)
        return (-y * np.abs(y) ** q / (q * np.asarray(eta_fn(t, x), dtype=float) ** q)
                + np.asarray(f0_fn(t, x), dtype=float))

    return Generator(core=core, decay_power=q, decay_coef=a_fn, f0=f0_fn,
                     gamma=gamma, theta=theta, ell=ell, growth_delta=growth_delta)


def heat_generator() -> Generator:
    def core(t, x, y, z, B):
        shape = np.broadcast_shapes(*[np.shape(v) for v in (t, x, y, z, B)])
        return np.zeros(shape)

    return Generator(core=core, decay_power=1.0, decay_coef=_const(1e-9),
                     f0=_const(0.0))


GENERATOR_PRESETS = {"power": power_generator, "liquidation": liquidation_generator,
                     "heat": heat_generator}


# ---------------------------------------------------------------------------
# embedded problem configs
# ---------------------------------------------------------------------------

PRESET_CONFIGS: dict[str, str] = {
    # deterministic oracle problem: sigma = beta = 0, f = -y|y|^2, g = inf ^ n
    "power-oracle": """
[run]
label = power-oracle
t = 0.0
x = 0.0
seed = 0

[model]
drift = 0
sigma = 0
horizon = 1.0

[generator]
preset = power
q = 2.0
a = 1.0
f0 = 0
ell = 1.25

[terminal]
g = 0
singular_set = (-inf, inf)

[forward]
n_paths = 64
n_steps = 1000

[bsde]
schedule = 10, 20, 40, 80, 160, 320
tol = 1e-3
dt_max = 1e-3

[ipde]
x_min = -2.0
x_max = 2.0
nx = 11
nt = 1000
schedule = 10, 20, 40, 80, 160, 320
tol = 1e-3
dt_max = 1e-3

[verify]
audit_hard = false
blowup_x =
mode = absolute
abs_tol = 2e-3
eps_sweep = 0.2, 0.1, 0.05, 0.02, 0.01, 0.005
divergence_threshold = 8.0
""",
    # singular ray with small diffusion: blow-up rate study at x0 = 2
    "singular-ray": """
[run]
label = singular-ray
t = 0.0
x = 2.0
seed = 0

[model]
drift = 0
sigma = 0.1
horizon = 1.0

[generator]
preset = power
q = 2.0
a = 1.0
f0 = 0
ell = 1.25

[terminal]
g = 1 / (1 - x)
singular_set = [1, inf)

[forward]
n_paths = 4096
n_steps = 400

[bsde]
schedule = 10, 40, 160, 320
tol = 5e-3
dt_max = 5e-4

[ipde]
x_min = -4.0
x_max = 8.0
nx = 301
nt = 2000
schedule = 10, 40, 160, 320
tol = 5e-3
dt_max = 5e-4

[verify]
audit_hard = false
blowup_x = 2.0
blowup_window = 0.01, 0.3
x_singular = 3.0
mode = relative
rel_tol = 0.05
eps_sweep = 0.2, 0.1, 0.05, 0.02, 0.01, 0.005
divergence_threshold = 8.0
""",
    # rightward jumps into the singular ray: terminal-behavior theorem setting
    "terminal-regular": """
[run]
label = terminal-regular
t = 0.0
x = 0.0
seed = 0

[model]
drift = 0
sigma = 0.15
beta = 0.5 * min(1, abs(e))
levy_atoms = 1: 0.5
horizon = 1.0
c_beta = 0.5
k_beta = 0.0
k_bsigma = 0.0

[generator]
preset = power
q = 5.0
a = 1.0
f0 = 0
ell = 1.25

[terminal]
g = 1 / (1 - x)
singular_set = [1, inf)
nu = 0.5

[forward]
n_paths = 4096
n_steps = 400
delta_cut = 0.5

[bsde]
schedule = 10, 40, 160, 320
tol = 5e-3
dt_max = 5e-4

[ipde]
x_min = -5.0
x_max = 7.0
nx = 361
nt = 2000
schedule = 10, 40, 160, 320
tol = 5e-3
dt_max = 5e-4

[verify]
x_regular = 0.0
x_singular = 3.0
mode = relative
rel_tol = 0.05
eps_sweep = 0.2, 0.1, 0.05, 0.025, 0.01, 0.005, 0.002
divergence_threshold = 2.0
""",
    # smooth bounded problem for cross-validation: liquidation driver, two-atom jumps
    "liquidation-smooth": """
[run]
label = liquidation-smooth
t = 0.0
x = 0.0
seed = 0

[model]
drift = 0
sigma = 0.3
beta = 0.3 * min(1, abs(e)) * e / abs(e)
levy_atoms = 1: 0.5, -1: 0.5
horizon = 1.0

[generator]
preset = liquidation
q = 1.0
eta = 1.0
f0 = 0
ell = 1.25

[terminal]
g = max(0.5, min(4, 2 + x))
singular_set =
nu = 0.0

[forward]
n_paths = 100000
n_steps = 50
delta_cut = 0.5

[bsde]
schedule = 10
tol = 1e-3

[ipde]
x_min = -6.0
x_max = 6.0
nx = 400
nt = 1000
schedule = 10
tol = 1e-3

[verify]
audit_hard = false
points = 0,-2; 0,-1.5; 0,-1; 0,-0.5; 0,0; 0,0.5; 0,1; 0,1.5; 0,2
mode = relative
rel_tol = 0.05
blowup_x =
""",
}
