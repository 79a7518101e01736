import numpy as np
import pytest

from singfbsde.model import (ForwardModel, IntervalUnion, LevyMeasureSpec,
                             ProblemSpec, TerminalData)
from singfbsde.presets import power_generator


def const(c):
    def fn(*args):
        shape = np.broadcast_shapes(*[np.shape(a) for a in args]) if args else ()
        return np.full(shape, float(c))
    return fn


def zero_fn(*args):
    shape = np.broadcast_shapes(*[np.shape(a) for a in args])
    return np.zeros(shape)


def make_model(drift=None, sigma=None, beta=None, levy=None, horizon=1.0, **kw):
    return ForwardModel(
        drift=drift or const(0.0),
        diffusion=sigma or const(0.0),
        jump_coef=beta or zero_fn,
        levy=levy if levy is not None else LevyMeasureSpec.from_atoms([]),
        horizon=horizon, **kw)


def whole_line_singular():
    return TerminalData(g=const(0.0), singular_set=IntervalUnion([(-np.inf, np.inf)]))


@pytest.fixture
def power_spec():
    """Deterministic power driver, q=2, a=1, f0=0, singular everywhere."""
    return ProblemSpec(model=make_model(), gen=power_generator(2.0),
                       terminal=whole_line_singular(), label="power-det")


@pytest.fixture
def two_atom_levy():
    return LevyMeasureSpec.from_atoms([(1.0, 0.5), (-1.0, 0.5)])
