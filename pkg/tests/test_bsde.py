import dataclasses
import math

import numpy as np
import pytest

from singfbsde.bsde import (McConfig, RegressionBasis, backward_sweep,
                            condexp_regress, monotone_limit, zu_weighted_norm)
from singfbsde.forward import TimeGrid, simulate_paths
from singfbsde.model import (ProblemSpec, TerminalData, truncate_generator,
                             truncate_terminal)
from singfbsde.presets import power_generator
from singfbsde.verify import ode_oracle

from conftest import const, make_model


def brownian_bundle(n_paths=20000, n_steps=25, seed=1, sigma=1.0):
    mod = make_model(sigma=const(sigma))
    return simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, n_steps), n_paths, seed=seed)


class TestCondexp:
    def test_constant_values_unchanged(self):
        b = brownian_bundle(500, 5)
        v = np.full(500, 3.25)
        out = condexp_regress(b, v, RegressionBasis(), 3)
        assert np.array_equal(out, v)

    def test_martingale_projection(self):
        b = brownian_bundle()
        v = b.x_paths[:, 10]
        fit = condexp_regress(b, v, RegressionBasis(kind="polynomial", degree=1), 9)
        resid = fit - b.x_paths[:, 9]
        # the projected martingale increment has scale std(dW)/sqrt(N)
        se = b.dw[:, 9].std(ddof=1) / math.sqrt(b.n_paths)
        assert abs(resid.mean()) < 3 * se
        # pathwise the fit should track the previous state closely
        assert np.abs(resid).max() < 0.05

    def test_independent_noise_projects_to_zero(self):
        b = brownian_bundle()
        v = b.dw[:, 10]
        fit = condexp_regress(b, v, RegressionBasis(), 10)
        assert np.abs(fit).max() < 3 * (1.0 / math.sqrt(b.n_paths)) * 5

    def test_piecewise_linear_basis(self):
        b = brownian_bundle(30000, 10)
        states = b.x_paths[:, 8]
        v = states ** 2 + 0.05 * b.dw[:, 8]
        fit = condexp_regress(b, v, RegressionBasis(kind="piecewise_linear", n_bins=12), 8)
        mask = np.abs(states) < 1.0
        assert np.abs(fit[mask] - states[mask] ** 2).max() < 0.05

    def test_rejects_non_finite(self):
        b = brownian_bundle(100, 4)
        with pytest.raises(ValueError):
            condexp_regress(b, np.full(100, np.nan), RegressionBasis(), 1)


class TestBackwardSweep:
    def test_martingale_case(self, two_atom_levy):
        # f = 0: Y is the martingale closing g(X_T) = X_T
        mod = make_model(sigma=const(0.5), beta=lambda x, e: e * np.ones_like(x),
                         levy=two_atom_levy, horizon=1.0)
        bundle = simulate_paths(mod, 0.0, 0.7, TimeGrid(0, 1, 25), 40000, seed=5,
                                delta_cut=0.5)
        from singfbsde.presets import heat_generator
        gen = truncate_generator(heat_generator(), 50, 1.0)
        sol = backward_sweep(bundle, gen, lambda x: np.asarray(x, float) + 10.0,
                             RegressionBasis())
        se = bundle.x_paths[:, -1].std(ddof=1) / math.sqrt(bundle.n_paths)
        assert abs(sol.u_root - 10.7) < 3 * se + 1e-3

    def test_deterministic_power_oracle(self, power_spec):
        bundle = simulate_paths(power_spec.model, 0.0, 0.0, TimeGrid(0, 1, 1000),
                                8, seed=3)
        gen10 = truncate_generator(power_spec.gen, 10, 1.0)
        g10 = truncate_terminal(power_spec.terminal, 10)
        sol = backward_sweep(bundle, gen10, g10, RegressionBasis())
        assert abs(sol.u_root - ode_oracle(2, 1, 0, 10, 1, 0)) < 1e-3

    def test_bound_holds_exactly(self, power_spec):
        bundle = simulate_paths(power_spec.model, 0.0, 0.0, TimeGrid(0, 1, 200),
                                8, seed=3)
        gen = truncate_generator(power_spec.gen, 4, 1.0)
        sol = backward_sweep(bundle, gen, truncate_terminal(power_spec.terminal, 4),
                             RegressionBasis())
        assert sol.y_vals.max() <= 4 * (1.0 + 1.0)
        assert sol.y_vals.min() >= 0.0

    def test_explicit_mode_is_euler(self, power_spec):
        # sigma = beta = 0, state-independent driver: the sweep must reproduce
        # explicit Euler on y' = -f_n(y) bitwise
        bundle = simulate_paths(power_spec.model, 0.0, 0.0, TimeGrid(0, 1, 50),
                                4, seed=0)
        gen = truncate_generator(power_spec.gen, 10, 1.0)
        sol = backward_sweep(bundle, gen, truncate_terminal(power_spec.terminal, 10),
                             RegressionBasis(), y_update="explicit")
        y = 10.0
        for _ in range(50):
            y = y + (1.0 / 50) * (-y * abs(y) ** 2)
            y = min(max(y, 0.0), 20.0)
        assert sol.u_root == y

    def test_euler_refinement_first_order(self, power_spec):
        errs = []
        for n_steps in (200, 400, 800):
            bundle = simulate_paths(power_spec.model, 0.0, 0.0,
                                    TimeGrid(0, 1, n_steps), 4, seed=0)
            gen = truncate_generator(power_spec.gen, 10, 1.0)
            sol = backward_sweep(bundle, gen,
                                 truncate_terminal(power_spec.terminal, 10),
                                 RegressionBasis(), y_update="explicit")
            errs.append(abs(sol.u_root - ode_oracle(2, 1, 0, 10, 1, 0)))
        ratios = [errs[i] / errs[i + 1] for i in range(2)]
        assert all(1.7 < r < 2.5 for r in ratios)

    def test_clamp_consistency(self, power_spec):
        # removing the clamp barely moves a well-resolved run
        bundle = simulate_paths(power_spec.model, 0.0, 0.0, TimeGrid(0, 1, 500),
                                8, seed=3)
        gen = truncate_generator(power_spec.gen, 10, 1.0)
        g10 = truncate_terminal(power_spec.terminal, 10)
        clamped = backward_sweep(bundle, gen, g10, RegressionBasis())
        free = backward_sweep(bundle, dataclasses.replace(gen, y_cap=None), g10,
                              RegressionBasis())
        assert abs(clamped.u_root - free.u_root) < 1e-6

    def test_comparison_in_terminal_data(self, two_atom_levy):
        mod = make_model(sigma=const(0.3), beta=lambda x, e: 0.4 * e * np.ones_like(x),
                         levy=two_atom_levy, horizon=1.0)
        spec = ProblemSpec(model=mod, gen=power_generator(1.0, a=0.5),
                           terminal=TerminalData(g=const(0.0)))
        bundle = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 40), 20000, seed=7,
                                delta_cut=0.5)
        gen = truncate_generator(spec.gen, 10, 1.0)
        g_lo = lambda x: 1.0 + 0.5 * np.sin(np.asarray(x, float))
        g_hi = lambda x: 1.4 + 0.5 * np.sin(np.asarray(x, float))
        lo = backward_sweep(bundle, gen, g_lo, RegressionBasis())
        hi = backward_sweep(bundle, gen, g_hi, RegressionBasis())
        d = hi.y_vals[:, 1] - lo.y_vals[:, 1]
        se = d.std(ddof=1) / math.sqrt(len(d))
        assert hi.u_root >= lo.u_root - 3 * se

    def test_b_term_feeds_driver(self, two_atom_levy):
        # with a pure-coupling driver f = c*B, toggling gamma must move u
        mod = make_model(sigma=const(0.2), beta=lambda x, e: 0.5 * e * np.ones_like(x),
                         levy=two_atom_levy, horizon=1.0)
        gamma = lambda x, e: np.where(np.asarray(e) > 0,
                                      np.minimum(1, np.abs(e)), 0.0) * np.ones_like(x)
        bundle = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 40), 30000, seed=9,
                                delta_cut=0.5, gamma=gamma)
        gen = power_generator(1.0, a=1e-9, b_coupling=0.8,
                              gamma=gamma, theta=lambda e: np.minimum(1, np.abs(e)))
        gen10 = truncate_generator(gen, 10, 1.0)
        g = lambda x: np.maximum(0.0, np.minimum(2.0, np.asarray(x, float) + 1.0))
        sol = backward_sweep(bundle, gen10, g, RegressionBasis())
        assert np.abs(sol.b_vals).max() > 0.0
        base = backward_sweep(
            simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 40), 30000, seed=9,
                           delta_cut=0.5, gamma=None),
            truncate_generator(power_generator(1.0, a=1e-9), 10, 1.0),
            g, RegressionBasis())
        assert abs(sol.u_root - base.u_root) > 5 * sol.u_se


class TestMonotoneLimit:
    def test_power_limit(self, power_spec):
        mc = McConfig(n_paths=8, seed=0, dt_max=1e-3)
        lim = monotone_limit(power_spec, 0.0, 0.0, [10, 20, 40, 80, 160, 320],
                             1e-3, mc)
        assert lim.converged and lim.monotone_ok
        assert abs(lim.u_limit - 2 ** -0.5) < 1e-3
        assert all(b >= a - 1e-12 for a, b in zip(lim.u_values, lim.u_values[1:]))

    def test_bounded_g_saturates(self):
        mod = make_model(sigma=const(0.3))
        spec = ProblemSpec(model=mod, gen=power_generator(1.0, a=0.5),
                           terminal=TerminalData(g=const(3.0)))
        mc = McConfig(n_paths=4000, n_steps=50, seed=1)
        lim = monotone_limit(spec, 0.0, 0.0, [2, 4, 8, 16], 1e-12, mc)
        # once n >= sup g = 3, truncation is inactive and levels coincide
        assert lim.u_values[1] == lim.u_values[2] == lim.u_values[3]

    def test_schedule_validation(self, power_spec):
        with pytest.raises(ValueError):
            monotone_limit(power_spec, 0.0, 0.0, [10, 10], 1e-3, McConfig(n_paths=4))


class TestZuNorm:
    def test_zero_fields(self):
        from singfbsde.bsde import TruncatedSolution
        times = np.linspace(0, 1, 11)
        zeros = np.zeros((4, 10))
        sol = TruncatedSolution(n=5, y_vals=np.zeros((4, 11)), z_vals=zeros,
                                b_vals=zeros, u_root=0.0, times=times,
                                meta={"ell": 2.0})
        assert zu_weighted_norm(sol, 0.5) == 0.0

    def test_constant_z_closed_form(self):
        # f = 0, g(x) = x, sigma = 1: Z == 1, so the statistic is
        # (T^(1+rho)/(1+rho))^(ell/2)
        mod = make_model(sigma=const(1.0))
        bundle = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 50), 40000, seed=2)
        from singfbsde.presets import heat_generator
        gen = truncate_generator(heat_generator(), 1000, 1.0)
        sol = backward_sweep(bundle, gen, lambda x: np.asarray(x, float) + 10.0,
                             RegressionBasis(degree=1))
        rho, ell = 0.5, 2.0
        expected = (1.0 / (1 + rho)) ** (ell / 2.0)
        assert zu_weighted_norm(sol, rho, ell=ell) == pytest.approx(expected, rel=0.05)

    def test_rho_domain(self, power_spec):
        bundle = simulate_paths(power_spec.model, 0.0, 0.0, TimeGrid(0, 1, 10),
                                4, seed=0)
        gen = truncate_generator(power_spec.gen, 5, 1.0)
        sol = backward_sweep(bundle, gen, truncate_terminal(power_spec.terminal, 5),
                             RegressionBasis())
        with pytest.raises(ValueError):
            zu_weighted_norm(sol, 1.0)


class TestReplay:
    def test_sweep_on_reloaded_bundle_is_identical(self, tmp_path, two_atom_levy):
        from singfbsde.forward import load_bundle, save_bundle
        mod = make_model(sigma=const(0.4), beta=lambda x, e: 0.3 * e * np.ones_like(x),
                         levy=two_atom_levy, horizon=1.0)
        gamma = lambda x, e: np.minimum(1, np.abs(e)) * np.ones_like(x)
        bundle = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 500, seed=12,
                                delta_cut=0.5, gamma=gamma)
        save_bundle(bundle, tmp_path / "paths.bin")
        replay = load_bundle(tmp_path / "paths.bin")
        gen = truncate_generator(power_generator(1.0, a=0.5), 5, 1.0)
        g = lambda x: np.minimum(3.0, np.abs(np.asarray(x, float)) + 1.0)
        a = backward_sweep(bundle, gen, g, RegressionBasis())
        b = backward_sweep(replay, gen, g, RegressionBasis())
        assert a.u_root == b.u_root
        assert np.array_equal(a.y_vals, b.y_vals)
