import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singfbsde.forward import (TimeGrid, build_jump_sampler, bundle_summary_rows,
                               graded_time_grid, levy_quadrature, load_bundle,
                               moment_check, save_bundle, simulate_paths)
from singfbsde.model import LevyMeasureSpec

from conftest import const, make_model


class TestTimeGrid:
    def test_uniform_nodes(self):
        g = TimeGrid(0.0, 1.0, 4)
        assert np.allclose(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
        assert g.nodes[-1] == 1.0

    def test_custom_nodes_validation(self):
        with pytest.raises(ValueError):
            TimeGrid.from_nodes([0.0, 0.5, 0.4, 1.0])

    def test_graded_grid_resolves_terminal_layer(self):
        g = graded_time_grid(0.0, 1.0, 320, 2.0, 1.0, dt_max=1e-3)
        dts = g.dts
        assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
        assert dts[-1] < 1e-5          # finest step at the terminal side
        assert dts.max() <= 1e-3 + 1e-12
        assert len(dts) < 1500         # grading keeps the count modest


class TestJumpSampler:
    def test_atom_beyond_cut(self):
        lev = LevyMeasureSpec.from_atoms([(1.0, 2.0)])
        s = build_jump_sampler(lev, 0.5)
        assert s.total_rate == 2.0

    def test_density_tail_rate(self):
        lev = LevyMeasureSpec.from_density(lambda e: e ** -1.5, [(0.0, 1.0)],
                                           tail_mass=lambda d: 2.0 * (d ** -0.5 - 1.0))
        s = build_jump_sampler(lev, 0.25)
        assert s.total_rate == pytest.approx(2.0, rel=1e-9)

    def test_cut_beyond_support_warns(self):
        lev = LevyMeasureSpec.from_atoms([(1.0, 2.0)])
        with pytest.warns(UserWarning):
            s = build_jump_sampler(lev, 2.0)
        assert s.total_rate == 0.0 and s.no_tail

    def test_small_variance_shrinks_with_cut(self):
        lev = LevyMeasureSpec.from_density(lambda e: e ** -1.5, [(0.0, 1.0)])
        v = [build_jump_sampler(lev, d).small_jump_variance for d in (0.5, 0.25, 0.1)]
        assert v[0] > v[1] > v[2] > 0

    def test_mark_draws_match_restriction(self):
        lev = LevyMeasureSpec.from_atoms([(1.0, 3.0), (-1.0, 1.0), (0.1, 9.0)])
        s = build_jump_sampler(lev, 0.5)
        rng = np.random.default_rng(0)
        marks = s.draw_marks(rng, 40000)
        assert set(np.unique(marks)) == {-1.0, 1.0}
        frac = (marks == 1.0).mean()
        assert frac == pytest.approx(0.75, abs=0.02)


class TestLevyQuadrature:
    def test_atoms_square(self):
        lev = LevyMeasureSpec.from_atoms([(1.0, 1.0), (-1.0, 1.0)])
        assert levy_quadrature(lev, lambda e: e ** 2, 0.0) == 2.0

    def test_zero_function(self, two_atom_levy):
        assert levy_quadrature(two_atom_levy, lambda e: 0.0 * e, 0.0) == 0.0

    def test_density_identity(self):
        lev = LevyMeasureSpec.from_density(lambda e: e ** -1.5, [(0.0, 1.0)])
        assert levy_quadrature(lev, lambda e: e, 0.0) == pytest.approx(2.0, rel=1e-7)

    @given(st.floats(0.01, 0.9))
    @settings(max_examples=30, deadline=None)
    def test_tail_mass_decreases_with_cut(self, cut):
        lev = LevyMeasureSpec.from_density(lambda e: e ** -1.5, [(0.0, 1.0)])
        big = levy_quadrature(lev, lambda e: np.ones_like(np.asarray(e, float)), cut)
        small = levy_quadrature(lev, lambda e: np.ones_like(np.asarray(e, float)),
                                min(0.95, cut * 1.5))
        assert big >= small - 1e-10


class TestSimulation:
    def test_pure_drift(self):
        mod = make_model(drift=const(1.0))
        b = simulate_paths(mod, 0.0, 2.0, TimeGrid(0, 1, 100), 5, seed=1)
        assert np.allclose(b.x_paths[:, -1], 3.0)

    def test_constant_paths_without_coefficients(self):
        b = simulate_paths(make_model(), 0.0, 1.5, TimeGrid(0, 1, 16), 4, seed=1)
        assert np.all(b.x_paths == 1.5)
        assert np.all(b.m_gamma == 0.0)

    def test_seed_reproducibility(self, two_atom_levy):
        mod = make_model(sigma=const(0.5), beta=lambda x, e: e * np.ones_like(x),
                         levy=two_atom_levy)
        kw = dict(delta_cut=0.5, gamma=lambda x, e: np.minimum(1, np.abs(e)) * np.ones_like(x))
        a = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 300, seed=9, **kw)
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 300, seed=9, **kw)
        assert np.array_equal(a.x_paths, b.x_paths)
        assert np.array_equal(a.dw, b.dw)
        assert np.array_equal(a.m_gamma, b.m_gamma)

    def test_threads_do_not_change_output(self, two_atom_levy):
        mod = make_model(sigma=const(0.5), beta=lambda x, e: e * np.ones_like(x),
                         levy=two_atom_levy)
        a = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 10), 40000, seed=4,
                           delta_cut=0.5, threads=1)
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 10), 40000, seed=4,
                           delta_cut=0.5, threads=4)
        assert np.array_equal(a.x_paths, b.x_paths)

    def test_compensated_jumps_are_mean_zero(self, two_atom_levy):
        mod = make_model(beta=lambda x, e: e * np.ones_like(x), levy=two_atom_levy)
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 50), 100000, seed=2,
                           delta_cut=0.5)
        final = b.x_paths[:, -1]
        se = final.std(ddof=1) / np.sqrt(len(final))
        assert abs(final.mean()) < 3 * se

    def test_m_gamma_zero_when_gamma_zero(self, two_atom_levy):
        mod = make_model(beta=lambda x, e: e * np.ones_like(x), levy=two_atom_levy)
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 500, seed=3,
                           delta_cut=0.5, gamma=None)
        assert np.all(b.m_gamma == 0.0)

    def test_theta_dominates_gamma_jump_sums(self, two_atom_levy):
        # reconstruct the raw jump sums by adding back the compensator
        mod = make_model(beta=lambda x, e: e * np.ones_like(x), levy=two_atom_levy)
        gamma = lambda x, e: 0.5 * np.minimum(1, np.abs(e)) * np.ones_like(x)
        theta = lambda x, e: np.minimum(1, np.abs(e)) * np.ones_like(x)
        kw = dict(delta_cut=0.5)
        bg = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 25), 2000, seed=6,
                            gamma=gamma, **kw)
        bt = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 25), 2000, seed=6,
                            gamma=theta, **kw)
        dts = bg.grid.dts
        for b, fn in ((bg, gamma), (bt, theta)):
            comp = np.stack([b.sampler.compensator(fn, b.x_paths[:, i])
                             for i in range(b.n_steps)], axis=1)
            b.jump_sums = b.m_gamma + dts[None, :] * comp
        assert np.all(bg.jump_sums <= bt.jump_sums + 1e-12)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_abort(self):
        mod = make_model(drift=lambda x: np.exp(np.asarray(x, float) ** 2))
        from singfbsde.forward import SimulationError
        with pytest.raises(SimulationError):
            simulate_paths(mod, 0.0, 30.0, TimeGrid(0, 1, 50), 3, seed=1)


class TestMomentCheck:
    def test_brownian_doob_bound(self):
        mod = make_model(sigma=const(1.0))
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 200), 20000, seed=11)
        mc = moment_check(b, 2.0, 0.0)
        assert mc.statistic <= 4.0 + 3 * mc.se
        assert mc.bound == pytest.approx(4.0)

    def test_deterministic_drift_exact(self):
        mod = make_model(drift=const(1.0))
        b = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 64), 3, seed=0)
        mc = moment_check(b, 2.0, 0.0)
        assert mc.statistic == pytest.approx(1.0, abs=1e-12)

    def test_p_below_two_rejected(self):
        b = simulate_paths(make_model(), 0.0, 0.0, TimeGrid(0, 1, 4), 2, seed=0)
        with pytest.raises(ValueError):
            moment_check(b, 1.0, 0.0)


class TestPersistence:
    def test_binary_roundtrip(self, tmp_path, two_atom_levy):
        mod = make_model(sigma=const(0.4), beta=lambda x, e: e * np.ones_like(x),
                         levy=two_atom_levy)
        b = simulate_paths(mod, 0.25, 0.5, TimeGrid(0.25, 1, 12), 64, seed=8,
                           delta_cut=0.5,
                           gamma=lambda x, e: np.abs(e) * np.ones_like(x))
        path = tmp_path / "paths.bin"
        save_bundle(b, path)
        r = load_bundle(path)
        assert np.array_equal(r.x_paths, b.x_paths)
        assert np.array_equal(r.dw, b.dw)
        assert np.array_equal(r.m_gamma, b.m_gamma)
        assert r.seed == 8 and r.t0 == 0.25 and r.x0 == 0.5

    def test_summary_rows(self):
        b = simulate_paths(make_model(drift=const(2.0)), 0.0, 0.0,
                           TimeGrid(0, 1, 4), 16, seed=1)
        rows = bundle_summary_rows(b)
        assert len(rows) == 5
        assert rows[-1]["mean"] == pytest.approx(2.0)


class TestGaussianSurrogate:
    def test_variance_matches_dropped_mass(self):
        # pure small jumps: drop gives constant paths, the surrogate reinstates
        # the dropped variance as Brownian noise
        lev = LevyMeasureSpec.from_density(lambda e: 40.0 * np.ones_like(np.asarray(e, float)),
                                           [(0.0, 0.25)])
        mod = make_model(beta=lambda x, e: e * np.ones_like(x), levy=lev)
        with pytest.warns(UserWarning, match="dropped"):
            dropped = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 4000, seed=5,
                                     delta_cut=0.5, small_jump_mode="drop")
        assert np.all(dropped.x_paths == 0.0)
        surr = simulate_paths(mod, 0.0, 0.0, TimeGrid(0, 1, 20), 60000, seed=5,
                              delta_cut=0.5, small_jump_mode="gaussian_surrogate")
        var = surr.x_paths[:, -1].var(ddof=1)
        expected = surr.sampler.small_jump_variance  # int e^2 lambda(de) * T
        se = var * np.sqrt(2.0 / len(surr.x_paths))
        assert abs(var - expected) < 4 * se

    def test_unknown_mode_rejected(self, two_atom_levy):
        with pytest.raises(ValueError, match="small_jump_mode"):
            build_jump_sampler(two_atom_levy, 0.5, "gauss")
