import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singfbsde.bsde import McConfig, monotone_limit
from singfbsde.ipde import SpaceGrid, solve_singular_ipde, solve_truncated_ipde
from singfbsde.model import (IntervalUnion, ProblemSpec, TerminalData,
                             audit_assumptions)
from singfbsde.presets import heat_generator, power_generator
from singfbsde.verify import (CheckResult, TolPolicy, VerificationReport,
                              blowup_rate_fit, cross_validate, modulus_estimate,
                              ode_oracle, solution_invariant_suite)

from conftest import const, make_model


class TestOdeOracle:
    def test_closed_form_examples(self):
        assert ode_oracle(2, 1, 0, 10, 1, 0) == pytest.approx(0.705346, abs=1e-6)
        assert ode_oracle(2, 1, 0, math.inf, 1, 0) == pytest.approx(0.707107, abs=1e-6)

    def test_terminal_identity(self):
        assert ode_oracle(3, 2, 0, 7, 1, 1) == 7.0

    def test_integrator_agrees_with_closed_form(self):
        for q, a0, n in ((1, 1, 5), (2, 0.5, 10), (3, 2, 40)):
            closed = ode_oracle(q, a0, 0.0, n, 1.0, 0.0, method="closed")
            integ = ode_oracle(q, a0, 1e-12, n, 1.0, 0.0)  # forces the integrator
            assert integ == pytest.approx(closed, abs=1e-6)

    def test_positive_source_raises_value(self):
        with_src = ode_oracle(2, 1, 0.5, 10, 1, 0)
        without = ode_oracle(2, 1, 0.0, 10, 1, 0)
        assert with_src > without

    def test_equilibrium_with_large_source(self):
        # backward flow settles at the balance point (f0c/a0)^(1/(q+1))
        val = ode_oracle(1, 1, 4.0, 2.0, 50.0, 0.0)
        assert val == pytest.approx(2.0, abs=1e-6)

    def test_domain_checks(self):
        with pytest.raises(ValueError):
            ode_oracle(2, -1, 0, 10, 1, 0)
        with pytest.raises(ValueError):
            ode_oracle(2, 1, 0, 10, 1, 2)


class TestBlowupFit:
    def test_exact_power_law(self):
        s = np.geomspace(0.01, 0.3, 30)
        fit = blowup_rate_fit(list(zip(s, (2 * s) ** -0.5)), (0.005, 0.4))
        assert fit.slope == pytest.approx(-0.5, abs=1e-6)
        assert fit.r2 == pytest.approx(1.0, abs=1e-9)

    def test_constant_has_zero_slope(self):
        s = np.geomspace(0.01, 0.3, 20)
        fit = blowup_rate_fit(list(zip(s, np.full(20, 3.0))), (0.005, 0.4))
        assert fit.slope == pytest.approx(0.0, abs=1e-6)

    @given(st.floats(0.3, 4.0), st.floats(0.1, 10.0))
    @settings(max_examples=60, deadline=None)
    def test_recovers_arbitrary_exponent(self, p, scale):
        s = np.geomspace(0.01, 0.5, 25)
        fit = blowup_rate_fit(list(zip(s, scale * s ** -p)), (0.005, 0.6))
        assert fit.slope == pytest.approx(-p, abs=1e-7)

    def test_window_and_positivity_validation(self):
        s = np.geomspace(0.01, 0.3, 10)
        with pytest.raises(ValueError, match="5 samples"):
            blowup_rate_fit(list(zip(s, s)), (0.2, 0.21))
        with pytest.raises(ValueError, match="nonpositive"):
            blowup_rate_fit(list(zip(s, np.linspace(-1, 1, 10))), (0.005, 0.4))


class TestReport:
    def test_duplicate_names_rejected(self):
        r = VerificationReport()
        r.add(CheckResult("a", True, 0, 0, 0))
        with pytest.raises(ValueError):
            r.add(CheckResult("a", False, 0, 0, 0))

    def test_pass_semantics(self):
        r = VerificationReport()
        r.add(CheckResult("a", True, 0, 0, 0))
        r.add(CheckResult("b", None, 0, 0, 0))
        assert r.passed
        r.add(CheckResult("c", False, 0, 0, 0))
        assert not r.passed and r.failures()[0].name == "c"


class TestCrossValidate:
    def _pair(self, power_spec):
        mc = McConfig(n_paths=8, seed=0, dt_max=1e-3)
        lim = monotone_limit(power_spec, 0.0, 0.0, [10, 40, 160], 1e-3, mc)
        sol = solve_singular_ipde(power_spec, SpaceGrid(-2, 2, 11), 1000,
                                  [10, 40, 160], 1e-3, dt_max=1e-3).solution
        return lim, sol

    def test_oracle_case_agrees(self, power_spec):
        lim, sol = self._pair(power_spec)
        rep = cross_validate(lim, sol, [(0.0, 0.0)],
                             TolPolicy(mode="absolute", abs_tol=2e-3))
        assert rep.passed

    def test_symmetry_of_verdict(self, power_spec):
        lim, sol = self._pair(power_spec)
        a = cross_validate(lim, sol, [(0.0, 0.0)],
                           TolPolicy(mode="absolute", abs_tol=2e-3))
        gap = a["cross[t=0,x=0]"].measured
        assert gap == abs(lim.u_limit - sol.value(0.0, 0.0))

    def test_mismatched_spec_rejected(self, power_spec):
        lim, sol = self._pair(power_spec)
        other = ProblemSpec(model=power_spec.model, gen=power_generator(3.0),
                            terminal=power_spec.terminal, label="other")
        sol2 = solve_truncated_ipde(other, 2, SpaceGrid(-2, 2, 11), 400)
        with pytest.raises(ValueError, match="mismatched"):
            cross_validate(lim, sol2, [(0.0, 0.0)])

    def test_point_mismatch_rejected(self, power_spec):
        lim, sol = self._pair(power_spec)
        with pytest.raises(ValueError, match="rooted at"):
            cross_validate(lim, sol, [(0.0, 1.0)])


class TestInvariantSuite:
    def test_power_case_all_pass(self, power_spec):
        res = solve_singular_ipde(power_spec, SpaceGrid(-2, 2, 11), 1000,
                                  [10, 40, 160, 320], 1e-3, dt_max=1e-3)
        rep = solution_invariant_suite(res.per_level, power_spec, 0.0, 0.0,
                                       eps_sweep=(0.2, 0.1, 0.05, 0.02, 0.01, 0.005),
                                       divergence_threshold=8.0)
        assert rep["level_bound"].status is True
        assert rep["level_monotone"].status is True
        assert rep["apriori_bound"].status is True
        assert rep["singular_divergence"].status is True
        assert rep.passed

    def test_empty_singular_set_vacuous_divergence(self):
        mod = make_model(sigma=const(0.3))
        spec = ProblemSpec(model=mod, gen=power_generator(1.0, a=0.5),
                           terminal=TerminalData(g=const(2.0)))
        sol = solve_truncated_ipde(spec, 5, SpaceGrid(-3, 3, 61), 300)
        rep = solution_invariant_suite([sol], spec, 0.0, 0.0)
        assert rep["singular_divergence"].status is True
        assert "vacuous" in rep["singular_divergence"].note

    def test_unverified_hypotheses_downgrade_terminal_check(self):
        # leftward jumps exit the singular ray: (D) fails, so the terminal-limit
        # entry must carry no verdict, only the measured gap
        from singfbsde.model import LevyMeasureSpec
        lev = LevyMeasureSpec.from_atoms([(1.0, 0.5)])
        mod = make_model(sigma=const(0.15),
                         beta=lambda x, e: -np.minimum(1, np.abs(e)) * np.ones_like(x),
                         levy=lev, bound_jump=1.0)
        term = TerminalData(
            g=lambda x: 1.0 / np.maximum(1.0 - np.asarray(x, float), 1e-300),
            singular_set=IntervalUnion([(1.0, np.inf)]))
        spec = ProblemSpec(model=mod, gen=power_generator(5.0, ell=1.25),
                           terminal=term)
        audit = audit_assumptions(spec)
        assert audit["D2"].passed is False
        res = solve_singular_ipde(spec, SpaceGrid(-5, 6, 221), 400, [10, 40], 1e-2,
                                  dt_max=1e-3, delta_cut=0.5)
        rep = solution_invariant_suite(res.per_level, spec, 0.0, 0.0, audit=audit,
                                       x_regular=0.0)
        assert rep["terminal_limit"].status is None
        assert "not guaranteed" in rep["terminal_limit"].note
        assert math.isfinite(rep["terminal_limit"].measured)


class TestModulus:
    def test_quadratic_slice(self):
        mod = make_model(sigma=const(0.0), horizon=1.0)
        spec = ProblemSpec(model=mod, gen=heat_generator(),
                           terminal=TerminalData(g=lambda x: np.asarray(x) ** 2))
        grid = SpaceGrid(-3, 3, 121)
        sol = solve_truncated_ipde(spec, 100, grid, 100)
        est = modulus_estimate(sol, 0.25)
        # max |du/dx| on the grid is about 2*|x|_max, sampled discretely
        assert est.lipschitz_est == pytest.approx(6.0, rel=0.05)

    def test_constant_field(self):
        mod = make_model(sigma=const(0.2))
        spec = ProblemSpec(model=mod, gen=heat_generator(),
                           terminal=TerminalData(g=const(4.0)))
        sol = solve_truncated_ipde(spec, 10, SpaceGrid(-2, 2, 41), 50)
        est = modulus_estimate(sol, 0.1)
        assert est.lipschitz_est < 1e-10  # tridiagonal-solve roundoff only

    def test_reports_only(self, power_spec):
        res = solve_singular_ipde(power_spec, SpaceGrid(-2, 2, 21), 500,
                                  [10, 40], 1e-2, dt_max=1e-3)
        est = modulus_estimate(res.solution, 0.25)
        assert math.isfinite(est.lipschitz_est)
        assert len(est.holder_alpha_grid) == len(est.separations) - 1
