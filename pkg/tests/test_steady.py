import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavity_bistability.integrate import evolve_to_steady
from cavity_bistability.model import PhysicalParams, SemiclassicalState, ground_state, rhs_vec
from cavity_bistability.steady import (
    SteadyStateError,
    atoms_at_field,
    classify,
    find_all_branches,
    linearization_spectrum,
    solve_steady,
)
from conftest import lambda_params, two_level_params
from oracles import pump_sq, steady_photon_numbers, two_level_abs_alpha_roots, two_level_pump, two_level_turning_points


def residual(point, params):
    return np.max(np.abs(rhs_vec(point.state.to_vector(), params.as_array())))


class TestEmptyCavity:
    def test_detuned_root(self):
        p = PhysicalParams(epsilon=2.0, delta_p=1.0)
        pt = solve_steady(p)
        assert pt.state.alpha == pytest.approx(1 - 1j, abs=1e-12)
        assert pt.stability == "stable"
        assert pt.leading_rate == pytest.approx(-1.0, abs=1e-6)

    def test_spectrum_contains_cavity_pair(self):
        p = PhysicalParams(epsilon=2.0, delta_p=1.0)
        ev = linearization_spectrum(solve_steady(p).state, p)
        assert len(ev) == 10
        for target in (-1 + 1j, -1 - 1j):
            assert np.min(np.abs(ev - target)) < 1e-6

    # below ~1e-10 the cold start already meets the residual certificate
    @given(st.floats(1e-3, 5), st.floats(-3, 3))
    def test_single_root(self, eps, dp):
        p = PhysicalParams(epsilon=eps, delta_p=dp)
        roots = find_all_branches(p)
        assert len(roots) == 1
        assert roots[0].n_photons == pytest.approx(eps ** 2 / (dp ** 2 + 1), rel=1e-9, abs=1e-20)


class TestDarkState:
    @pytest.mark.parametrize("omega", [0.1, 0.3, 1.0])
    def test_transparency(self, omega):
        p = lambda_params(8, omega_c=omega, epsilon=5.0)
        pt = solve_steady(p, evolve_to_steady(ground_state(), p).state)
        assert pt.state.s33 < 1e-10
        assert abs(pt.state.alpha) == pytest.approx(5.0, rel=1e-9)
        # dark state is proportional to Omega|1> - g alpha|2>
        assert pt.state.s22 / pt.state.s11 == pytest.approx(abs(p.g * pt.state.alpha) ** 2 / omega ** 2, rel=1e-8)


class TestTwoLevel:
    C, G = 6.0, 1.0

    def params(self, eps):
        return two_level_params(self.C, epsilon=eps)

    def test_closed_form_roots_and_stability(self):
        p = self.params(44.0)
        lo, hi = two_level_turning_points(self.C, p.g, p.gamma31)
        assert lo < 44.0 ** 2 < hi
        roots = find_all_branches(p)
        expected = two_level_abs_alpha_roots(44.0, self.C, p.g, p.gamma31) ** 2
        assert len(roots) == 3
        assert [r.n_photons for r in roots] == pytest.approx(expected, rel=1e-9)
        assert [r.stability for r in roots] == ["stable", "unstable", "stable"]
        ev = linearization_spectrum(roots[1].state, p)
        assert np.sum(ev.real > 1e-6) == 1

    @pytest.mark.parametrize("eps", [10.0, 30.0, 60.0])
    def test_root_count_parity_outside_folds(self, eps):
        p = self.params(eps)
        roots = find_all_branches(p)
        assert len(roots) == len(two_level_abs_alpha_roots(eps, self.C, p.g, p.gamma31)) == 1
        assert two_level_pump(abs(roots[0].state.alpha), self.C, p.g, p.gamma31) == pytest.approx(eps, rel=1e-9)


class TestThreeLevel:
    def test_fig2a_loop_has_three_roots(self, fig2a):
        p = fig2a.replace(epsilon=np.sqrt(80.0))
        roots = find_all_branches(p)
        assert [r.stability for r in roots] == ["stable", "unstable", "stable"]
        assert [r.n_photons for r in roots] == pytest.approx(steady_photon_numbers(p), rel=1e-8)

    def test_monostable_fig1(self):
        for dp in (-1.0, 0.0, 0.4, 2.0):
            p = lambda_params(8, omega_c=1.5, epsilon=14.5, delta_p=dp)
            assert len(find_all_branches(p)) == 1

    @settings(max_examples=25)
    @given(st.floats(0.5, 8), st.floats(0.05, 1.0), st.floats(1, 15), st.floats(-1, 1),
           st.floats(0, 0.5), st.floats(0, 0.5))
    def test_roots_solve_the_oracle_equation(self, c, omega, eps, dp, d2, d3):
        p = lambda_params(c, omega_c=omega, epsilon=eps, delta_p=dp, deph2=d2, deph3=d3)
        roots = find_all_branches(p)
        assert roots
        for r in roots:
            assert residual(r, p) <= 1e-10
            assert pump_sq(r.n_photons, p) == pytest.approx(eps ** 2, rel=1e-8)


class TestCertificates:
    @settings(max_examples=20)
    @given(st.floats(0.5, 8), st.floats(0.05, 1.0), st.floats(1, 15), st.floats(-1, 1))
    def test_stable_roots_attract(self, c, omega, eps, dp):
        p = lambda_params(c, omega_c=omega, epsilon=eps, delta_p=dp)
        for r in find_all_branches(p):
            assert r.residual <= 1e-10
            if r.stability != "stable" or r.leading_rate > -1e-3:
                continue
            v = r.state.to_vector()
            # mix in a little ground state (keeps the density matrix physical) and shift the field
            eta = 1e-3
            kick = (1 - eta) * v
            kick[:2] = v[:2] + eta
            kick[8] += eta
            back = evolve_to_steady(SemiclassicalState.from_vector(kick), p, tol=1e-12, t_max=1e5)
            assert np.max(np.abs(back.state.to_vector() - v)) < 1e-6

    @settings(max_examples=20)
    @given(st.floats(0.5, 8), st.floats(0.05, 1.0), st.floats(1, 15), st.floats(-1, 1))
    def test_spectrum_comes_in_conjugate_pairs(self, c, omega, eps, dp):
        p = lambda_params(c, omega_c=omega, epsilon=eps, delta_p=dp)
        r = find_all_branches(p)[0]
        ev = linearization_spectrum(r.state, p)
        cplx = ev[np.abs(ev.imag) > 1e-6]
        for z in cplx:
            assert np.min(np.abs(cplx - np.conj(z))) < 1e-8

    def test_classify_margin(self):
        assert classify(-1e-3) == "stable"
        assert classify(1e-3) == "unstable"
        assert classify(1e-7) == "marginal"


class TestFailures:
    def test_iteration_budget(self):
        p = two_level_params(6, epsilon=44.0)
        with pytest.raises(SteadyStateError) as exc:
            solve_steady(p, SemiclassicalState(alpha=300j), max_iter=1)
        assert exc.value.residual > 1e-10
        assert isinstance(exc.value.best, SemiclassicalState)

    def test_empty_seed_list(self):
        with pytest.raises(ValueError):
            find_all_branches(PhysicalParams(), seeds=[])

    def test_atoms_at_field_are_steady_for_that_field(self, fig2a):
        a = 3.0 - 2.0j
        s = atoms_at_field(a, fig2a)
        v = rhs_vec(s.to_vector(), fig2a.as_array())
        assert np.max(np.abs(v[2:])) < 1e-12
