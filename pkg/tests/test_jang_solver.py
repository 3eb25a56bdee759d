import numpy as np
import pytest

from jangmass.barriers import barriers_for_data
from jangmass.geometry_core import RadialGrid, observed_order
from jangmass.initial_data import builtin_family
from jangmass.jang_solver import (
    JangProblem,
    TrappingError,
    analytic_profile,
    ansatz_leading_coefficient,
    apriori_bound_holds,
    default_schedule,
    geometric_limit,
    jang_operator_3d,
    jang_residual,
    kform_identity_check,
    mean_curvature_of_graph,
    regular_center_profile,
    solve_regularized_bvp,
    trace_K_of_graph,
)


@pytest.fixture(scope="module")
def wang_barriers(wang_m_sigma):
    data, spec = wang_m_sigma
    return barriers_for_data(data, spec)


def _hyperbolic_sample(hyperboloid, r=2.5, th=1.0, ph=0.4):
    return hyperboloid.sample(r, th, ph)


class TestPointwiseOperator:
    def test_constant_graph_is_minimal(self, hyperboloid):
        s = _hyperbolic_sample(hyperboloid)
        assert mean_curvature_of_graph(np.zeros(3), np.zeros((3, 3)), s.g, s.dg) == 0.0

    def test_flat_graph_traces_all_of_K(self, hyperboloid):
        s = _hyperbolic_sample(hyperboloid)
        assert trace_K_of_graph(np.zeros(3), s.g, s.g) == pytest.approx(3.0, abs=1e-14)

    def test_steep_graph_traces_tangential_part(self, hyperboloid):
        s = _hyperbolic_sample(hyperboloid)
        vals = [trace_K_of_graph(np.array([slope, 0, 0]), s.K, s.g) for slope in (1e2, 1e4, 1e6)]
        assert abs(vals[-1] - 2.0) < 1e-10 and abs(vals[0] - 2) > abs(vals[1] - 2)

    def test_hyperboloid_graph_solves_the_equation(self, hyperboloid):
        r, th, ph = 3.0, 0.8, 2.0
        V = np.sqrt(1 + r * r)
        df = np.array([r / V, 0, 0])
        ddf = np.zeros((3, 3))
        ddf[0, 0] = V**-3
        assert abs(jang_operator_3d(hyperboloid, r, th, ph, df, ddf)) < 1e-13


class TestResidual:
    def test_exact_solution_and_order(self, hyperboloid):
        errs = []
        for n in (400, 799):
            grid = RadialGrid.logarithmic(2.0, 1e3, n)
            r = grid.nodes
            res = jang_residual(np.sqrt(1 + r * r), hyperboloid, 0.0, grid)
            assert res.size == n - 2
            errs.append(np.max(np.abs(res)))
        assert errs[0] <= 10 * RadialGrid.logarithmic(2.0, 1e3, 400).step ** 2
        assert observed_order(*errs) >= 1.8

    def test_zero_function_with_capillarity(self, hyperboloid):
        grid = RadialGrid.logarithmic(0.5, 50, 60)
        assert np.allclose(jang_residual(np.zeros(60), hyperboloid, 0.3, grid), -3.0, atol=1e-13)

    def test_vertical_translation_is_exact(self, wang_m_sigma):
        data, _ = wang_m_sigma
        grid = RadialGrid.logarithmic(0.01, 300, 200)
        r = grid.nodes
        # dyadic samples make f + c exact in floating point
        f = np.round((np.sqrt(1 + r * r) + np.log(r)) * 2.0**20) / 2.0**20
        assert np.array_equal(jang_residual(f + 3.0, data, 0.0, grid), jang_residual(f, data, 0.0, grid))

    def test_barrier_signs(self, wang_m_sigma, wang_barriers):
        data, _ = wang_m_sigma
        grid = wang_barriers.grid
        r = grid.nodes[1:-1]
        up = jang_residual(wang_barriers.phi_plus, data, 0.0, grid)
        lo = jang_residual(wang_barriers.phi_minus, data, 0.0, grid)
        # the barrier margin decays like r^-4; beyond a few hundred it drops
        # below the finite-difference floor of the residual itself
        resolved = r <= 300
        assert np.all(up[resolved] < 0)
        assert np.all(lo[resolved] > 0)
        assert np.max(np.abs(up[~resolved])) < 1e-9

    def test_rejects_uniform_grid(self, hyperboloid):
        with pytest.raises(ValueError):
            jang_residual(np.zeros(10), hyperboloid, 0.0, RadialGrid.uniform(1, 2, 10))


class TestKForm:
    @pytest.mark.parametrize("profile", ["hyperbolic", "linear", "log"])
    def test_identity(self, hyperboloid, profile):
        grid = RadialGrid.logarithmic(2.0, 1e3, 400)
        r = grid.nodes
        phi = {"hyperbolic": np.sqrt(1 + r * r), "linear": r, "log": r + 0.3 * np.log(r)}[profile]
        assert kform_identity_check(phi, hyperboloid, grid) <= 10 * grid.step**2

    def test_identity_converges(self, hyperboloid):
        errs = []
        for n in (400, 799):
            grid = RadialGrid.logarithmic(2.0, 1e3, n)
            errs.append(kform_identity_check(grid.nodes + 0.3 * np.log(grid.nodes), hyperboloid, grid))
        assert observed_order(*errs) >= 1.8


class TestRegularCenterOracle:
    def test_hyperboloid(self, hyperboloid):
        r, f, k = regular_center_profile(hyperboloid, 1e3)
        V = np.sqrt(1 + r * r)
        assert np.max(np.abs(f - (V - 1)) / V) < 1e-10
        assert np.max(np.abs(k - r / np.sqrt(1 + r * r))) < 1e-10

    def test_needs_regular_center(self, wang_m_sigma):
        from jangmass.initial_data import WangDataSpec, SphereTensor, make_wang_data

        data = make_wang_data(WangDataSpec(m=SphereTensor.isotropic(1.0), profile="exact"))
        with pytest.raises(ValueError):
            regular_center_profile(data, 10.0)


class TestRegularizedSolve:
    def test_literal_capillarity_example(self, hyperboloid):
        # tau = 1e-3 with boundary value sqrt(1+R^2): expected within 5e-3 of
        # the exact solution on [r_inner, R/2]
        R = 200.0
        sol = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, R, 1e-3, np.sqrt(1 + R * R)))
        r = sol.grid.nodes
        inner = r <= R / 2
        assert np.max(np.abs(sol.f - np.sqrt(1 + r * r))[inner]) <= 5e-3

    def test_small_capillarity_gap_is_linear_in_tau(self, hyperboloid):
        R, n = 200.0, 1600
        bv = np.sqrt(1 + R * R)
        f0 = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, R, 0.0, bv, n=n)).f
        gaps = []
        for tau in (5e-11, 2.5e-11):
            sol = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, R, tau, bv, n=n))
            r = sol.grid.nodes
            inner = r <= R / 2
            assert np.max(np.abs(sol.f - np.sqrt(1 + r * r))[inner]) <= 5e-3
            gaps.append(np.max(np.abs(sol.f - f0)[inner]))
        assert 1.8 <= gaps[0] / gaps[1] <= 2.2

    def test_regular_solution_matches_oracle(self, wang_m_sigma):
        data, _ = wang_m_sigma
        R = 100.0
        errs = []
        for n in (601, 1201):
            grid = RadialGrid.logarithmic(1e-3, R, n)
            _, fo, _ = regular_center_profile(data, R, grid)
            sol = solve_regularized_bvp(JangProblem(data, grid, 0.0, float(fo[-1]) + 5.0, "regular_center"))
            errs.append(np.max(np.abs(sol.f - (fo + 5.0))))
        assert errs[1] < 2e-3
        assert observed_order(*errs) >= 1.8

    def test_upper_boundary_value_stays_below_upper_barrier(self, wang_m_sigma, wang_barriers):
        data, _ = wang_m_sigma
        R = 200.0
        bv = float(wang_barriers.f_plus(R))
        sol = solve_regularized_bvp(JangProblem.on_ball(data, R, 1e-9, bv), wang_barriers)
        r = sol.grid.nodes
        sel = r >= wang_barriers.r0
        tol = 1e-8 * max(1.0, np.max(np.abs(sol.f)))
        assert sol.trapped
        assert np.all(sol.f[sel] <= wang_barriers.f_plus(r[sel]) + tol)
        assert np.all(sol.f[sel] >= wang_barriers.f_minus(r[sel]) - tol)
        assert apriori_bound_holds(sol, data)

    @pytest.mark.parametrize("tau", [1e-2, 1e-5, 1e-9])
    def test_apriori_bound(self, hyperboloid, tau):
        R = 200.0
        sol = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, R, tau, np.sqrt(1 + R * R)))
        assert apriori_bound_holds(sol, hyperboloid)
        assert sol.residual_norm <= 1e-10

    def test_quadratic_newton_tail(self, hyperboloid):
        R = 200.0
        sol = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, R, 1e-9, np.sqrt(1 + R * R)))
        h = sol.residual_history
        assert len(h) >= 3
        assert h[-2] <= h[-3] / 10 and h[-1] <= h[-2] / 10

    def test_untrappable_boundary_data_raise(self, wang_m_sigma, wang_barriers):
        data, _ = wang_m_sigma
        R = 200.0
        shifted = wang_barriers.with_psi_shift(50.0)
        with pytest.raises(TrappingError):
            solve_regularized_bvp(JangProblem.on_ball(data, R, 1e-9, float(wang_barriers.f_plus(R))), shifted)

    def test_translation_covariance(self, wang_m_sigma):
        data, _ = wang_m_sigma
        R = 100.0
        a = solve_regularized_bvp(JangProblem.on_ball(data, R, 0.0, 120.0, n=300))
        b = solve_regularized_bvp(JangProblem.on_ball(data, R, 0.0, 127.0, n=300))
        assert np.allclose(b.f - a.f, 7.0, atol=1e-8)

    def test_report_round_trip(self, hyperboloid):
        import json

        sol = solve_regularized_bvp(JangProblem.on_ball(hyperboloid, 50.0, 1e-6, np.sqrt(2501.0), n=200))
        rep = json.loads(sol.to_json("f.csv"))
        assert rep["R"] == pytest.approx(50.0) and rep["f_samples_path"] == "f.csv" and rep["trapped"]


class TestGeometricLimit:
    def test_wang_log_coefficient_and_remainder(self, wang_m_sigma, wang_barriers):
        data, _ = wang_m_sigma
        rep = geometric_limit(data, wang_barriers, default_schedule(1e-9, 200.0, 4, grow=False),
                              alpha=1.0, nodes_per_decade=120)
        assert rep.log_coefficient == pytest.approx(1.0, rel=0.03)
        assert rep.tail_exponent >= 0.9
        assert all(s.trapped for s in rep.solutions)

    def test_admissible_tau_differences_halve(self, hyperboloid):
        rep = geometric_limit(hyperboloid, None, default_schedule(1e-9, 200.0, 4, grow=False))
        assert rep.cauchy
        assert all(1.8 <= q <= 2.2 for q in rep.ratios)


class TestAnsatz:
    def test_hyperboloid_vanishes(self, hyperboloid, sphere8):
        from jangmass.geometry_core import HarmonicCoeffs

        fit = ansatz_leading_coefficient(analytic_profile(0.0), HarmonicCoeffs(4), hyperboloid,
                                         RadialGrid.logarithmic(100, 1e3, 20), sphere8)
        assert fit.constant_sup < 1e-6 and fit.log_sup < 1e-6

    def test_quadrupole_with_correct_psi(self, quadrupole_data, quadrupole_spec, sphere8):
        from jangmass.barriers import psi_from_spec

        fit = ansatz_leading_coefficient(analytic_profile(1.0), psi_from_spec(quadrupole_spec),
                                         quadrupole_data, RadialGrid.logarithmic(100, 1e3, 30), sphere8)
        assert fit.constant_sup <= 0.02 and fit.log_sup <= 0.02
