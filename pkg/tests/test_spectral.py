import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emspectra.accelerators import locate_fixed_point
from emspectra.gmm import GmmParams, GmmProblem, generate_dataset
from emspectra.spectral import (
    FisherTriple,
    NonRegularPointError,
    SpectralEstimateWarning,
    com_norm,
    contraction_radius_estimate,
    fisher_triple,
    jacobi_eigenvalues,
    jacobian_fd,
    louis_mis,
    observed_information,
    optimal_momentum,
    power_iteration_dt,
    power_lambda_min,
    radius_formula,
    relaxation_analysis,
    self_adjointness_residual,
    trajectory_lambda_hat,
    triple_equivalence_residual,
)
from emspectra.synthetic import LinearEmProblem

from conftest import THETA0


def _triple(i_com, i_obs):
    i_com, i_obs = np.asarray(i_com, float), np.asarray(i_obs, float)
    return FisherTriple(i_com, i_obs, i_com - i_obs)


@pytest.fixture(scope="module")
def extreme_star(extreme_problem):
    theta = locate_fixed_point(extreme_problem, THETA0)
    triple = fisher_triple(extreme_problem, theta)
    dt = jacobian_fd(extreme_problem, theta)
    return theta, triple, dt, relaxation_analysis(dt, triple)


class TestJacobi:
    @given(arrays(np.float64, (4, 4), elements=st.floats(-10, 10)))
    def test_matches_dense_solver(self, a):
        a = a + a.T
        np.testing.assert_allclose(jacobi_eigenvalues(a), np.linalg.eigvalsh(a), atol=1e-9 * max(1, np.abs(a).max()))

    @given(st.integers(1, 3), st.integers(0, 2**32))
    def test_characteristic_polynomial_oracle(self, d, seed):
        # eigenvalues of I_com^{-1} I_obs from the roots of det(I_obs - z I_com)
        rng = np.random.default_rng(seed)
        b = rng.standard_normal((d, d))
        i_com = b @ b.T + d * np.eye(d)
        c = rng.standard_normal((d, d))
        i_mis = 0.5 * c @ c.T
        an = relaxation_analysis(np.eye(d), _triple(i_com, i_com - i_mis))
        roots = np.sort(np.roots(np.poly(np.linalg.solve(i_com, i_com - i_mis))).real)
        np.testing.assert_allclose(an.eigenvalues, roots, atol=1e-10)

    def test_diagonal_and_zero(self):
        np.testing.assert_array_equal(jacobi_eigenvalues(np.diag([3.0, 1.0, 2.0])), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(jacobi_eigenvalues(np.zeros((2, 2))), [0.0, 0.0])

    def test_nonconvergence_raises(self):
        a = np.array([[1.0, 1.0], [1.0, 2.0]])
        with pytest.raises(RuntimeError):
            jacobi_eigenvalues(a, max_sweeps=0)


class TestJacobian:
    def test_identity_map(self):
        pr = LinearEmProblem(np.eye(3), np.zeros((3, 3)))
        np.testing.assert_allclose(jacobian_fd(pr, np.ones(3)), np.eye(3), atol=1e-10)

    @pytest.mark.parametrize("h", [1e-2, 1e-5, 1e-7])
    def test_linear_map_exact(self, h):
        rng = np.random.default_rng(1)
        b = rng.standard_normal((3, 3))
        i_com = b @ b.T + 3 * np.eye(3)
        pr = LinearEmProblem(i_com, 0.4 * i_com + 0.1 * np.eye(3), theta_star=[1.0, 2.0, 3.0])
        np.testing.assert_allclose(jacobian_fd(pr, rng.standard_normal(3), h), pr.dt, atol=1e-8)

    def test_spectral_radius_matches_tail_rate(self, extreme_problem, extreme_star):
        from emspectra.diagnostics import fit_rate
        from emspectra.em_core import StopRule, run_em

        theta, _, dt, an = extreme_star
        rho = np.max(np.abs(np.linalg.eigvals(dt)))
        # plain EM from trial 0 caps out; restart from a point near the optimum instead
        res = run_em(extreme_problem, theta + 1e-3 * np.array([1, -1, 1, -1, 1]), StopRule(1e-11, 2000))
        assert fit_rate(res).fitted_rho == pytest.approx(rho, rel=0.05)


class TestFisher:
    def test_symmetry_and_difference(self, extreme_star):
        _, t, _, _ = extreme_star
        for m in (t.i_com, t.i_obs, t.i_mis):
            assert np.linalg.norm(m - m.T) / np.linalg.norm(m) <= 1e-8
        np.testing.assert_allclose(t.i_mis, t.i_com - t.i_obs, atol=1e-8)

    def test_missing_information_psd_near_fixed_point(self, extreme_problem, extreme_star):
        theta = extreme_star[0]
        rng = np.random.default_rng(3)
        for _ in range(20):
            t = fisher_triple(extreme_problem, theta + 1e-4 * rng.standard_normal(5))
            assert np.linalg.eigvalsh(t.i_mis)[0] >= -1e-6 * np.linalg.norm(t.i_com)

    def test_louis_cross_check(self, extreme_problem, extreme_star):
        theta, t, _, _ = extreme_star
        mis = louis_mis(extreme_problem, theta)
        assert np.linalg.norm(mis - t.i_mis) / np.linalg.norm(t.i_com) <= 1e-3
        # the per-observation loop and the backend's vectorised form agree
        np.testing.assert_allclose(mis, extreme_problem.missing_information(theta), rtol=1e-10, atol=1e-9)

    def test_louis_weight_entry_identical_components(self):
        pr = GmmProblem(generate_dataset(GmmParams.two(0.5, [0, 1], [1, 1]), 30, 2))
        w1 = 0.25
        mis = louis_mis(pr, [w1, 0.0, 1.0, 0.0, 1.0])
        assert mis[0, 0] == pytest.approx(30 / (w1 * (1 - w1)), rel=1e-12)

    def test_hard_posteriors_zero(self):
        pr = GmmProblem(generate_dataset(GmmParams.two(0.5, [-100, 100], [1, 1]), 20, 2))
        np.testing.assert_array_equal(louis_mis(pr, [0.5, -100, 1, 100, 1]), 0.0)

    def test_non_regular_point(self):
        pr = LinearEmProblem(np.eye(2), np.eye(2))
        pr.i_com = np.diag([1.0, -1.0])
        with pytest.raises(NonRegularPointError):
            fisher_triple(pr, np.zeros(2))

    def test_richardson_is_more_accurate(self, extreme_problem, extreme_star):
        theta, t, _, _ = extreme_star
        ref = t.i_com - extreme_problem.missing_information(theta)
        plain = observed_information(extreme_problem, theta, richardson=False)
        rich = observed_information(extreme_problem, theta)
        assert np.linalg.norm(rich - ref) < np.linalg.norm(plain - ref)

    def test_self_adjointness(self, extreme_star):
        _, t, _, an = extreme_star
        assert self_adjointness_residual(an.g, t.i_com) <= 1e-3


class TestRelaxation:
    def test_no_missing_information(self):
        an = relaxation_analysis(np.zeros((2, 2)), _triple(np.eye(2), np.eye(2)))
        np.testing.assert_allclose(an.eigenvalues, 1.0)
        assert an.rho_em == 0.0 and an.beta_star == 0.0

    def test_half_information(self):
        i_com = np.array([[2.0, 0.5], [0.5, 1.0]])
        an = relaxation_analysis(0.5 * np.eye(2), _triple(i_com, 0.5 * i_com))
        np.testing.assert_allclose(an.eigenvalues, 0.5, atol=1e-15)
        assert an.beta_star == pytest.approx(0.17157287525, abs=1e-10)

    def test_diagonal_example(self):
        an = relaxation_analysis(np.diag([0.96, 0.19]), _triple(np.eye(2), np.diag([0.04, 0.81])))
        assert an.lambda_min == pytest.approx(0.04)
        assert an.beta_star == pytest.approx(2 / 3)
        assert an.rho_acc == pytest.approx(0.8)
        np.testing.assert_array_equal(an.g, np.eye(2) - an.dt)

    def test_derived_scalars_consistent(self, extreme_star):
        an = extreme_star[3]
        assert an.rho_em == 1 - an.lambda_min
        assert an.beta_star == optimal_momentum(an.lambda_min)
        assert an.rho_acc == 1 - np.sqrt(an.lambda_min)

    def test_triple_residual_linear_problem(self):
        rng = np.random.default_rng(5)
        b = rng.standard_normal((4, 4))
        i_com = b @ b.T + 4 * np.eye(4)
        c = rng.standard_normal((4, 4))
        pr = LinearEmProblem(i_com, i_com - 0.3 * c @ c.T)
        t = fisher_triple(pr, rng.standard_normal(4))
        assert triple_equivalence_residual(pr.dt, t) <= 1e-10

    def test_triple_residual_zero_guard(self):
        assert triple_equivalence_residual(np.eye(2), _triple(np.eye(2), np.zeros((2, 2)))) == 0.0


class TestPower:
    def test_synthetic_spectrum(self):
        pr = LinearEmProblem.from_spectrum([0.1, 0.5])
        assert power_lambda_min(pr, np.zeros(2), iters=200) == pytest.approx(0.1, abs=1e-6)

    def test_zero_map(self):
        pr = LinearEmProblem.from_spectrum([1.0, 1.0])
        assert power_lambda_min(pr, np.zeros(2), iters=5) == 1.0

    def test_unsettled_warns(self):
        # eigenvalues +/-0.9 with a non-normal DT: the Rayleigh quotient keeps oscillating
        pr = LinearEmProblem.from_spectrum([0.1, 0.1])
        pr.dt = np.array([[0.9, 1.0], [0.0, -0.9]])
        assert not power_iteration_dt(pr, np.zeros(2), iters=50, v0=[1.0, 0.7]).settled
        with pytest.warns(SpectralEstimateWarning):
            power_lambda_min(pr, np.zeros(2), iters=50, v0=[1.0, 0.7])

    def test_gmm_matches_dense(self, extreme_problem, extreme_star):
        theta, _, _, an = extreme_star
        est = power_lambda_min(extreme_problem, theta, iters=200)
        assert est == pytest.approx(an.lambda_min, rel=0.02)


class TestLambdaHat:
    def test_examples(self):
        assert trajectory_lambda_hat([0.75], [0.5], [0.0]) == 0.5
        assert trajectory_lambda_hat([1.0], [0.5], [0.0]) == 0.0
        assert trajectory_lambda_hat([1.0], [0.5], [0.5]) is None

    def test_single_mode(self):
        pr = LinearEmProblem.from_spectrum([0.1])
        its = [np.array([1.0])]
        for _ in range(4):
            its.append(pr.em_step(its[-1]))
        assert trajectory_lambda_hat(its[3], its[2], its[1]) == pytest.approx(0.1, abs=1e-10)


class TestRadius:
    def test_linear_map_has_no_curvature(self):
        pr = LinearEmProblem.from_spectrum([0.2, 0.6])
        an = relaxation_analysis(pr.dt, fisher_triple(pr, np.zeros(2)))
        rho0 = contraction_radius_estimate(pr, np.zeros(2), an)
        assert rho0 == pytest.approx(0.2 / (2 * 0.6**2), rel=1e-6)

    @given(st.floats(0.01, 0.5), st.floats(0.0, 10.0), st.floats(0.5, 1.0))
    def test_formula_monotone_in_lambda(self, lam, m2, g):
        assert radius_formula(lam, m2, g) < radius_formula(lam * 1.5, m2, g)

    def test_com_norm(self):
        assert com_norm([1.0, 2.0], np.diag([4.0, 1.0])) == pytest.approx(np.sqrt(8.0))

    def test_rejects_zero_gap(self):
        pr = LinearEmProblem.from_spectrum([0.0, 0.5])
        an = relaxation_analysis(pr.dt, fisher_triple(pr, np.zeros(2)))
        an = type(an)(**{**an.__dict__, "lambda_min": 0.0})
        with pytest.raises(ValueError):
            contraction_radius_estimate(pr, np.zeros(2), an)
