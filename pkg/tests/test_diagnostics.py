import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emspectra.accelerators import step_g_accel
from emspectra.diagnostics import (
    com_distances,
    default_window,
    energy_decompose,
    energy_trace,
    fit_rate,
    local_quadratic_check,
    local_quadratic_sweep,
    loglog_slope,
    rigidity_profile,
    two_stage_check,
    velocity_angles,
)
from emspectra.em_core import RunResult, StopRule, run_em
from emspectra.gmm import GmmParams, GmmProblem, generate_dataset
from emspectra.spectral import FisherTriple, fisher_triple, relaxation_analysis
from emspectra.synthetic import LinearEmProblem

from conftest import THETA0


def _mp_pieces(x, a, b):
    """High-precision log-likelihood gain, Q ascent and posterior KL for a
    two-component normal mixture, ``a`` -> ``b``, layout [w1, m1, s1, m2, s2]."""
    mpmath.mp.dps = 50

    def joint(t, xi):
        w = [mpmath.mpf(t[0]), 1 - mpmath.mpf(t[0])]
        out = []
        for k, (m, s) in enumerate(((t[1], t[2]), (t[3], t[4]))):
            m, s = mpmath.mpf(m), mpmath.mpf(s)
            out.append(mpmath.log(w[k]) - mpmath.log(s) - mpmath.log(2 * mpmath.pi) / 2
                       - (mpmath.mpf(xi) - m) ** 2 / (2 * s * s))
        return out

    gain = dq = kl = mpmath.mpf(0)
    for xi in x:
        ja, jb = joint(a, xi), joint(b, xi)
        la = mpmath.log(mpmath.exp(ja[0]) + mpmath.exp(ja[1]))
        lb = mpmath.log(mpmath.exp(jb[0]) + mpmath.exp(jb[1]))
        ra = [mpmath.exp(j - la) for j in ja]
        gain += lb - la
        dq += sum(r * (jb_k - ja_k) for r, ja_k, jb_k in zip(ra, ja, jb))
        kl += sum(r * ((ja_k - la) - (jb_k - lb)) for r, ja_k, jb_k in zip(ra, ja, jb))
    return float(gain), float(dq), float(kl)


@pytest.fixture(scope="module")
def small():
    return GmmProblem(generate_dataset(GmmParams.two(0.3, [-1, 1.5], [1, 0.7]), 25, 11))


class TestEnergy:
    def test_against_high_precision(self, small):
        theta = np.array([0.5, -0.2, 1.3, 0.9, 0.9])
        e = energy_decompose(small, theta)
        gain, dq, kl = _mp_pieces(small.data.x, theta, small.em_step(theta))
        assert e.ell_gain == pytest.approx(gain, rel=1e-10)
        assert e.delta_q == pytest.approx(dq, rel=1e-10)
        assert e.kl_transport == pytest.approx(kl, rel=1e-10)
        assert abs(e.residual) <= 1e-10 * abs(gain)

    @given(st.floats(0.1, 0.9), st.floats(-2, 2), st.floats(0.3, 3), st.floats(-2, 2), st.floats(0.3, 3))
    def test_identity_and_signs(self, small, w, m1, s1, m2, s2):
        e = energy_decompose(small, np.array([w, m1, s1, m2, s2]))
        assert e.delta_q >= -1e-9 and e.kl_transport >= -1e-12
        assert abs(e.residual) <= 1e-9 * max(1.0, abs(e.ell_gain))

    def test_precomputed_step(self, small):
        theta = np.array(THETA0)
        assert energy_decompose(small, theta, small.em_step(theta)) == energy_decompose(small, theta)

    def test_trace_along_run(self, small):
        run = run_em(small, THETA0, StopRule(1e-8, 60))
        trace = energy_trace(small, run)
        assert len(trace) == run.iterations_used
        gains = np.array([t.ell_gain for t in trace])
        np.testing.assert_allclose(gains, np.diff(run.loglik), rtol=1e-6, atol=1e-10)

    def test_linear_problem(self):
        pr = LinearEmProblem.from_spectrum([0.2, 0.6])
        e = energy_decompose(pr, np.array([1.0, -1.0]))
        # G = diag(0.2, 0.6), u = (1, -1)
        g = np.array([0.2, 0.6])
        assert e.delta_q == pytest.approx(0.5 * np.sum(g**2))
        assert e.kl_transport == pytest.approx(0.5 * np.sum(g**2 - g**3))


class TestQuadratic:
    def test_exact_on_linear_problem(self):
        rng = np.random.default_rng(2)
        b = rng.standard_normal((3, 3))
        i_com = b @ b.T + 3 * np.eye(3)
        c = rng.standard_normal((3, 3))
        pr = LinearEmProblem(i_com, i_com - 0.4 * c @ c.T, theta_star=[1.0, 0.0, -1.0])
        an = relaxation_analysis(pr.dt, fisher_triple(pr, pr.theta_star))
        chk = local_quadratic_check(pr, pr.theta_star, an, i_com)
        for pts in (chk.total, chk.delta_q, chk.kl):
            assert len(pts) == 5
            assert max(p.relative_error for p in pts) <= 1e-8

    def test_gmm_slopes_near_three(self, extreme_problem):
        from emspectra.accelerators import locate_fixed_point
        from emspectra.spectral import jacobian_fd

        star = locate_fixed_point(extreme_problem, THETA0)
        t = fisher_triple(extreme_problem, star)
        an = relaxation_analysis(jacobian_fd(extreme_problem, star), t)
        chk = local_quadratic_check(extreme_problem, star, an, t.i_com)
        for v in chk.slopes.values():
            assert 2.5 <= v <= 3.5
        assert [p[0] for p in chk.as_tuples()] == [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
        sweep = local_quadratic_sweep(extreme_problem, star, an, t.i_com)
        assert len(sweep) == 5
        np.testing.assert_array_equal(sweep[2].direction, np.eye(5)[2])

    def test_invalid_scales_skipped(self):
        pr = GmmProblem(generate_dataset(GmmParams.two(0.5, [0, 2], [1, 1]), 50, 0))
        star = np.array([0.5, 0.0, 1.0, 2.0, 0.05])
        an = relaxation_analysis(np.zeros((5, 5)), FisherTriple(np.eye(5), np.eye(5), np.zeros((5, 5))))
        chk = local_quadratic_check(pr, star, an, np.eye(5), direction=-np.eye(5)[4])
        assert [p.scale for p in chk.total] == [3e-2, 1e-2, 3e-3, 1e-3]

    def test_loglog_slope(self):
        s = np.array([1e-1, 1e-2, 1e-3])
        assert loglog_slope(s, 2 * s**3) == pytest.approx(3.0)
        assert np.isnan(loglog_slope(s, [0.0, 0.0, 1.0]))


class TestTrajectory:
    def test_rigidity_and_angles_linear(self):
        pr = LinearEmProblem.from_spectrum([0.3])
        run = run_em(pr, [1.0], StopRule(1e-6, 10))
        rig = rigidity_profile(run, pr)
        steps = np.diff(np.array(run.iterates)[:, 0])
        np.testing.assert_allclose(rig, 0.5 * 0.7 * steps**2, rtol=1e-12)
        np.testing.assert_allclose(velocity_angles(run), 0.0, atol=1e-7)

    def test_angles_reversal_and_zero(self):
        run = RunResult([np.array([0.0]), np.array([1.0]), np.array([0.5]), np.array([0.5])],
                        [0, 0, 0, 0], [1, 0.5, 0], 3, True)
        ang = velocity_angles(run)
        assert ang[0] == pytest.approx(np.pi) and np.isnan(ang[1])

    def test_rigidity_needs_two(self):
        with pytest.raises(ValueError):
            rigidity_profile(RunResult([np.zeros(1)], [0.0], [], 0, True), LinearEmProblem.from_spectrum([.5]))

    def test_com_distances(self):
        d = com_distances([[1.0, 0.0], [0.0, 2.0]], [0.0, 0.0], np.diag([4.0, 1.0]))
        np.testing.assert_allclose(d, [2.0, 2.0])


class TestRateFit:
    @given(st.floats(0.3, 0.99), st.integers(60, 400))
    def test_geometric_sequence(self, rho, n):
        fit = fit_rate(list(1e-4 * rho ** np.arange(n)))
        assert fit.fitted_rho == pytest.approx(rho, rel=1e-9)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.window == min(50, n // 4)

    def test_window_capped_to_tail(self):
        norms = np.concatenate([np.full(100, 1e-2), 1e-4 * 0.5 ** np.arange(20)])
        assert default_window(norms) == 20
        assert fit_rate(norms).fitted_rho == pytest.approx(0.5)
        assert default_window(np.full(100, 1.0)) == 10

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_rate(np.ones(100), window=9)
        with pytest.raises(ValueError):
            fit_rate(np.ones(5))
        with pytest.raises(ValueError):
            fit_rate(np.r_[np.ones(20), 0.0], window=10)

    def test_run_result_input(self):
        pr = LinearEmProblem.from_spectrum([0.1, 0.5])
        run = run_em(pr, [1.0, 1.0], StopRule(1e-10, 2000))
        assert fit_rate(run).fitted_rho == pytest.approx(0.9, rel=1e-6)

    def test_momentum_rate_on_linear_map(self):
        pr = LinearEmProblem.from_spectrum([0.01, 0.5])
        prev, th = np.array([1.0, 1.0]), pr.em_step(np.array([1.0, 1.0]))
        norms = []
        for _ in range(1000):
            nxt = step_g_accel(pr, th, prev, 0.01, safeguard=False)
            norms.append(np.linalg.norm(nxt - th))
            prev, th = th, nxt
        assert fit_rate(norms).fitted_rho == pytest.approx(0.9, rel=1e-2)


class TestTwoStage:
    def test_contracting(self):
        d = 0.9 ** np.arange(50)
        rep = two_stage_check(d, 0.5, 0.19)
        assert rep.holds and rep.entry == 7
        assert rep.max_factor == pytest.approx(0.9) and rep.factor_bound == pytest.approx(0.905)

    def test_increase_inside_fails(self):
        rep = two_stage_check([1.0, 0.4, 0.3, 0.35, 0.1], 0.5, 0.2)
        assert not rep.holds and rep.max_increase == pytest.approx(0.05)

    def test_slow_factor_fails(self):
        assert not two_stage_check(0.95 ** np.arange(20), 2.0, 0.2).holds
        assert two_stage_check(0.95 ** np.arange(20), 2.0, 0.2, factor_slack=0.06).holds

    def test_never_inside_and_zero(self):
        rep = two_stage_check([3.0, 2.0], 1.0, 0.1)
        assert rep.entry is None and rep.holds
        assert two_stage_check([0.1, 0.0, 0.0], 1.0, 0.1).holds
