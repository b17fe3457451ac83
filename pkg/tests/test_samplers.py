import math

import numpy as np
import pytest

import pfsplit as pf
from pfsplit.errors import ConfigError, NumericError
from pfsplit.samplers import default_tableau_for, integrate_backward, read_samples_csv, write_samples_csv, write_trajectory_csv


class TestSchemeAndTableauValidation:
    def test_preset_fraction_sums(self):
        for scheme in (pf.LIE, pf.STRANG, pf.YOSHIDA4):
            assert abs(sum(scheme.a) - 1.0) <= 1e-14
            assert abs(sum(scheme.b) - 1.0) <= 1e-14

    def test_bad_scheme_rejected(self):
        with pytest.raises(ConfigError):
            pf.SplittingScheme(name="bad", a=(0.5, 0.6), b=(1.0, 0.0))
        with pytest.raises(ConfigError):
            pf.SplittingScheme(name="bad", a=(1.0,), b=(0.5, 0.5))

    def test_bad_tableau_rejected(self):
        with pytest.raises(ConfigError):
            pf.RKTableau(name="bad", c=(0.5,), a=((),), b=(1.0,), order=1)
        with pytest.raises(ConfigError):
            pf.RKTableau(name="bad", c=(0.0, 0.5), a=((), ()), b=(0.0, 1.0), order=2)

    def test_midpoint_order_conditions(self):
        t = pf.MIDPOINT
        assert sum(t.b) == pytest.approx(1.0, abs=1e-15)
        assert sum(bi * ci for bi, ci in zip(t.b, t.c)) == pytest.approx(0.5, abs=1e-15)

    def test_rk4_order_conditions(self):
        t = pf.RK4
        b, c, a = t.b, t.c, t.a
        assert sum(b) == pytest.approx(1.0, abs=1e-15)
        assert sum(bi * ci for bi, ci in zip(b, c)) == pytest.approx(0.5, abs=1e-15)
        assert sum(bi * ci ** 2 for bi, ci in zip(b, c)) == pytest.approx(1 / 3, abs=1e-15)
        double = sum(b[i] * a[i][j] * c[j]
                     for i in range(4) for j in range(i))
        assert double == pytest.approx(1 / 6, abs=1e-15)

    def test_preset_lookup(self):
        assert pf.get_scheme("strang") is pf.STRANG
        assert pf.get_tableau("rk4") is pf.RK4
        with pytest.raises(ConfigError):
            pf.get_scheme("leapfrog")
        with pytest.raises(ConfigError):
            pf.get_tableau("heun")
        assert default_tableau_for(pf.LIE) is pf.EULER
        assert default_tableau_for(pf.STRANG) is pf.MIDPOINT
        assert default_tableau_for(pf.YOSHIDA4) is pf.RK4


class TestDriftB:
    def test_zero_field_gives_zero_drift(self, sched, zero_field_2d):
        rng = np.random.default_rng(0)
        for t in (0.0, 0.3, 1.0):
            out = pf.drift_b(zero_field_2d, sched, rng.normal(size=(4, 2)), t)
            np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_zero_drift_at_marginal_mean(self, paper_data, sched, exact_field):
        for t in (0.2, 0.9):
            x = pf.eval_schedule(sched, t).alpha * paper_data.mu
            np.testing.assert_allclose(
                pf.drift_b(exact_field, sched, x, t), 0.0, atol=1e-12)

    def test_epsilon_view_matches_score_view(self, sched, exact_field):
        rng = np.random.default_rng(1)
        for t in rng.uniform(0.05, 1.0, 20):
            ev = pf.eval_schedule(sched, t)
            if ev.sigma <= 1e-3:
                continue
            x = rng.normal(size=(3, 2))
            via_eps = (0.5 * ev.g2 / ev.sigma) * exact_field.noise(x, t)
            via_score = -0.5 * ev.g2 * exact_field.score(x, t)
            np.testing.assert_allclose(via_eps, via_score, atol=1e-10)

    def test_score_view_near_sigma_zero(self, sched, exact_field):
        out = pf.drift_b(exact_field, sched, np.array([2.0, 2.0]), 0.0)
        ev = pf.eval_schedule(sched, 0.0)
        expected = -0.5 * ev.g2 * exact_field.score(np.array([2.0, 2.0]), 0.0)
        np.testing.assert_array_equal(out, expected)


class TestRKAdvance:
    def test_zero_step_returns_input(self, sched, exact_field):
        y = np.array([1.0, 2.0])
        assert pf.rk_advance(pf.MIDPOINT, exact_field, sched, y, 0.5, 0.0) is y

    def test_constant_drift_all_stages_equal(self, flat_sched):
        # drift is c everywhere, so every tableau collapses to y + dt * c
        c = np.array([0.7, -0.4])
        field = pf.CallableScoreField(lambda x, t: c / (-0.5 * flat_sched.eval(t).g2),
                                      flat_sched, dim=2)
        y = np.array([0.1, 0.2])
        for tableau in (pf.EULER, pf.MIDPOINT, pf.RK4):
            for dt in (0.125, -0.125):
                out = pf.rk_advance(tableau, field, flat_sched, y, 0.5, dt)
                np.testing.assert_allclose(out, y + dt * c, atol=1e-12)

    def test_midpoint_truncates_exponential(self, flat_sched):
        # B(t, x) = x via the flat schedule; one backward step matches the
        # quadratic Taylor truncation of exp(-h)
        field = pf.CallableScoreField(lambda x, t: -x, flat_sched, dim=1)
        y = np.array([0.9])
        h = 0.1
        out = pf.rk_advance(pf.MIDPOINT, field, flat_sched, y, 0.7, -h)
        truncated = y * (1.0 - h + 0.5 * h * h)
        np.testing.assert_allclose(out, truncated, atol=1e-14)
        assert abs(out[0] - y[0] * math.exp(-h)) <= h ** 3


class TestStepEquivalences:
    def test_zero_field_steps_are_pure_linear_flow(self, sched, zero_field_2d):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 2))
        t_n, h = 0.75, 1 / 16
        expected = x * pf.integrating_factor(sched, t_n - h, t_n)
        np.testing.assert_allclose(pf.strang_step(zero_field_2d, sched, x, t_n, h),
                                   expected, rtol=1e-14)
        np.testing.assert_allclose(pf.lie_step(zero_field_2d, sched, x, t_n, h),
                                   expected, rtol=1e-14)

    def test_flat_schedule_strang_is_bare_midpoint(self, flat_sched, paper_data):
        # f = 0 kills the linear flow; the step must equal midpoint RK2 on
        # x' = B backward over h
        field = pf.CallableScoreField(lambda x, t: -np.tanh(x) * (1 + t), flat_sched, dim=2)
        x = np.array([0.4, -1.2])
        t_n, h = 0.6, 0.05
        manual_k1 = -pf.drift_b(field, flat_sched, x, t_n)
        manual_k2 = -pf.drift_b(field, flat_sched, x + (h / 2) * manual_k1, t_n - 0.5 * h)
        np.testing.assert_array_equal(
            pf.strang_step(field, flat_sched, x, t_n, h), x + h * manual_k2)

    def test_flat_schedule_lie_is_bare_euler(self, flat_sched):
        field = pf.CallableScoreField(lambda x, t: -np.sin(x) - t, flat_sched, dim=2)
        x = np.array([0.4, -1.2])
        t_n, h = 0.6, 0.05
        expected = x - h * pf.drift_b(field, flat_sched, x, t_n)
        np.testing.assert_array_equal(pf.lie_step(field, flat_sched, x, t_n, h), expected)

    def test_five_line_matches_closed_form(self, sched, exact_field):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            x = rng.normal(0.0, 2.0, 2)
            T = rng.integers(4, 256)
            n = rng.integers(1, T + 1)
            t_n, h = n / T, 1.0 / T
            a = pf.strang_step(exact_field, sched, x, t_n, h)
            b = pf.strang_step_closed_form(exact_field, sched, x, t_n, h)
            assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())

    def test_composition_presets_bitwise_equal(self, sched, exact_field):
        rng = np.random.default_rng(6)
        for _ in range(200):
            x = rng.normal(0.0, 2.0, (3, 2))
            T = int(rng.integers(4, 200))
            n = int(rng.integers(1, T + 1))
            t_n, h = n / T, 1.0 / T
            strang = pf.strang_step(exact_field, sched, x, t_n, h)
            comp_s = pf.composition_step(pf.STRANG, pf.MIDPOINT, exact_field, sched, x, t_n, h)
            np.testing.assert_array_equal(strang, comp_s)
            lie = pf.lie_step(exact_field, sched, x, t_n, h)
            comp_l = pf.composition_step(pf.LIE, pf.EULER, exact_field, sched, x, t_n, h)
            np.testing.assert_array_equal(lie, comp_l)

    def test_zero_field_composition_any_scheme(self, sched, zero_field_2d):
        # sum(a) = 1 makes the product of linear factors the full-step factor
        x = np.array([[1.5, -0.5]])
        t_n, h = 0.5, 1 / 32
        expected = x * pf.integrating_factor(sched, t_n - h, t_n)
        for scheme in (pf.LIE, pf.STRANG, pf.YOSHIDA4):
            tableau = default_tableau_for(scheme)
            out = pf.composition_step(scheme, tableau, zero_field_2d, sched, x, t_n, h)
            np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_yoshida_rejected_at_domain_boundary(self, sched, probe_1d):
        x = np.array([0.7])
        with pytest.raises(ConfigError):
            pf.composition_step(pf.YOSHIDA4, pf.RK4, probe_1d, sched, x, 1.0, 0.1)
        with pytest.raises(ConfigError):
            pf.composition_step(pf.YOSHIDA4, pf.RK4, probe_1d, sched, x, 0.05, 0.05)


class TestProbeOrders:
    """d=1, mu=0, Sigma=1: the full drift vanishes, so the exact solution is
    constant and the step error is pure scheme error (closed-form oracle)."""

    def test_strang_one_step_is_third_order(self, sched, probe_1d):
        x = np.array([0.7])
        errs = {h: abs(pf.strang_step(probe_1d, sched, x, 1.0, h)[0] - x[0])
                for h in (1 / 64, 1 / 128)}
        ratio = errs[1 / 64] / errs[1 / 128]
        assert 6.5 <= ratio <= 9.5

    def test_lie_global_error_is_first_order(self, sched, probe_1d):
        x = np.array([0.7])
        errs = []
        for T in (64, 128):
            run = pf.SamplerRun(field=probe_1d, sched=sched, T=T,
                                scheme=pf.LIE, tableau=pf.EULER)
            out, _ = integrate_backward(run, x)
            errs.append(abs(out[0] - x[0]))
        assert 1.7 <= errs[0] / errs[1] <= 2.3

    def test_yoshida_is_fourth_order_on_interior_window(self, sched, probe_1d):
        # endpoint sub-steps would leave [0, 1], so march over [0.3, 0.8]
        x = np.array([0.7])

        def window_error(T):
            xx = x.copy()
            h = 0.5 / T
            for n in range(T, 0, -1):
                xx = pf.composition_step(pf.YOSHIDA4, pf.RK4, probe_1d, sched,
                                         xx, 0.3 + n * h, h)
            return abs(xx[0] - x[0])

        Ts = (10, 20, 40, 80)
        fit = pf.fit_loglog_slope([(0.5 / T, window_error(T)) for T in Ts])
        assert fit.slope >= 3.3

    def test_strang_is_second_order_on_same_window(self, sched, probe_1d):
        x = np.array([0.7])

        def window_error(T):
            xx = x.copy()
            h = 0.5 / T
            for n in range(T, 0, -1):
                xx = pf.composition_step(pf.STRANG, pf.MIDPOINT, probe_1d, sched,
                                         xx, 0.3 + n * h, h)
            return abs(xx[0] - x[0])

        Ts = (10, 20, 40, 80)
        fit = pf.fit_loglog_slope([(0.5 / T, window_error(T)) for T in Ts])
        assert 1.8 <= fit.slope <= 2.2


class TestStability:
    def test_one_step_amplification_bound(self, sched, exact_field):
        # perturbation growth per step stays within (1 + C h); C pinned from
        # a one-time estimate with ample headroom
        C = 15.0
        rng = np.random.default_rng(3)
        for T in (16, 64, 256):
            h = 1.0 / T
            for n in range(T, 0, -max(1, T // 16)):
                t_n = n / T
                xi = rng.normal(0.0, 2.0, (32, 2))
                eta = xi + rng.normal(0.0, 0.1, (32, 2))
                a = pf.strang_step(exact_field, sched, xi, t_n, h)
                b = pf.strang_step(exact_field, sched, eta, t_n, h)
                ratios = (np.linalg.norm(a - b, axis=1)
                          / np.linalg.norm(xi - eta, axis=1))
                assert ratios.max() <= 1.0 + C * h


class TestGenerateSamples:
    def test_deterministic_given_seed(self, sched, exact_field):
        run = pf.SamplerRun(field=exact_field, sched=sched, T=8)
        a = pf.generate_samples(run, 5, seed=123)
        b = pf.generate_samples(run, 5, seed=123)
        np.testing.assert_array_equal(a, b)
        c = pf.generate_samples(run, 5, seed=124)
        assert not np.array_equal(a, c)

    def test_zero_field_is_pure_linear_flow(self, sched, zero_field_2d):
        run = pf.SamplerRun(field=zero_field_2d, sched=sched, T=16)
        n = 10_000
        out = pf.generate_samples(run, n, seed=11)
        gain = pf.integrating_factor(sched, 0.0, 1.0)
        rng = np.random.default_rng(np.random.SeedSequence(11))
        np.testing.assert_allclose(out, rng.standard_normal((n, 2)) * gain, rtol=1e-12)
        emp = np.cov(out.T)
        var = gain ** 2
        se = var * np.sqrt(2.0 / (n - 1))
        assert abs(emp[0, 0] - var) < 3 * se
        assert abs(emp[1, 1] - var) < 3 * se

    def test_paper_setup_moments(self, paper_data, sched, exact_field):
        n = 20_000
        run = pf.SamplerRun(field=exact_field, sched=sched, T=128)
        out = pf.generate_samples(run, n, seed=7)
        mean_se = np.sqrt(np.diag(paper_data.sigma_mat) / n)
        assert np.all(np.abs(out.mean(axis=0) - paper_data.mu) < 3 * mean_se)
        emp = np.cov(out.T)
        c = paper_data.sigma_mat
        for i in range(2):
            for j in range(2):
                se = np.sqrt((c[i, i] * c[j, j] + c[i, j] ** 2) / (n - 1))
                assert abs(emp[i, j] - c[i, j]) < 3 * se

    def test_divergent_field_raises(self, sched):
        bad = pf.CallableScoreField(lambda x, t: x * 1e200, sched, dim=2)
        run = pf.SamplerRun(field=bad, sched=sched, T=4)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericError):
                pf.generate_samples(run, 3, seed=0)

    def test_run_validation(self, sched, exact_field):
        with pytest.raises(ConfigError):
            pf.SamplerRun(field=exact_field, sched=sched, T=0)
        run = pf.SamplerRun(field=exact_field, sched=sched, T=4)
        assert run.tableau is pf.MIDPOINT
        with pytest.raises(ConfigError):
            pf.generate_samples(run, 0, seed=1)

    def test_t_min_snaps_to_grid(self, paper_data, exact_field):
        sched_min = pf.LinearBetaSchedule(t_min=0.25)
        field = pf.ExactGaussianScore(paper_data, sched_min)
        run = pf.SamplerRun(field=field, sched=sched_min, T=8, record_trajectory=True)
        assert run.n_stop == 2
        _, traj = pf.generate_samples(run, 3, seed=5)
        assert traj.shape == (7, 3, 2)  # states at t = 1, 7/8, ..., 2/8


class TestSampleIO:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = rng.normal(size=(20, 2))
        path = tmp_path / "s.csv"
        write_samples_csv(path, samples)
        text = path.read_text().splitlines()
        assert text[0] == "x1,x2"
        np.testing.assert_array_equal(read_samples_csv(path), samples)

    def test_trajectory_csv(self, sched, exact_field, tmp_path):
        run = pf.SamplerRun(field=exact_field, sched=sched, T=4, record_trajectory=True)
        _, traj = pf.generate_samples(run, 2, seed=3)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, traj, T=4)
        lines = path.read_text().splitlines()
        assert lines[0] == "particle,step,t,x1,x2"
        assert len(lines) == 1 + 2 * 5
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "4" and float(first[2]) == 1.0
