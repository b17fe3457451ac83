import numpy as np
import pytest

import pfsplit as pf


class TestGaussianData:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            pf.GaussianData(mu=[0.0, 0.0], sigma_mat=[[1.0, 0.5], [0.2, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            pf.GaussianData(mu=[0.0, 0.0], sigma_mat=[[1.0, 2.0], [2.0, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pf.GaussianData(mu=[0.0], sigma_mat=[[1.0, 0.0], [0.0, 1.0]])

    def test_sampling_moments(self, paper_data):
        rng = np.random.default_rng(0)
        xs = paper_data.sample(200_000, rng)
        assert np.allclose(xs.mean(axis=0), paper_data.mu, atol=0.02)
        assert np.allclose(np.cov(xs.T), paper_data.sigma_mat, atol=0.03)


class TestMarginalLaw:
    def test_identity_at_time_zero(self, paper_data, sched):
        law = pf.marginal_law(paper_data, sched, 0.0)
        np.testing.assert_array_equal(law.mean, paper_data.mu)
        np.testing.assert_array_equal(law.cov, paper_data.sigma_mat)

    def test_isotropic_data_stays_isotropic(self, sched):
        # Sigma = I makes cov = (alpha^2 + sigma^2) I = I at every t
        data = pf.GaussianData(mu=[0.0, 0.0], sigma_mat=np.eye(2))
        for t in (0.1, 0.5, 0.9, 1.0):
            law = pf.marginal_law(data, sched, t)
            np.testing.assert_allclose(law.cov, np.eye(2), atol=1e-12)

    def test_forward_process_covariance_monte_carlo(self, paper_data, sched):
        # empirical covariance of alpha x0 + sigma xi must match the law
        t = 1.0
        ev = pf.eval_schedule(sched, t)
        rng = np.random.default_rng(123)
        n = 100_000
        x0 = paper_data.sample(n, rng)
        xi = rng.standard_normal((n, 2))
        xt = ev.alpha * x0 + ev.sigma * xi
        law = pf.marginal_law(paper_data, sched, t)
        emp = np.cov(xt.T)
        c = law.cov
        for i in range(2):
            for j in range(2):
                se = np.sqrt((c[i, i] * c[j, j] + c[i, j] ** 2) / (n - 1))
                assert abs(emp[i, j] - c[i, j]) < 3 * se

    def test_covariance_eigenvalue_floor(self, paper_data, sched):
        lam_min = np.linalg.eigvalsh(paper_data.sigma_mat).min()
        for t in np.linspace(0.0, 1.0, 21):
            ev = pf.eval_schedule(sched, t)
            law = pf.marginal_law(paper_data, sched, t)
            floor = min(ev.sigma ** 2, ev.alpha ** 2 * lam_min)
            assert np.linalg.eigvalsh(law.cov).min() >= floor > 0.0 or t == 0.0

    def test_log_density_normalization_1d(self, sched):
        data = pf.GaussianData(mu=[0.5], sigma_mat=[[2.0]])
        law = pf.marginal_law(data, sched, 0.3)
        xs = np.linspace(-15, 15, 20001)[:, None]
        mass = np.trapz(np.exp(law.log_density(xs)), xs[:, 0])
        assert mass == pytest.approx(1.0, abs=1e-8)


class TestExactScore:
    def test_hand_inverted_two_by_two(self, paper_data, sched):
        # score(0, 0) at t=0 is Sigma^-1 mu elementwise: (5/3, -5/2)
        s = pf.exact_score(paper_data, sched, np.zeros(2), 0.0)
        np.testing.assert_allclose(s, [5.0 / 3.0, -5.0 / 2.0], rtol=1e-12)
        brute = -np.linalg.solve(paper_data.sigma_mat, np.zeros(2) - paper_data.mu)
        np.testing.assert_allclose(s, brute, rtol=1e-12)

    def test_zero_at_marginal_mean(self, paper_data, sched):
        for t in (0.0, 0.4, 1.0):
            x = pf.eval_schedule(sched, t).alpha * paper_data.mu
            np.testing.assert_allclose(
                pf.exact_score(paper_data, sched, x, t), 0.0, atol=1e-12)

    def test_matches_log_density_gradient(self, paper_data, sched):
        rng = np.random.default_rng(21)
        delta = 1e-5
        for _ in range(100):
            t = rng.uniform(0.0, 1.0)
            x = rng.normal(0.0, 2.0, 2)
            law = pf.marginal_law(paper_data, sched, t)
            grad = np.empty(2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = delta
                grad[j] = (law.log_density(x + e) - law.log_density(x - e)) / (2 * delta)
            s = law.score(x)
            np.testing.assert_allclose(s, grad, rtol=1e-6, atol=1e-9)

    def test_batched_equals_single(self, paper_data, sched):
        rng = np.random.default_rng(2)
        xs = rng.normal(size=(17, 2))
        batch = pf.exact_score(paper_data, sched, xs, 0.6)
        singles = np.stack([pf.exact_score(paper_data, sched, x, 0.6) for x in xs])
        np.testing.assert_array_equal(batch, singles)


class TestScoreFieldInterface:
    def test_noise_score_consistency(self, exact_field, sched):
        rng = np.random.default_rng(4)
        for t in rng.uniform(0.01, 1.0, 20):
            sigma = pf.eval_schedule(sched, t).sigma
            if sigma <= 1e-6:
                continue
            x = rng.normal(size=(5, 2))
            resid = exact_field.score(x, t) + exact_field.noise(x, t) / sigma
            assert np.abs(resid).max() < 1e-10

    def test_jacobian_independent_of_x(self, exact_field):
        rng = np.random.default_rng(6)
        x1, x2 = rng.normal(size=(2, 2))
        j1 = pf.score_jacobian(exact_field, x1, 0.37)
        j2 = pf.score_jacobian(exact_field, x2, 0.37)
        np.testing.assert_allclose(j1, j2, atol=1e-12)

    def test_jacobian_isotropic_is_minus_identity(self, sched):
        data = pf.GaussianData(mu=[0.0, 0.0], sigma_mat=np.eye(2))
        field = pf.ExactGaussianScore(data, sched)
        for t in (0.2, 0.8):
            np.testing.assert_allclose(
                pf.score_jacobian(field, np.zeros(2), t), -np.eye(2), atol=1e-12)

    def test_finite_difference_jacobian_of_black_box(self, paper_data, sched, exact_field):
        # exact field wrapped as an opaque callable goes down the FD path
        wrapped = pf.CallableScoreField(exact_field.score, sched, dim=2)
        rng = np.random.default_rng(8)
        for t in (0.15, 0.75):
            x = rng.normal(size=2)
            fd = pf.score_jacobian(wrapped, x, t)
            analytic = pf.score_jacobian(exact_field, x, t)
            np.testing.assert_allclose(fd, analytic, atol=1e-5)

    def test_finite_difference_jacobian_batched(self, exact_field, sched):
        wrapped = pf.CallableScoreField(exact_field.score, sched, dim=2)
        rng = np.random.default_rng(12)
        xs = rng.normal(size=(9, 2))
        jb = pf.score_jacobian(wrapped, xs, 0.4)
        assert jb.shape == (9, 2, 2)
        np.testing.assert_allclose(jb, pf.score_jacobian(exact_field, xs, 0.4), atol=1e-5)
