import numpy as np
import pytest

from jointdict.model import (
    GAMMA_FLOOR,
    SupportTree,
    build_selectors,
    normalize_columns,
    singleton_tree,
)
from jointdict.posterior import (
    ConvergenceError,
    NumericalError,
    estep,
    log_marginal,
    log_marginal_hier,
    posterior_approx,
    posterior_exact,
    posterior_hier,
    posterior_td,
    posterior_woodbury,
    sigma_loglik_derivative,
)

_LOG_2PI = np.log(2.0 * np.pi)


def random_instance(rng, n, m, l=1, gamma_scale=1.0):
    D = rng.standard_normal((n, m))
    Y = rng.standard_normal((n, l))
    G = gamma_scale * rng.uniform(0.05, 2.0, size=(m, l))
    sigma = float(rng.uniform(0.3, 1.5))
    return D, Y, G, sigma


def dense_log_marginal(D, Y, G, sigma):
    """Independent oracle: explicit determinant and inverse per sample."""
    total = 0.0
    N = D.shape[0]
    for i in range(Y.shape[1]):
        cov = sigma**2 * np.eye(N) + D @ np.diag(G[:, i]) @ D.T
        sign, logdet = np.linalg.slogdet(cov)
        assert sign > 0
        quad = Y[:, i] @ np.linalg.solve(cov, Y[:, i])
        total += -0.5 * (N * _LOG_2PI + logdet + quad)
    return total


class TestPosteriorExact:
    def test_identity_dictionary(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(4)
        mu, Sigma = posterior_exact(np.eye(4), y, np.ones(4), 1.0)
        np.testing.assert_allclose(Sigma, 0.5 * np.eye(4), atol=1e-12)
        np.testing.assert_allclose(mu, 0.5 * y, atol=1e-12)

    def test_floor_suppresses_mean(self):
        rng = np.random.default_rng(1)
        D = rng.standard_normal((6, 10))
        y = rng.standard_normal(6)
        sigma = 0.7
        mu, _ = posterior_exact(D, y, np.zeros(10), sigma)
        bound = GAMMA_FLOOR * np.linalg.norm(D.T @ y) / sigma**2
        assert np.linalg.norm(mu) <= bound * (1 + 1e-6)

    def test_matches_woodbury_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(5, 51))
            m = int(rng.integers(5, 201))
            D, Y, G, sigma = random_instance(rng, n, m)
            mu1, S1 = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
            mu2, S2 = posterior_woodbury(D, Y[:, 0], G[:, 0], sigma)
            np.testing.assert_allclose(mu1, mu2, atol=1e-9)
            np.testing.assert_allclose(S1, S2, atol=1e-9)

    def test_covariance_is_psd(self):
        rng = np.random.default_rng(3)
        D, Y, G, sigma = random_instance(rng, 10, 30)
        _, Sigma = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
        eigs = np.linalg.eigvalsh(Sigma)
        assert eigs.min() >= -1e-10 * np.abs(Sigma).max()

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            posterior_exact(np.eye(2), np.array([np.nan, 0.0]), np.ones(2), 1.0)


class TestPosteriorWoodbury:
    def test_identity_case(self):
        rng = np.random.default_rng(4)
        y = rng.standard_normal(4)
        mu, Sigma = posterior_woodbury(np.eye(4), y, np.ones(4), 1.0)
        np.testing.assert_allclose(Sigma, 0.5 * np.eye(4), atol=1e-12)
        np.testing.assert_allclose(mu, 0.5 * y, atol=1e-12)

    def test_wide_dictionary(self):
        rng = np.random.default_rng(5)
        D, Y, G, sigma = random_instance(rng, 20, 1000)
        mu1, S1 = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
        mu2, S2 = posterior_woodbury(D, Y[:, 0], G[:, 0], sigma)
        np.testing.assert_allclose(mu1, mu2, atol=1e-9)
        np.testing.assert_allclose(S1, S2, atol=1e-9)

    def test_mostly_floored_gamma(self):
        rng = np.random.default_rng(6)
        D, Y, G, sigma = random_instance(rng, 15, 60)
        g = G[:, 0].copy()
        g[rng.permutation(60)[:54]] = 0.0    # clamped to the floor inside
        mu1, S1 = posterior_exact(D, Y[:, 0], g, sigma)
        mu2, S2 = posterior_woodbury(D, Y[:, 0], g, sigma)
        np.testing.assert_allclose(mu1, mu2, atol=1e-9)
        np.testing.assert_allclose(S1, S2, atol=1e-9)


class TestPosteriorApprox:
    def test_diagonal_system_matches_exact(self):
        rng = np.random.default_rng(7)
        D = np.diag(rng.uniform(0.5, 2.0, size=5))
        y = rng.standard_normal(5)
        g = rng.uniform(0.1, 1.0, size=5)
        mu_exact, _ = posterior_exact(D, y, g, 0.8)
        mu, _ = posterior_approx(D, y, g, 0.8, cg_tol=1e-14)
        np.testing.assert_allclose(mu, mu_exact, atol=1e-10)

    def test_tight_tolerance_matches_exact(self):
        rng = np.random.default_rng(8)
        D, Y, G, sigma = random_instance(rng, 10, 40)
        mu_exact, _ = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
        mu, _ = posterior_approx(D, Y[:, 0], G[:, 0], sigma, cg_tol=1e-12)
        np.testing.assert_allclose(mu, mu_exact, atol=1e-8)

    def test_diagonal_covariance_identity_case(self):
        mu, diag = posterior_approx(np.eye(4), np.ones(4), np.ones(4), 1.0)
        np.testing.assert_allclose(diag, 0.5, atol=1e-12)

    def test_diag_formula(self):
        rng = np.random.default_rng(9)
        D, Y, G, sigma = random_instance(rng, 8, 20)
        _, diag = posterior_approx(D, Y[:, 0], G[:, 0], sigma)
        expected = 1.0 / (np.sum(D**2, axis=0) / sigma**2 + 1.0 / G[:, 0])
        np.testing.assert_allclose(diag, expected, atol=1e-12)

    def test_nonconvergence_raises_with_residual(self):
        rng = np.random.default_rng(10)
        D, Y, G, sigma = random_instance(rng, 10, 40)
        with pytest.raises(ConvergenceError) as err:
            posterior_approx(D, Y[:, 0], G[:, 0], sigma, cg_tol=1e-14,
                             cg_max_iter=2)
        assert err.value.residual > 0


class TestPosteriorHier:
    def test_singleton_tree_reduces_to_exact(self):
        rng = np.random.default_rng(11)
        sel = build_selectors(singleton_tree(6))
        D = rng.standard_normal((4, 6))
        y = rng.standard_normal(4)
        g = rng.uniform(0.1, 1.0, size=6)
        mu_h, S_h = posterior_hier(D, sel, y, g, 0.9)
        mu_e, S_e = posterior_exact(D, y, g, 0.9)
        np.testing.assert_allclose(mu_h, mu_e, atol=1e-10)
        np.testing.assert_allclose(S_h, S_e, atol=1e-10)

    def test_forward_model_recovery(self):
        # noiseless y built from a known lifted vector is recovered by
        # S^T mu_hat as sigma shrinks
        rng = np.random.default_rng(12)
        tree = SupportTree(((0, 1), (2,)))
        sel = build_selectors(tree)
        D = normalize_columns(rng.standard_normal((8, 3)))
        x = np.array([1.3, 0.0, -0.7])
        x_hat = sel.s2 @ sel.r2 @ x
        y = D @ sel.s2.T @ x_hat
        g = np.full(6, 4.0)
        mu_hat, _ = posterior_hier(D, sel, y, g, 1e-5)
        np.testing.assert_allclose(sel.s2.T @ mu_hat, x, atol=1e-4)

    def test_lifted_covariance_psd(self):
        rng = np.random.default_rng(13)
        tree = SupportTree(((0, 1), (2,)))
        sel = build_selectors(tree)
        D = rng.standard_normal((5, 3))
        y = rng.standard_normal(5)
        g = rng.uniform(0.05, 2.0, size=6)
        _, S_h = posterior_hier(D, sel, y, g, 0.6)
        np.testing.assert_allclose(S_h, S_h.T, atol=1e-12)
        assert np.linalg.eigvalsh(S_h).min() >= -1e-12

    def test_root_modality_uses_s1(self):
        rng = np.random.default_rng(14)
        tree = SupportTree(((0, 1), (2,)))
        sel = build_selectors(tree)
        D1 = rng.standard_normal((5, 2))     # two root atoms
        y = rng.standard_normal(5)
        g = rng.uniform(0.1, 1.0, size=3)    # M2 entries -> S_1 lift
        mu_hat, _ = posterior_hier(D1, sel, y, g, 0.5)
        A = D1 @ sel.s1.T
        mu_ref, _ = posterior_exact(A, y, g, 0.5)
        np.testing.assert_allclose(mu_hat, mu_ref, atol=1e-10)


class TestPosteriorTd:
    def test_zero_classifier_reduces_to_exact(self):
        rng = np.random.default_rng(15)
        D, Y, G, sigma = random_instance(rng, 8, 16)
        W = np.zeros((3, 16))
        h = rng.standard_normal(3)
        mu_td, S_td = posterior_td(D, W, Y[:, 0], h, G[:, 0], sigma, 1.0)
        mu_e, S_e = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
        np.testing.assert_allclose(mu_td, mu_e, atol=1e-10)
        np.testing.assert_allclose(S_td, S_e, atol=1e-10)

    def test_large_beta_flattens_label_term(self):
        rng = np.random.default_rng(16)
        D, Y, G, sigma = random_instance(rng, 8, 16)
        W = rng.standard_normal((3, 16))
        h = rng.standard_normal(3)
        mu_td, S_td = posterior_td(D, W, Y[:, 0], h, G[:, 0], sigma, 1e6)
        mu_e, S_e = posterior_exact(D, Y[:, 0], G[:, 0], sigma)
        np.testing.assert_allclose(mu_td, mu_e, atol=1e-6)
        np.testing.assert_allclose(S_td, S_e, atol=1e-6)

    def test_matches_direct_dense_inverse(self):
        rng = np.random.default_rng(17)
        D, Y, G, sigma = random_instance(rng, 8, 12)
        W = rng.standard_normal((4, 12))
        h = rng.standard_normal(4)
        beta = 0.7
        mu_td, S_td = posterior_td(D, W, Y[:, 0], h, G[:, 0], sigma, beta)
        precision = (D.T @ D / sigma**2 + W.T @ W / beta**2
                     + np.diag(1.0 / G[:, 0]))
        S_ref = np.linalg.inv(precision)
        mu_ref = S_ref @ (D.T @ Y[:, 0] / sigma**2 + W.T @ h / beta**2)
        np.testing.assert_allclose(S_td, S_ref, atol=1e-10)
        np.testing.assert_allclose(mu_td, mu_ref, atol=1e-10)


class TestLogMarginal:
    def test_floored_gamma_approaches_noise_only(self):
        rng = np.random.default_rng(18)
        D = rng.standard_normal((6, 12))
        Y = rng.standard_normal((6, 5))
        sigma = 0.9
        ll = log_marginal(D, Y, np.zeros((12, 5)), sigma)
        noise_only = float(np.sum(-0.5 * (6 * _LOG_2PI + 6 * np.log(sigma**2)
                                          + np.sum(Y**2, axis=0) / sigma**2)))
        np.testing.assert_allclose(ll, noise_only, rtol=1e-8)

    def test_scalar_gaussian_closed_form(self):
        D = np.array([[2.0]])
        Y = np.array([[0.7]])
        g = np.array([[0.5]])
        sigma = 0.4
        var = sigma**2 + 4.0 * 0.5
        expected = -0.5 * (_LOG_2PI + np.log(var) + 0.49 / var)
        np.testing.assert_allclose(log_marginal(D, Y, g, sigma), expected,
                                   rtol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(19)
        D, Y, G, sigma = random_instance(rng, 9, 25, l=7)
        np.testing.assert_allclose(log_marginal(D, Y, G, sigma),
                                   dense_log_marginal(D, Y, G, sigma),
                                   rtol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(20)
        D, Y, G, sigma = random_instance(rng, 7, 15, l=4)
        perm = rng.permutation(15)
        ll1 = log_marginal(D, Y, G, sigma)
        ll2 = log_marginal(D[:, perm], Y, G[perm], sigma)
        np.testing.assert_allclose(ll1, ll2, rtol=1e-12)


class TestLogMarginalHier:
    def test_singleton_tree_equals_plain(self):
        rng = np.random.default_rng(21)
        sel = build_selectors(singleton_tree(5))
        D = rng.standard_normal((4, 5))
        Y = rng.standard_normal((4, 3))
        G = rng.uniform(0.1, 1.0, size=(5, 3))
        np.testing.assert_allclose(log_marginal_hier(D, sel, Y, G, 0.8),
                                   log_marginal(D, Y, G, 0.8), rtol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(22)
        tree = SupportTree(((0, 1), (2, 3)))
        sel = build_selectors(tree)
        D = rng.standard_normal((6, 4))
        Y = rng.standard_normal((6, 3))
        G = rng.uniform(0.1, 1.0, size=(8, 3))
        A = D @ sel.s2.T
        np.testing.assert_allclose(log_marginal_hier(D, sel, Y, G, 0.5),
                                   dense_log_marginal(A, Y, G, 0.5),
                                   rtol=1e-10)

    def test_floored_gamma_noise_only(self):
        rng = np.random.default_rng(23)
        tree = SupportTree(((0, 1), (2,)))
        sel = build_selectors(tree)
        D = rng.standard_normal((4, 3))
        Y = rng.standard_normal((4, 2))
        sigma = 1.1
        ll = log_marginal_hier(D, sel, Y, np.zeros((6, 2)), sigma)
        noise_only = float(np.sum(-0.5 * (4 * _LOG_2PI + 4 * np.log(sigma**2)
                                          + np.sum(Y**2, axis=0) / sigma**2)))
        np.testing.assert_allclose(ll, noise_only, rtol=1e-6)


class TestSigmaDerivative:
    def test_matches_finite_differences(self):
        # central differences of the marginal log-likelihood, step 1e-5,
        # on random instances: the load-bearing annealing correctness check
        rng = np.random.default_rng(24)
        for _ in range(100):
            n = int(rng.integers(2, 21))
            m = int(rng.integers(2, 51))
            l = int(rng.integers(1, 6))
            D, Y, G, sigma = random_instance(rng, n, m, l=l)
            h = 1e-5
            fd = (log_marginal(D, Y, G, sigma + h)
                  - log_marginal(D, Y, G, sigma - h)) / (2 * h)
            val = sigma_loglik_derivative(D, Y, G, sigma)
            assert abs(val - fd) <= 1e-4 * max(abs(fd), 1.0)

    def test_stats_form_matches_direct_form(self):
        rng = np.random.default_rng(25)
        for _ in range(20):
            D, Y, G, sigma = random_instance(rng, 8, 24, l=6)
            stats = estep(D, Y, G, sigma)
            direct = sigma_loglik_derivative(D, Y, G, sigma)
            from_stats = sigma_loglik_derivative(D, Y, G, sigma, stats)
            np.testing.assert_allclose(from_stats, direct, rtol=1e-8)

    def test_pure_noise_sign(self):
        # zero data under a floored model always favors shrinking sigma
        D = np.zeros((5, 8))
        Y = np.zeros((5, 3))
        G = np.zeros((8, 3))
        for sigma in (0.1, 1.0, 10.0):
            assert sigma_loglik_derivative(D, Y, G, sigma) < 0

    def test_zero_at_ml_sigma(self):
        # draw data from the model at a known noise level so the ML sigma
        # is interior, then locate it by bisection on finite differences
        rng = np.random.default_rng(26)
        D = rng.standard_normal((6, 10))
        G = rng.uniform(0.1, 1.0, size=(10, 40))
        sigma_true = 0.8
        X = np.sqrt(G) * rng.standard_normal((10, 40))
        Y = D @ X + sigma_true * rng.standard_normal((6, 40))
        from scipy.optimize import brentq

        def fd_derivative(s, h=1e-6):
            return (log_marginal(D, Y, G, s + h)
                    - log_marginal(D, Y, G, s - h)) / (2 * h)

        sigma_star = brentq(fd_derivative, 0.05, 50.0, xtol=1e-12)
        assert 0.05 < sigma_star < 50.0
        assert abs(sigma_loglik_derivative(D, Y, G, sigma_star)) < 1e-6


class TestBatchedEstep:
    def test_matches_per_sample_ops(self):
        rng = np.random.default_rng(27)
        D, Y, G, sigma = random_instance(rng, 9, 30, l=11)
        stats = estep(D, Y, G, sigma, want_full=True)
        sum_ref = np.zeros((30, 30))
        for i in range(11):
            mu_i, S_i = posterior_woodbury(D, Y[:, i], G[:, i], sigma)
            np.testing.assert_allclose(stats.mu[:, i], mu_i, atol=1e-10)
            np.testing.assert_allclose(stats.sigma_diag[:, i], np.diag(S_i),
                                       atol=1e-10)
            np.testing.assert_allclose(stats.sigma_full[i], S_i, atol=1e-10)
            sum_ref += S_i
        np.testing.assert_allclose(stats.sigma_sum, sum_ref, atol=1e-9)
        np.testing.assert_allclose(stats.loglik,
                                   dense_log_marginal(D, Y, G, sigma),
                                   rtol=1e-10)

    def test_chunking_is_exact(self):
        rng = np.random.default_rng(28)
        D, Y, G, sigma = random_instance(rng, 6, 14, l=23)
        a = estep(D, Y, G, sigma, chunk=5)
        b = estep(D, Y, G, sigma, chunk=1000)
        np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
        np.testing.assert_allclose(a.sigma_sum, b.sigma_sum, atol=1e-12)
        np.testing.assert_allclose(a.loglik, b.loglik, rtol=1e-12)

    def test_approximate_mode_tracks_exact(self):
        rng = np.random.default_rng(29)
        D, Y, G, sigma = random_instance(rng, 10, 25, l=9)
        ex = estep(D, Y, G, sigma)
        ap = estep(D, Y, G, sigma, mode="approximate", cg_tol=1e-12)
        np.testing.assert_allclose(ap.mu, ex.mu, atol=1e-8)
        assert ap.sigma_sum is None
        np.testing.assert_allclose(ap.loglik, ex.loglik, rtol=1e-10)
