import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointdict.model import SupportTree, ValidationError, normalize_columns
from jointdict.metrics import (
    atom_alignment,
    cross_modal_map,
    denoise,
    output_snr_db,
    recall_at_k,
    recovery_probability,
    subspace_alignment,
    support_agreement,
    varrho_scores,
    vartheta_scores,
)


class TestAtomAlignment:
    def test_negative_scaled_copy_scores_one(self):
        rng = np.random.default_rng(0)
        d = rng.standard_normal(8)
        D_hat = rng.standard_normal((8, 5))
        D_hat[:, 3] = -2.0 * d
        assert atom_alignment(d, D_hat) == pytest.approx(1.0)

    def test_orthogonal_scores_zero(self):
        d = np.array([1.0, 0.0, 0.0])
        D_hat = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert atom_alignment(d, D_hat) == pytest.approx(0.0)

    def test_matches_bruteforce_loop(self):
        rng = np.random.default_rng(1)
        d = rng.standard_normal(6)
        D_hat = rng.standard_normal((6, 9))
        best = max(abs(d @ D_hat[:, m])
                   / (np.linalg.norm(d) * np.linalg.norm(D_hat[:, m]))
                   for m in range(9))
        assert atom_alignment(d, D_hat) == pytest.approx(best)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValidationError):
            atom_alignment(np.zeros(3), np.eye(3))

    def test_invariance_under_scaling(self):
        rng = np.random.default_rng(2)
        d = rng.standard_normal(7)
        D_hat = rng.standard_normal((7, 4))
        a = atom_alignment(d, D_hat)
        b = atom_alignment(-3.0 * d, D_hat * rng.uniform(0.5, 2.0, size=4))
        assert a == pytest.approx(b)


class TestRecoveryProbability:
    def test_permuted_sign_flipped_copy_is_perfect(self):
        rng = np.random.default_rng(3)
        D = normalize_columns(rng.standard_normal((10, 15)))
        perm = rng.permutation(15)
        signs = rng.choice([-1.0, 1.0], size=15)
        assert recovery_probability(D, D[:, perm] * signs) == 1.0

    def test_random_pair_scores_low(self):
        rng = np.random.default_rng(4)
        hits = []
        for _ in range(20):
            D1 = rng.standard_normal((20, 30))
            D2 = rng.standard_normal((20, 30))
            hits.append(recovery_probability(D1, D2))
        assert np.mean(hits) < 0.1


class TestSubspaceAlignment:
    def test_identical_subspace_scores_one(self):
        rng = np.random.default_rng(5)
        block = rng.standard_normal((10, 2))
        tree_hat = SupportTree(((0, 1), (2,)))
        D_hat = np.column_stack([block @ rng.standard_normal((2, 2))
                                 + 0.0, rng.standard_normal(10)])
        # first branch spans the same plane (random invertible mix)
        score = subspace_alignment(block, D_hat, tree_hat)
        assert score == pytest.approx(1.0, abs=1e-10)

    def test_orthogonal_lines_score_zero(self):
        block = np.array([[1.0], [0.0], [0.0]])
        D_hat = np.array([[0.0], [1.0], [0.0]])
        assert subspace_alignment(block, D_hat, SupportTree(((0,),))) == \
            pytest.approx(0.0, abs=1e-12)

    def test_matches_principal_angle_oracle(self):
        from scipy.linalg import subspace_angles
        rng = np.random.default_rng(6)
        for _ in range(20):
            b1 = rng.standard_normal((12, 3))
            b2 = rng.standard_normal((12, 3))
            tree_hat = SupportTree(((0, 1, 2),))
            ours = subspace_alignment(b1, b2, tree_hat)
            oracle = float(np.prod(np.cos(subspace_angles(b1, b2))))
            assert ours == pytest.approx(oracle, abs=1e-10)

    def test_basis_choice_invariance(self):
        rng = np.random.default_rng(7)
        block = rng.standard_normal((9, 2))
        mix = rng.standard_normal((2, 2)) + 2 * np.eye(2)
        tree_hat = SupportTree(((0, 1),))
        D_hat = rng.standard_normal((9, 2))
        a = subspace_alignment(block, D_hat, tree_hat)
        b = subspace_alignment(block @ mix, D_hat, tree_hat)
        assert a == pytest.approx(b, abs=1e-10)

    def test_rank_deficient_block_rejected(self):
        block = np.ones((5, 2))
        with pytest.raises(ValidationError):
            subspace_alignment(block, np.eye(5), SupportTree(((0, 1),)))


class TestThetaRhoScores:
    def test_perfect_recovery(self):
        rng = np.random.default_rng(8)
        tree = SupportTree(((0, 1), (2,), (3,)))
        D2 = normalize_columns(rng.standard_normal((8, 4)))
        t1, t2 = vartheta_scores(D2, D2, tree, tree)
        assert (t1, t2) == (1.0, 1.0)
        r1, r2 = varrho_scores(D2, D2, tree)
        assert (r1, r2) == (1.0, 1.0)

    def test_all_multileaf_tree_reports_absent_singleton_score(self):
        rng = np.random.default_rng(9)
        tree = SupportTree(((0, 1), (2, 3)))
        D2 = normalize_columns(rng.standard_normal((8, 4)))
        t1, t2 = vartheta_scores(D2, D2, tree, tree)
        assert t1 is None and t2 == 1.0
        r1, r2 = varrho_scores(D2, D2, tree)
        assert r1 is None and r2 == 1.0

    def test_random_dictionary_scores_near_zero(self):
        rng = np.random.default_rng(10)
        tree = SupportTree(((0, 1), (2,), (3,)))
        vals = []
        for _ in range(10):
            D2 = normalize_columns(rng.standard_normal((20, 4)))
            D_bad = normalize_columns(rng.standard_normal((20, 4)))
            t1, t2 = vartheta_scores(D2, D_bad, tree, tree)
            vals += [t1, t2]
        assert np.mean(vals) < 0.1


class TestCrossModalMap:
    def test_identity_when_codes_equal(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((6, 40))
        np.testing.assert_allclose(cross_modal_map(X, X), np.eye(6),
                                   atol=1e-9)

    def test_scaling_recovered(self):
        rng = np.random.default_rng(12)
        X2 = rng.standard_normal((5, 30))
        np.testing.assert_allclose(cross_modal_map(2.0 * X2, X2),
                                   2.0 * np.eye(5), atol=1e-9)

    def test_residual_matches_independent_solver(self):
        rng = np.random.default_rng(13)
        X1 = rng.standard_normal((4, 25))
        X2 = rng.standard_normal((6, 25))
        P = cross_modal_map(X1, X2)
        from scipy.linalg import lstsq
        P_ref = lstsq(X2.T, X1.T)[0].T
        ours = np.linalg.norm(X1 - P @ X2)
        ref = np.linalg.norm(X1 - P_ref @ X2)
        assert ours == pytest.approx(ref, rel=1e-9)

    def test_rank_deficient_minimal_norm(self):
        rng = np.random.default_rng(14)
        X2 = np.vstack([rng.standard_normal((2, 20)), np.zeros((2, 20))])
        X1 = rng.standard_normal((3, 20))
        P = cross_modal_map(X1, X2)          # must not raise
        assert np.all(np.isfinite(P))


class TestRecall:
    def test_scores_equal_labels(self):
        h = np.array([1.0, 0.0, 1.0, 0.0])
        assert recall_at_k(h, h, 2) == 1.0

    def test_reversed_disjoint_scores_zero(self):
        h = np.array([1.0, 1.0, 0.0, 0.0])
        scores = np.array([0.0, 0.0, 5.0, 4.0])
        assert recall_at_k(h, scores, 2) == 0.0

    def test_full_k_always_one(self):
        rng = np.random.default_rng(15)
        h = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
        assert recall_at_k(h, rng.standard_normal(5), 5) == 1.0

    def test_ties_prefer_lower_index(self):
        h = np.array([1.0, 0.0, 0.0])
        scores = np.zeros(3)
        assert recall_at_k(h, scores, 1) == 1.0

    @given(st.integers(min_value=1, max_value=6))
    @settings(max_examples=30, deadline=None)
    def test_recall_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        h = (rng.random(8) < 0.4).astype(float)
        if h.sum() == 0:
            h[0] = 1.0
        scores = rng.standard_normal(8)
        vals = [recall_at_k(h, scores, k) for k in range(1, 9)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 1.0


class TestSnrHelpers:
    def test_exact_reconstruction_is_infinite(self):
        Y = np.ones((3, 4))
        assert output_snr_db(Y, Y) == np.inf

    def test_zero_estimate_floor(self):
        Y = 2.0 * np.ones((2, 2))
        assert output_snr_db(Y, np.zeros_like(Y)) == pytest.approx(0.0)

    def test_support_agreement_identical_masks(self):
        rng = np.random.default_rng(16)
        X = rng.standard_normal((5, 10))
        X[np.abs(X) < 0.5] = 0.0
        assert support_agreement([X, X.copy()]) == 1.0
