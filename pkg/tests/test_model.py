import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointdict.model import (
    AnnealSchedule,
    MultimodalDataset,
    PriorSpec,
    SupportTree,
    ValidationError,
    balance_tree,
    build_selectors,
    most_uniform_tree,
    normalize_columns,
    singleton_tree,
)


def random_tree(rng, n_branches, n_leaves):
    """Random valid tree: every branch gets >= 1 leaf, leaves partitioned."""
    assert n_leaves >= n_branches
    leaves = rng.permutation(n_leaves)
    cuts = np.sort(rng.choice(np.arange(1, n_leaves), size=n_branches - 1,
                              replace=False))
    sets = np.split(leaves, cuts)
    return SupportTree(tuple(tuple(int(m) for m in s) for s in sets))


class TestSupportTree:
    def test_valid_tree(self):
        t = SupportTree(((0, 2), (1,), (3,)))
        assert t.branch_count == 3
        assert t.leaf_count == 4
        assert t.root_of_leaf().tolist() == [0, 1, 0, 2]

    def test_rejects_empty_branch(self):
        with pytest.raises(ValidationError):
            SupportTree(((0, 1), ()))

    def test_rejects_overlap(self):
        with pytest.raises(ValidationError):
            SupportTree(((0, 1), (1, 2)))

    def test_rejects_gap_in_coverage(self):
        with pytest.raises(ValidationError):
            SupportTree(((0,), (2,)))

    def test_most_uniform_matches_pairing_rule(self):
        t = most_uniform_tree(50, 60)
        sizes = t.branch_sizes
        assert (sizes == 2).sum() == 10
        assert (sizes == 1).sum() == 40
        assert t.leaf_sets[0] == (0, 50)
        assert t.leaf_sets[10] == (10,)


class TestBuildSelectors:
    def test_singleton_branches_give_identity(self):
        sel = build_selectors(singleton_tree(3))
        np.testing.assert_array_equal(sel.s1, np.eye(3))
        np.testing.assert_array_equal(sel.r1, np.eye(3))

    def test_two_branch_example(self):
        tree = SupportTree(((0, 1), (2,)))
        sel = build_selectors(tree)
        np.testing.assert_array_equal(sel.s1, [[1, 0], [1, 0], [0, 1]])
        np.testing.assert_array_equal(sel.r1, np.diag([0.5, 1.0]))

    def test_random_tree_selector_identity(self):
        # direct matrix check of S_j^T S_j R_j = I
        rng = np.random.default_rng(0)
        tree = random_tree(rng, n_branches=10, n_leaves=25)
        sel = build_selectors(tree)
        np.testing.assert_allclose(sel.s1.T @ sel.s1 @ sel.r1, np.eye(10),
                                   atol=1e-12)
        np.testing.assert_allclose(sel.s2.T @ sel.s2 @ sel.r2, np.eye(25),
                                   atol=1e-12)

    def test_s2_shape_and_structure(self):
        sel = build_selectors(SupportTree(((0, 1), (2,))))
        assert sel.s2.shape == (6, 3)
        np.testing.assert_array_equal(sel.s2[:3], np.eye(3))
        np.testing.assert_array_equal(sel.s2[3:], np.eye(3))

    def test_reconstruction_identity(self):
        # S^T (S R x) = x: lifting then recombining is lossless
        rng = np.random.default_rng(1)
        tree = random_tree(rng, n_branches=4, n_leaves=9)
        sel = build_selectors(tree)
        x = rng.standard_normal(4)
        np.testing.assert_allclose(sel.s1.T @ (sel.s1 @ sel.r1 @ x), x,
                                   atol=1e-14)

    def test_selectors_after_balancing_stay_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            tree = random_tree(rng, n_branches=5, n_leaves=int(rng.integers(5, 14)))
            padded, _ = balance_tree(tree)
            sel = build_selectors(padded)
            K, M2 = padded.branch_count, padded.leaf_count
            np.testing.assert_array_equal(sel.s1.T @ sel.s1 @ sel.r1, np.eye(K))
            np.testing.assert_array_equal(sel.s2.T @ sel.s2 @ sel.r2, np.eye(M2))


class TestBalanceTree:
    def test_already_balanced_unchanged(self):
        tree = SupportTree(((0, 1), (2, 3)))
        out, padded = balance_tree(tree)
        assert padded == 0
        assert out.leaf_sets == tree.leaf_sets

    def test_two_branch_padding(self):
        tree = SupportTree(((0,), (1, 2)))
        out, padded = balance_tree(tree)
        assert padded == 1
        assert out.branch_sizes.tolist() == [2, 2]
        assert out.leaf_sets[0] == (0, 3)

    def test_paper_style_geometry(self):
        # 50 branches over 60 leaves balances to 100 leaves
        tree = most_uniform_tree(50, 60)
        out, padded = balance_tree(tree)
        assert out.leaf_count == 100
        assert padded == 40
        assert out.is_balanced()

    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=1,
                    max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_balanced_sizes_and_count(self, sizes):
        sets, nxt = [], 0
        for n in sizes:
            sets.append(tuple(range(nxt, nxt + n)))
            nxt += n
        tree = SupportTree(tuple(sets))
        out, padded = balance_tree(tree)
        assert out.is_balanced()
        assert padded == out.leaf_count - tree.leaf_count
        assert out.branch_sizes.max() == max(sizes)
        # original leaves keep their indices
        for orig, new in zip(tree.leaf_sets, out.leaf_sets):
            assert set(orig).issubset(set(new))


class TestNormalizeColumns:
    def test_three_four_five(self):
        out = normalize_columns(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(out[:, 0], [0.6, 0.8])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        D = normalize_columns(rng.standard_normal((20, 50)))
        np.testing.assert_allclose(normalize_columns(D), D, atol=1e-15)

    def test_all_columns_unit(self):
        rng = np.random.default_rng(4)
        D = normalize_columns(rng.standard_normal((20, 50)))
        np.testing.assert_allclose(np.linalg.norm(D, axis=0), 1.0, atol=1e-12)

    def test_zero_column_reports_index(self):
        D = np.ones((3, 4))
        D[:, 2] = 0.0
        with pytest.raises(ValidationError, match=r"\[2\]"):
            normalize_columns(D)


class TestDatasetAndPrior:
    def test_mismatched_sample_counts(self):
        with pytest.raises(ValidationError):
            MultimodalDataset((np.zeros((3, 5)), np.zeros((4, 6))))

    def test_labels_must_be_binary(self):
        with pytest.raises(ValidationError):
            MultimodalDataset((np.zeros((3, 5)),), labels=0.5 * np.ones((2, 5)))

    def test_one_hot_detection(self):
        H = np.zeros((2, 4))
        H[0, :2] = 1.0
        H[1, 2:] = 1.0
        ds = MultimodalDataset((np.zeros((3, 4)),), labels=H)
        assert ds.is_one_hot()

    def test_prior_atom_counts(self):
        p = PriorSpec("one_to_one", atom_count=50)
        assert p.atom_counts(3) == [50, 50, 50]
        t = most_uniform_tree(5, 8)
        q = PriorSpec("atom_to_subspace", tree=t)
        assert q.atom_counts(2) == [5, 8]
        with pytest.raises(ValidationError):
            q.atom_counts(3)

    def test_anneal_schedule_validation(self):
        with pytest.raises(ValidationError):
            AnnealSchedule(sigma0=(0.1,), sigma_inf=0.2, alpha_sigma=0.9)
        with pytest.raises(ValidationError):
            AnnealSchedule(sigma0=(1.0,), sigma_inf=0.0, alpha_sigma=1.5)
