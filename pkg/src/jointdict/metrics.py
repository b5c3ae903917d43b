"""Evaluation: atom/subspace recovery, denoising SNR, cross-modal mapping.

Recovery scores treat atoms as directions: alignments are absolute
normalized inner products, so sign flips and rescalings never count
against a learned dictionary.  Subspace scores compare column blocks
through the product of principal-angle cosines.
"""

from __future__ import annotations

import logging

import numpy as np

from .model import ModelState, SupportTree, ValidationError
from .learn import sparse_codes

log = logging.getLogger(__name__)

RECOVERY_THRESHOLD = 0.99


def atom_alignment(d: np.ndarray, D_hat: np.ndarray) -> float:
    """Best absolute normalized inner product of ``d`` with any column."""
    d = np.asarray(d, dtype=np.float64).ravel()
    D_hat = np.asarray(D_hat, dtype=np.float64)
    dn = np.linalg.norm(d)
    cols = np.linalg.norm(D_hat, axis=0)
    if dn == 0.0 or np.any(cols == 0.0):
        raise ValidationError("atom_alignment needs nonzero vectors")
    return float(np.max(np.abs(d @ D_hat) / (dn * cols)))


def alignment_profile(D_true: np.ndarray, D_hat: np.ndarray) -> np.ndarray:
    """Alignment of every true atom with its best learned match."""
    return np.array([atom_alignment(D_true[:, m], D_hat)
                     for m in range(D_true.shape[1])])


def recovery_probability(D_true: np.ndarray, D_hat: np.ndarray,
                         threshold: float = RECOVERY_THRESHOLD) -> float:
    """Fraction of true atoms aligned above the threshold with some
    learned atom."""
    return float(np.mean(alignment_profile(D_true, D_hat) > threshold))


def _orthonormal_basis(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    block = block[:, None] if block.ndim == 1 else block
    u, s, _ = np.linalg.svd(block, full_matrices=False)
    if np.any(s < 1e-10 * max(s[0], 1e-300)):
        raise ValidationError("rank-deficient column block has no "
                              f"{block.shape[1]}-dimensional span")
    return u[:, :block.shape[1]]


def subspace_alignment(block: np.ndarray, D_hat: np.ndarray,
                       tree_hat: SupportTree) -> float:
    """Similarity of span(block) to its best-matching learned branch span.

    For orthonormal bases V1, V2 the score is sqrt(|det(V1^T V2 V2^T V1)|),
    the product of the cosines of the principal angles; identical
    subspaces give 1, orthogonal ones 0.
    """
    v1 = _orthonormal_basis(block)
    best = 0.0
    for leaves in tree_hat.leaf_sets:
        v2 = _orthonormal_basis(D_hat[:, list(leaves)])
        m = v1.T @ v2
        best = max(best, float(np.sqrt(abs(np.linalg.det(m @ m.T)))))
    return best


def vartheta_scores(D2_true: np.ndarray, D2_hat: np.ndarray,
                    tree: SupportTree, tree_hat: SupportTree):
    """Subspace recovery split by branch width.

    Returns (theta1, theta2): the fraction of single-leaf (resp.
    multi-leaf) true branches whose span is matched above the threshold by
    some learned branch.  A score is None when no branch of that width
    exists.
    """
    singles, multis = [], []
    for leaves in tree.leaf_sets:
        score = subspace_alignment(D2_true[:, list(leaves)], D2_hat, tree_hat)
        (singles if len(leaves) == 1 else multis).append(
            score > RECOVERY_THRESHOLD)
    theta1 = float(np.mean(singles)) if singles else None
    theta2 = float(np.mean(multis)) if multis else None
    return theta1, theta2


def varrho_scores(D2_true: np.ndarray, D2_hat: np.ndarray, tree: SupportTree):
    """Atom-level recovery split by branch width.

    Returns (rho1, rho2): recovery fraction of atoms living in single-leaf
    branches and of atoms living in multi-leaf branches.  None when a
    width class is empty.
    """
    singles, multis = [], []
    for leaves in tree.leaf_sets:
        for m in leaves:
            hit = atom_alignment(D2_true[:, m], D2_hat) > RECOVERY_THRESHOLD
            (singles if len(leaves) == 1 else multis).append(hit)
    rho1 = float(np.mean(singles)) if singles else None
    rho2 = float(np.mean(multis)) if multis else None
    return rho1, rho2


def support_agreement(codes: list[np.ndarray], rel_threshold: float = 1e-3) -> float:
    """Fraction of samples whose recovered supports coincide across
    modalities; entry m is in the support when |x[m]| exceeds
    ``rel_threshold`` times the column's max magnitude."""
    if len(codes) < 2:
        raise ValidationError("support agreement needs >= 2 modalities")
    masks = []
    for X in codes:
        peak = np.max(np.abs(X), axis=0)
        masks.append(np.abs(X) > rel_threshold * np.maximum(peak, 1e-300))
    agree = np.ones(codes[0].shape[1], dtype=bool)
    for other in masks[1:]:
        agree &= np.all(masks[0] == other, axis=0)
    return float(np.mean(agree))


def cross_modal_map(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Least-squares map P with X1 ~= P X2 (minimal-norm on deficiency)."""
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.shape[1] != X2.shape[1]:
        raise ValidationError("cross_modal_map needs matching sample counts")
    P_t, _, rank, _ = np.linalg.lstsq(X2.T, X1.T, rcond=None)
    if rank < X2.shape[0]:
        log.warning("rank-deficient code matrix (rank %d < %d); returning "
                    "the minimal-norm map", rank, X2.shape[0])
    return P_t.T


def denoise(model: ModelState, P: np.ndarray, Y2_test: np.ndarray,
            inference_iters: int = 50) -> np.ndarray:
    """Map noisy second-modality data to a first-modality reconstruction.

    Coefficients are inferred with the trained second dictionary held
    fixed, translated by ``P``, and rendered through the first dictionary:
    y1_hat = D1 P x2.
    """
    D1, D2 = model.dictionaries[0], model.dictionaries[1]
    x2, _ = sparse_codes(D2, Y2_test, model.sigmas[1], iters=inference_iters)
    return D1 @ (P @ x2)


def output_snr_db(Y_clean: np.ndarray, Y_hat: np.ndarray) -> float:
    """Aggregate reconstruction SNR in dB over all samples."""
    err = float(np.sum((Y_clean - Y_hat)**2))
    sig = float(np.sum(Y_clean**2))
    if err == 0.0:
        return np.inf
    return 10.0 * np.log10(sig / err)


def recall_at_k(h_true: np.ndarray, scores: np.ndarray, k: int) -> float:
    """Fraction of true tags among the k highest scores (ties resolved
    toward lower indices)."""
    h_true = np.asarray(h_true, dtype=np.float64).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    C = h_true.shape[0]
    if not 0 < k <= C:
        raise ValidationError(f"k must lie in [1, {C}]")
    n_true = int(np.sum(h_true != 0))
    if n_true == 0:
        raise ValidationError("recall needs at least one true tag")
    # stable sort on (-score, index): equal scores keep the lower index first
    order = np.argsort(-scores, kind="stable")[:k]
    hits = int(np.sum(h_true[order] != 0))
    return hits / n_true
