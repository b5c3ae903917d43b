"""Posterior statistics and marginal likelihood for the Gaussian model.

Every sample i has the conditional model

    y = A x + v,    v ~ N(0, sigma^2 I),    x ~ N(0, diag(gamma_i)),

so the posterior over x is Gaussian with

    Sigma_x = (A^T A / sigma^2 + diag(gamma_i)^-1)^-1
    mu      = Sigma_x A^T y / sigma^2

and the marginal density of y is N(0, sigma^2 I + A diag(gamma_i) A^T).
The functions here evaluate these quantities per sample and in batched
form, through either the M x M system above or the equivalent N x N
system obtained from the matrix inversion lemma (preferred when M > N).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import GAMMA_FLOOR, SelectorMatrices

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A linear-algebra step failed beyond what regularization can fix."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class PosteriorStats:
    """Batched posterior sufficient statistics for one modality.

    ``mu`` and ``sigma_diag`` hold one column per sample; ``sigma_sum`` is
    the sum of the per-sample posterior covariances (None in approximate
    mode, where only diagonals exist).  ``sigma_full`` is populated only
    on request since it costs O(L M^2) memory.
    """

    mu: np.ndarray                      # (M, L)
    sigma_diag: np.ndarray              # (M, L)
    sigma_sum: np.ndarray | None        # (M, M)
    loglik: float
    mode: str                           # "exact" | "approximate"
    sigma_full: np.ndarray | None = None  # (L, M, M)

    @property
    def second_moment_diag(self) -> np.ndarray:
        """Per-sample E[x_m^2] = Sigma[m, m] + mu[m]^2, shape (M, L)."""
        return self.sigma_diag + self.mu**2


def _check_inputs(A, y_or_Y, gamma, sigma):
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(y_or_Y, dtype=np.float64)
    G = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(Y)):
        raise NumericalError("non-finite entries in design matrix or data")
    if not np.all(np.isfinite(G)) or np.any(G < 0):
        raise NumericalError("gamma must be finite and nonnegative")
    if not sigma > 0:
        raise NumericalError(f"sigma must be positive, got {sigma}")
    return A, Y, np.maximum(G, GAMMA_FLOOR)


def posterior_exact(D, y, gamma, sigma):
    """Posterior mean and covariance through the M x M linear system."""
    D, y, gamma = _check_inputs(D, y, gamma, sigma)
    M = D.shape[1]
    precision = D.T @ D / sigma**2 + np.diag(1.0 / gamma)
    try:
        Sigma = np.linalg.inv(precision)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(precision)
        raise NumericalError(
            f"posterior precision matrix is singular (cond ~ {cond:.3e})"
        ) from exc
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = Sigma @ (D.T @ y) / sigma**2
    return mu, Sigma


def posterior_woodbury(D, y, gamma, sigma):
    """Same posterior as :func:`posterior_exact` via the N x N system.

    Uses Sigma_x = G - G D^T (sigma^2 I + D G D^T)^-1 D G with
    G = diag(gamma), which only ever inverts an N x N matrix and is the
    preferred form for overcomplete dictionaries (M > N).
    """
    D, y, gamma = _check_inputs(D, y, gamma, sigma)
    N = D.shape[0]
    DG = D * gamma          # columns scaled by gamma
    B = sigma**2 * np.eye(N) + DG @ D.T
    try:
        c = np.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("marginal covariance is not positive definite") from exc
    # Solve B Z = D G and B w = y through the Cholesky factor.
    Z = _cho_solve(c, DG)
    w = _cho_solve(c, y[:, None])[:, 0]
    Sigma = np.diag(gamma) - DG.T @ Z
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = DG.T @ w
    return mu, Sigma


def posterior_approx(D, y, gamma, sigma, cg_tol=1e-8, cg_max_iter=None):
    """Approximate posterior: conjugate-gradient mean, diagonal covariance.

    The mean solves the exact M x M system iteratively; the covariance is
    approximated by inverting only the diagonal of the precision matrix,
    diag_Sigma[m] = 1 / (||d_m||^2 / sigma^2 + 1 / gamma[m]).
    """
    D, y, gamma = _check_inputs(D, y, gamma, sigma)
    mu, diag = _batched_cg(D, y[:, None], gamma[:, None], sigma,
                           cg_tol=cg_tol, cg_max_iter=cg_max_iter)
    return mu[:, 0], diag[:, 0]


def posterior_hier(D, selectors: SelectorMatrices, y, gamma_hat, sigma):
    """Posterior over the lifted variable of the hierarchical model.

    The modality is inferred from the length of ``gamma_hat``: M2 entries
    address the root modality (selector S_1), 2*M2 entries the leaf
    modality (selector S_2).  The lifted design matrix is D S_j^T and the
    mean is sigma^-2 Sigma_hat S_j D^T y.
    """
    S = _selector_for(selectors, np.asarray(gamma_hat).shape[0])
    A = np.asarray(D, dtype=np.float64) @ S.T
    if A.shape[0] != np.asarray(y).shape[0]:
        raise NumericalError(
            f"data dimension {np.asarray(y).shape[0]} does not match design "
            f"rows {A.shape[0]}")
    return posterior_woodbury(A, y, gamma_hat, sigma)


def posterior_td(D, W, y, h, gamma, sigma, beta):
    """Posterior given both the data and its label vector.

    Stacking the scaled designs [D/sigma; W/beta] reduces the label-aware
    posterior to the standard form with unit noise.
    """
    D, y, gamma = _check_inputs(D, y, gamma, sigma)
    W = np.asarray(W, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if not beta > 0:
        raise NumericalError(f"beta must be positive, got {beta}")
    A_aug = np.vstack([D / sigma, W / beta])
    y_aug = np.concatenate([y / sigma, h / beta])
    return posterior_woodbury(A_aug, y_aug, gamma, 1.0)


def log_marginal(D, Y, gammas, sigma):
    """Sum over samples of log N(y_i; 0, sigma^2 I + D diag(gamma_i) D^T)."""
    D, Y, G = _check_inputs(D, Y, gammas, sigma)
    Y = Y if Y.ndim == 2 else Y[:, None]
    G = G if G.ndim == 2 else G[:, None]
    return _batched_loglik(D, Y, G, sigma)


def log_marginal_hier(D, selectors: SelectorMatrices, Y, gammas_hat, sigma):
    """Marginal log-likelihood of the lifted hierarchical model."""
    G = np.asarray(gammas_hat, dtype=np.float64)
    G = G if G.ndim == 2 else G[:, None]
    S = _selector_for(selectors, G.shape[0])
    A = np.asarray(D, dtype=np.float64) @ S.T
    return log_marginal(A, Y, G, sigma)


def sigma_loglik_derivative(D, Y, gammas, sigma, posterior_stats=None):
    """d/d(sigma) of the modality marginal log-likelihood at (D, gammas).

    Equal to -sigma * sum_i [tr(Sigma_y_i^-1) - ||Sigma_y_i^-1 y_i||^2].
    When ``posterior_stats`` evaluated at the same parameters is supplied,
    the algebraically identical form

        -L N / sigma + (tr(D^T D sum_Sigma) + ||Y - D mu||_F^2) / sigma^3

    reuses those statistics and costs almost nothing extra.
    """
    D, Y, G = _check_inputs(D, Y, gammas, sigma)
    Y = Y if Y.ndim == 2 else Y[:, None]
    G = G if G.ndim == 2 else G[:, None]
    N, L = Y.shape
    if posterior_stats is not None:
        st = posterior_stats
        resid = Y - D @ st.mu
        if st.sigma_sum is not None:
            tr_term = float(np.sum((D.T @ D) * st.sigma_sum))
        else:
            col_sq = np.sum(D**2, axis=0)
            tr_term = float(col_sq @ st.sigma_diag.sum(axis=1))
        return -L * N / sigma + (tr_term + float(np.sum(resid**2))) / sigma**3

    total = 0.0
    for lo, hi in _chunks(L):
        B = _cov_chunk(D, G[:, lo:hi], sigma)
        Binv = np.linalg.inv(B)
        w = np.matmul(Binv, Y[:, lo:hi].T[:, :, None])[:, :, 0]
        tr = np.trace(Binv, axis1=1, axis2=2)
        total += float(np.sum(tr) - np.sum(w**2))
    return -sigma * total


# ---------------------------------------------------------------------------
# batched kernels


def estep(A, Y, gammas, sigma, mode="exact", want_full=False,
          cg_tol=1e-8, cg_max_iter=None, chunk=512) -> PosteriorStats:
    """Posterior statistics for all samples of one modality.

    ``gammas`` holds one variance column per sample.  Exact mode goes
    through the N x N covariance (matrix inversion lemma) and also returns
    the marginal log-likelihood evaluated at the same parameters for free;
    approximate mode runs preconditioned conjugate gradients for the means
    and keeps only diagonal covariances (its ``loglik`` is computed by a
    separate exact pass over the N x N system).
    """
    A, Y, G = _check_inputs(A, Y, gammas, sigma)
    if mode == "approximate":
        mu, diag = _batched_cg(A, Y, G, sigma, cg_tol=cg_tol,
                               cg_max_iter=cg_max_iter)
        ll = _batched_loglik(A, Y, G, sigma)
        return PosteriorStats(mu=mu, sigma_diag=diag, sigma_sum=None,
                              loglik=ll, mode="approximate")
    if mode != "exact":
        raise ValueError(f"unknown posterior mode {mode!r}")

    N, L = Y.shape
    M = A.shape[1]
    mu = np.empty((M, L))
    sigma_diag = np.empty((M, L))
    sigma_sum = np.zeros((M, M))
    sigma_full = np.empty((L, M, M)) if want_full else None
    loglik = 0.0
    for lo, hi in _chunks(L, chunk):
        Lc = hi - lo
        Gc = G[:, lo:hi].T                        # (Lc, M)
        AG = A[None, :, :] * Gc[:, None, :]       # (Lc, N, M): A diag(gamma_i)
        # every heavy product below is a single GEMM via reshaping
        B = (AG.reshape(Lc * N, M) @ A.T).reshape(Lc, N, N)
        B = 0.5 * (B + np.transpose(B, (0, 2, 1)))
        B += sigma**2 * np.eye(N)
        c, logdet = _chol_with_jitter(B)
        Binv = _cho_inverse(c)
        w = np.matmul(Binv, Y[:, lo:hi].T[:, :, None])[:, :, 0]   # (Lc, N)
        quad = np.einsum("ln,ln->l", Y[:, lo:hi].T, w)
        loglik += -0.5 * float(np.sum(logdet + quad) + Lc * N * _LOG_2PI)
        mu[:, lo:hi] = (Gc * (w @ A)).T
        # H_i = A^T B_i^-1 A; Sigma_i = G_i - G_i H_i G_i
        P = (Binv.reshape(Lc * N, N) @ A).reshape(Lc, N, M)
        H = (A.T @ P.transpose(1, 0, 2).reshape(N, Lc * M)) \
            .reshape(M, Lc, M)                    # axis order (m, l, n)
        hdiag = np.einsum("mlm->lm", H)
        sigma_diag[:, lo:hi] = (Gc - Gc**2 * hdiag).T
        sigma_sum += np.diag(Gc.sum(axis=0))
        sigma_sum -= np.einsum("mln,lm,ln->mn", H, Gc, Gc, optimize=True)
        if want_full:
            sigma_full[lo:hi] = -H.transpose(1, 0, 2) * Gc[:, :, None] \
                * Gc[:, None, :]
            sigma_full[lo:hi] += Gc[:, :, None] * np.eye(M)
    sigma_sum = 0.5 * (sigma_sum + sigma_sum.T)
    return PosteriorStats(mu=mu, sigma_diag=np.maximum(sigma_diag, 0.0),
                          sigma_sum=sigma_sum, loglik=loglik, mode="exact",
                          sigma_full=sigma_full)


def _selector_for(selectors: SelectorMatrices, gamma_len: int) -> np.ndarray:
    m2 = selectors.s1.shape[0]
    if gamma_len == m2:
        return selectors.s1
    if gamma_len == 2 * m2:
        return selectors.s2
    raise NumericalError(
        f"gamma length {gamma_len} matches neither M2={m2} nor 2*M2={2 * m2}")


def _chunks(L, chunk=512):
    for lo in range(0, L, chunk):
        yield lo, min(lo + chunk, L)


def _cov_chunk(A, G_chunk, sigma):
    """Stack of sigma^2 I + A diag(gamma_i) A^T for a chunk of samples."""
    N = A.shape[0]
    AG = A[None, :, :] * G_chunk.T[:, None, :]    # (Lc, N, M)
    B = np.matmul(AG, A.T)
    B += sigma**2 * np.eye(N)
    return 0.5 * (B + np.transpose(B, (0, 2, 1)))


def batch_loglik(A, Y, gammas, sigma, chunk=512):
    """Marginal log-likelihood for many samples (validated inputs)."""
    A, Y, G = _check_inputs(A, Y, gammas, sigma)
    Y = Y if Y.ndim == 2 else Y[:, None]
    G = G if G.ndim == 2 else G[:, None]
    return _batched_loglik(A, Y, G, sigma, chunk=chunk)


def _chol_with_jitter(B):
    """Batched Cholesky; adds a trace-scaled jitter once if needed."""
    try:
        c = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(B, axis1=1, axis2=2).mean() / B.shape[1]
        log.warning("covariance factorization failed; retrying with "
                    "jitter %.3e", jitter)
        try:
            c = np.linalg.cholesky(B + jitter * np.eye(B.shape[1]))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "marginal covariance is not positive definite even after "
                f"jitter {jitter:.3e}") from exc
    logdet = 2.0 * np.sum(np.log(np.einsum("lnn->ln", c)), axis=1)
    return c, logdet


def _cho_inverse(c):
    """Batched inverse from a batched Cholesky factor."""
    n = c.shape[-1]
    eye = np.broadcast_to(np.eye(n), c.shape)
    cinv = np.linalg.solve(c, eye.copy())
    return np.matmul(np.transpose(cinv, (0, 2, 1)), cinv)


def _cho_solve(c, rhs):
    z = np.linalg.solve(c, rhs)
    return np.linalg.solve(c.T, z)


def _batched_loglik(A, Y, G, sigma, chunk=512):
    total = 0.0
    N, L = Y.shape
    for lo, hi in _chunks(L, chunk):
        B = _cov_chunk(A, G[:, lo:hi], sigma)
        c, logdet = _chol_with_jitter(B)
        w = np.linalg.solve(B, Y[:, lo:hi].T[:, :, None])[:, :, 0]
        quad = np.einsum("ln,ln->l", Y[:, lo:hi].T, w)
        total += -0.5 * float(np.sum(logdet + quad) + (hi - lo) * N * _LOG_2PI)
    return total


def _batched_cg(A, Y, G, sigma, cg_tol=1e-8, cg_max_iter=None):
    """Jacobi-preconditioned CG on (A^T A / s^2 + G^-1) x = A^T Y / s^2.

    All samples iterate together; converged columns are frozen.  Raises
    :class:`ConvergenceError` if any column misses ``cg_tol`` relative
    residual within the iteration budget.
    """
    M = A.shape[1]
    L = Y.shape[1]
    if cg_max_iter is None:
        cg_max_iter = 10 * M
    col_sq = np.sum(A**2, axis=0)
    inv_gamma = 1.0 / G
    diag_prec = col_sq[:, None] / sigma**2 + inv_gamma      # (M, L)
    precond = 1.0 / diag_prec

    def apply_op(X):
        return A.T @ (A @ X) / sigma**2 + inv_gamma * X

    b = A.T @ Y / sigma**2
    b_norm = np.linalg.norm(b, axis=0)
    tol = cg_tol * np.maximum(b_norm, np.finfo(np.float64).tiny)

    x = np.zeros((M, L))
    r = b.copy()
    z = precond * r
    p = z.copy()
    rz = np.einsum("ml,ml->l", r, z)
    active = np.linalg.norm(r, axis=0) > tol
    for _ in range(cg_max_iter):
        if not np.any(active):
            break
        Ap = apply_op(p)
        pAp = np.einsum("ml,ml->l", p, Ap)
        alpha = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        x += alpha * p
        r -= alpha * Ap
        resid = np.linalg.norm(r, axis=0)
        active = resid > tol
        z = precond * r
        rz_new = np.einsum("ml,ml->l", r, z)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        p = z + beta * p
        rz = rz_new
    if np.any(active):
        worst = float(np.max(np.linalg.norm(r, axis=0) / np.maximum(b_norm, 1e-300)))
        raise ConvergenceError(
            f"conjugate gradients did not reach tol={cg_tol:.1e} within "
            f"{cg_max_iter} iterations (worst relative residual {worst:.3e})",
            residual=worst)
    diag = 1.0 / diag_prec
    return x, diag
