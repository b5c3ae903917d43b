"""EM training: M-step updates, noise annealing, cleaning, pruning, fit.

The trainer runs a double loop.  The inner loop performs E/M iterations at
fixed noise scales until the marginal log-likelihood stabilizes; the outer
loop then proposes a geometric shrink of each modality's noise scale,
accepted only when the likelihood derivative favors it.  A modality whose
proposals are rejected three times in a row is frozen (its dictionary
stops updating), and training ends once every modality is frozen.

Five execution variants trade accuracy for cost: ``full`` touches every
sample per iteration with exact posteriors; ``incremental`` re-computes
statistics for one batch but lets the dictionary update see all stored
statistics; ``batch`` uses only the batch's statistics everywhere; the
``*_approx`` twins replace exact posteriors with conjugate-gradient means
and diagonal covariances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    GAMMA_FLOOR,
    AnnealSchedule,
    ModelState,
    MultimodalDataset,
    PriorSpec,
    SelectorMatrices,
    SupportTree,
    ValidationError,
    balance_tree,
    build_selectors,
    normalize_columns,
)
from .posterior import NumericalError, PosteriorStats, estep, log_marginal, \
    sigma_loglik_derivative

log = logging.getLogger(__name__)

VARIANTS = {
    # name -> (em mode, posterior mode)
    "full": ("full", "exact"),
    "incremental": ("incremental", "exact"),
    "incremental_approx": ("incremental", "approximate"),
    "batch": ("batch", "exact"),
    "batch_approx": ("batch", "approximate"),
}

_SIGMA_REJECTS_TO_CONVERGE = 3


@dataclass(frozen=True)
class RunConfig:
    """Knobs for a training run; see VARIANTS for the variant names."""

    anneal: AnnealSchedule
    variant: str = "full"
    batch_size: int | None = None            # defaults to all samples
    max_outer_iters: int = 5000
    inner_tol: float = 1e-6
    inner_max_iters: int = 200
    clean_period: int = 50                    # outer iterations; 0 disables
    clean_coherence_threshold: float = 0.99
    clean_energy_threshold: float = 1e-3
    prune_epsilon: float = 0.9
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    ridge_nu: float = 1e-4                    # classifier ridge (supervised)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(
                f"unknown variant {self.variant!r}; pick one of {sorted(VARIANTS)}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (self.inner_tol > 0):
            raise ValidationError("inner_tol must be positive")
        if self.max_outer_iters < 1 or self.inner_max_iters < 1:
            raise ValidationError("iteration caps must be >= 1")


@dataclass
class FitReport:
    """Run diagnostics; one trace entry per outer iteration.

    ``loglik_trace`` holds log p(Y | theta, sigma) over the samples the
    variant touched that iteration (all of them for ``full``).
    ``inner_loglik`` keeps the per-iteration values of each fixed-sigma
    inner segment, which is where the monotonicity guarantee applies.
    ``final_codes`` are the posterior mean coefficients at exit, one
    (M_j, L) matrix per modality.
    """

    loglik_trace: np.ndarray
    sigma_trace: np.ndarray
    iterations_run: int
    converged: bool
    prune_log: list[int] = field(default_factory=list)
    inner_loglik: list[list[float]] = field(default_factory=list)
    final_codes: list[np.ndarray] = field(default_factory=list)
    validation_loglik_trace: np.ndarray | None = None
    beta_trace: np.ndarray | None = None


# ---------------------------------------------------------------------------
# M-step updates (per-sample forms; the trainer uses vectorized equivalents)


def update_gamma_one_to_one(stats: list[PosteriorStats], i: int) -> np.ndarray:
    """Shared-variance update: average E[x_m^2] over modalities, floored."""
    if not stats:
        raise ValidationError("need statistics for at least one modality")
    acc = np.zeros_like(stats[0].mu[:, i])
    for st in stats:
        acc += st.second_moment_diag[:, i]
    return np.maximum(acc / len(stats), GAMMA_FLOOR)


def update_gamma_a2s(stats1: PosteriorStats, stats2: PosteriorStats,
                     tree: SupportTree, i: int) -> np.ndarray:
    """Branch-variance update: pooled root and leaf moments over 1 + |T^k|."""
    t1 = stats1.second_moment_diag[:, i]
    t2 = stats2.second_moment_diag[:, i]
    if t1.shape[0] != tree.branch_count or t2.shape[0] != tree.leaf_count:
        raise ValidationError("statistics do not match the tree dimensions")
    gamma_b = np.empty(tree.branch_count)
    for k, leaves in enumerate(tree.leaf_sets):
        gamma_b[k] = (t1[k] + t2[list(leaves)].sum()) / (1 + len(leaves))
    return np.maximum(gamma_b, GAMMA_FLOOR)


def update_gamma_hier(stats1: PosteriorStats, stats2: PosteriorStats,
                      m2: int, i: int) -> np.ndarray:
    """Lifted-variance update: roots average both modalities, leaves keep
    only the leaf modality."""
    t1 = stats1.second_moment_diag[:, i]
    t2 = stats2.second_moment_diag[:, i]
    if t1.shape[0] != m2 or t2.shape[0] != 2 * m2:
        raise ValidationError("lifted statistics do not match M2")
    out = np.empty(2 * m2)
    out[:m2] = 0.5 * (t1 + t2[:m2])
    out[m2:] = t2[m2:]
    return np.maximum(out, GAMMA_FLOOR)


def _solve_gram(gram: np.ndarray, rhs_t: np.ndarray) -> np.ndarray:
    """Solve gram @ X = rhs_t, adding logged jitter if the system is singular."""
    try:
        return np.linalg.solve(gram, rhs_t)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(np.trace(gram) / gram.shape[0], 1.0)
        log.warning("singular Gram matrix in dictionary update; adding "
                    "jitter %.3e", jitter)
        return np.linalg.solve(gram + jitter * np.eye(gram.shape[0]), rhs_t)


def update_dictionary(Y: np.ndarray, U: np.ndarray,
                      sum_sigma: np.ndarray) -> np.ndarray:
    """Closed-form dictionary update D = Y U^T (U U^T + sum_Sigma)^-1,
    column-normalized."""
    gram = U @ U.T + sum_sigma
    D = _solve_gram(gram, U @ Y.T).T
    return normalize_columns(D)


def update_dictionary_hier(Y: np.ndarray, U_hat: np.ndarray,
                           sum_sigma_hat: np.ndarray,
                           S: np.ndarray) -> np.ndarray:
    """Lifted-statistics dictionary update
    D = Y U^T S (S^T (U U^T + sum_Sigma) S)^-1, column-normalized."""
    inner = U_hat @ U_hat.T + sum_sigma_hat
    gram = S.T @ inner @ S
    rhs = S.T @ (U_hat @ Y.T)
    D = _solve_gram(gram, rhs).T
    return normalize_columns(D)


def _raw_dict_update(Y, U, sum_sigma, S=None):
    """Unnormalized dictionary solve used inside inner loops (pure M-step)."""
    if S is None:
        return _solve_gram(U @ U.T + sum_sigma, U @ Y.T).T
    gram = S.T @ (U @ U.T + sum_sigma) @ S
    return _solve_gram(gram, S.T @ (U @ Y.T)).T


def anneal_sigma(sigma: float, derivative: float,
                 schedule: AnnealSchedule) -> float:
    """Derivative-gated shrink: accept alpha*sigma when a smaller scale
    would raise the likelihood, never dropping below the floor."""
    if derivative < 0:
        return max(schedule.sigma_inf, schedule.alpha_sigma * sigma)
    return sigma


def anneal_sigma_likelihood(sigma: float, D: np.ndarray, Y: np.ndarray,
                            gammas: np.ndarray,
                            schedule: AnnealSchedule) -> float:
    """Reference annealing rule: evaluate the likelihood at the proposal
    and accept only on strict improvement.  Costlier than
    :func:`anneal_sigma` but useful as its behavioral oracle."""
    proposal = max(schedule.sigma_inf, schedule.alpha_sigma * sigma)
    if proposal == sigma:
        return sigma
    if log_marginal(D, Y, gammas, proposal) > log_marginal(D, Y, gammas, sigma):
        return proposal
    return sigma


def clean_dictionary(D: np.ndarray, U: np.ndarray, Y: np.ndarray,
                     coherence_threshold: float = 0.99,
                     energy_threshold: float = 1e-3):
    """Replace redundant or unused atoms with poorly reconstructed samples.

    For every atom pair more coherent than the threshold, the member with
    lower code-row energy is marked; atoms whose row energy falls below
    ``energy_threshold`` times the mean row energy are marked too.  Marked
    atoms are replaced by distinct data columns, picked in decreasing order
    of reconstruction residual and normalized.  Returns the new dictionary
    and the list of replaced atom indices.
    """
    M = D.shape[1]
    Dn = D / np.maximum(np.linalg.norm(D, axis=0), 1e-300)
    gram = np.abs(Dn.T @ Dn)
    np.fill_diagonal(gram, 0.0)
    energy = np.sum(U**2, axis=1)
    marked: list[int] = []
    is_marked = np.zeros(M, dtype=bool)
    for m1 in range(M):
        for m2 in range(m1 + 1, M):
            if gram[m1, m2] > coherence_threshold and not (
                    is_marked[m1] or is_marked[m2]):
                victim = m1 if energy[m1] <= energy[m2] else m2
                is_marked[victim] = True
                marked.append(victim)
    low = energy < energy_threshold * energy.mean()
    for m in np.where(low & ~is_marked)[0]:
        is_marked[m] = True
        marked.append(int(m))
    if not marked:
        return D.copy(), []
    resid = np.sum((Y - D @ U)**2, axis=0)
    order = np.argsort(-resid, kind="stable")
    D_new = D.copy()
    for atom, col in zip(sorted(marked), order):
        norm = np.linalg.norm(Y[:, col])
        if norm == 0.0:
            continue
        D_new[:, atom] = Y[:, col] / norm
    return D_new, sorted(marked)


def prune(D: np.ndarray, U: np.ndarray, tree: SupportTree, m_p: int,
          S: np.ndarray, epsilon: float):
    """Remove ``m_p`` padded leaves from the second-modality dictionary.

    First strips, from whichever branch currently has the highest
    intra-branch atom coherence above ``epsilon``, its least-used leaf
    (usage z[m] = ||(S^T U)[m, :]||^2); then keeps removing the globally
    least-used leaf among branches that still have more than one.
    Returns (pruned dictionary, re-indexed tree, removed leaf indices).
    """
    if m_p == 0:
        return D.copy(), tree, []
    sizes = tree.branch_sizes
    if m_p > int(np.sum(sizes - 1)):
        raise ValidationError(
            f"cannot prune {m_p} leaves: only {int(np.sum(sizes - 1))} are "
            "removable without emptying a branch")
    z = np.sum((S.T @ U)**2, axis=1)
    alive = np.ones(tree.leaf_count, dtype=bool)
    leaf_sets = [list(s) for s in tree.leaf_sets]
    removed: list[int] = []

    def alive_leaves(k):
        return [m for m in leaf_sets[k] if alive[m]]

    def branch_coherence(k):
        leaves = alive_leaves(k)
        if len(leaves) < 2:
            return -1.0
        block = D[:, leaves]
        norms = np.maximum(np.linalg.norm(block, axis=0), 1e-300)
        g = np.abs(block.T @ block) / np.outer(norms, norms)
        np.fill_diagonal(g, -1.0)
        return float(g.max())

    def remove_least_used(k):
        leaves = alive_leaves(k)
        m = leaves[int(np.argmin(z[leaves]))]
        alive[m] = False
        removed.append(m)

    while m_p > 0:
        v = np.array([branch_coherence(k) for k in range(tree.branch_count)])
        if not np.any(v > epsilon):
            break
        k = int(np.argmax(v))
        remove_least_used(k)
        m_p -= 1

    while m_p > 0:
        eligible = [m for k in range(tree.branch_count)
                    for m in alive_leaves(k) if len(alive_leaves(k)) > 1]
        m = eligible[int(np.argmin(z[eligible]))]
        alive[m] = False
        removed.append(m)
        m_p -= 1

    keep = np.where(alive)[0]
    new_index = {int(old): new for new, old in enumerate(keep)}
    new_sets = tuple(tuple(new_index[m] for m in s if alive[m])
                     for s in leaf_sets)
    return D[:, keep], SupportTree(new_sets), removed


# ---------------------------------------------------------------------------
# prior engines: vectorized update rules for each joint-sparsity prior


class _OneToOneEngine:
    kind = "one_to_one"

    def __init__(self, atom_count: int, n_modalities: int):
        self.dict_sizes = [atom_count] * n_modalities
        self.gamma_rows = atom_count
        self.tree = None
        self.padded = 0

    def design(self, j, D):
        return D

    def modality_gammas(self, j, gamma_cols):
        return gamma_cols

    def updated_gammas(self, stats):
        acc = stats[0].second_moment_diag.copy()
        for st in stats[1:]:
            acc += st.second_moment_diag
        return np.maximum(acc / len(stats), GAMMA_FLOOR)

    def dict_update(self, j, Y, U, sum_sigma):
        return _raw_dict_update(Y, U, sum_sigma)

    def reset_atom(self, j, m, gammas):
        gammas[m, :] = 1.0

    def codes_from_stats(self, j, mu):
        return mu

    def final_prior(self):
        return PriorSpec("one_to_one", atom_count=self.gamma_rows)


class _AtomToSubspaceEngine:
    kind = "atom_to_subspace"

    def __init__(self, tree: SupportTree, padded: int):
        self.tree = tree
        self.padded = padded
        self.selectors = build_selectors(tree)
        self.dict_sizes = [tree.branch_count, tree.leaf_count]
        self.gamma_rows = tree.branch_count
        sizes = tree.branch_sizes.astype(np.float64)
        self._denom = (1.0 + sizes)[:, None]

    def design(self, j, D):
        return D

    def modality_gammas(self, j, gamma_cols):
        if j == 0:
            return gamma_cols
        return self.selectors.s1 @ gamma_cols

    def updated_gammas(self, stats):
        t1 = stats[0].second_moment_diag
        t2 = stats[1].second_moment_diag
        pooled = t1 + self.selectors.s1.T @ t2
        return np.maximum(pooled / self._denom, GAMMA_FLOOR)

    def dict_update(self, j, Y, U, sum_sigma):
        return _raw_dict_update(Y, U, sum_sigma)

    def reset_atom(self, j, m, gammas):
        if j == 0:
            gammas[m, :] = 1.0
        else:
            gammas[int(self.tree.root_of_leaf()[m]), :] = 1.0

    def codes_from_stats(self, j, mu):
        return mu

    def final_prior(self):
        return PriorSpec("atom_to_subspace", tree=self.tree)


class _HierarchicalEngine:
    kind = "hierarchical"

    def __init__(self, tree: SupportTree, padded: int):
        self.tree = tree
        self.padded = padded
        self.selectors = build_selectors(tree)
        self.m2 = tree.leaf_count
        self.dict_sizes = [tree.branch_count, self.m2]
        self.gamma_rows = 2 * self.m2
        self._root_of_leaf = tree.root_of_leaf()

    def design(self, j, D):
        S = self.selectors.s1 if j == 0 else self.selectors.s2
        return D @ S.T

    def modality_gammas(self, j, gamma_cols):
        if j == 0:
            return gamma_cols[:self.m2]
        return gamma_cols

    def updated_gammas(self, stats):
        t1 = stats[0].second_moment_diag
        t2 = stats[1].second_moment_diag
        out = np.empty((2 * self.m2, t1.shape[1]))
        out[:self.m2] = 0.5 * (t1 + t2[:self.m2])
        out[self.m2:] = t2[self.m2:]
        return np.maximum(out, GAMMA_FLOOR)

    def dict_update(self, j, Y, U, sum_sigma):
        S = self.selectors.s1 if j == 0 else self.selectors.s2
        return _raw_dict_update(Y, U, sum_sigma, S=S)

    def reset_atom(self, j, m, gammas):
        if j == 0:
            leaves = list(self.tree.leaf_sets[m])
            gammas[leaves, :] = 1.0
        else:
            gammas[m, :] = 1.0
            gammas[self.m2 + m, :] = 1.0

    def codes_from_stats(self, j, mu):
        S = self.selectors.s1 if j == 0 else self.selectors.s2
        return S.T @ mu

    def final_prior(self):
        return PriorSpec("hierarchical", tree=self.tree)


def _make_engine(prior: PriorSpec, n_modalities: int, balance: bool = True):
    """Engine for a prior; structured trees are balance-padded on request."""
    if prior.kind == "one_to_one":
        return _OneToOneEngine(prior.atom_count, n_modalities)
    if n_modalities != 2:
        raise ValidationError(
            f"{prior.kind} prior couples exactly 2 modalities, got {n_modalities}")
    tree, padded = balance_tree(prior.tree) if balance else (prior.tree, 0)
    if padded:
        log.info("balanced support tree: %d leaves added", padded)
    cls = _AtomToSubspaceEngine if prior.kind == "atom_to_subspace" \
        else _HierarchicalEngine
    return cls(tree, padded)


# ---------------------------------------------------------------------------
# the trainer


class _BatchSampler:
    """Without-replacement batches per epoch from a seeded generator."""

    def __init__(self, rng, total: int, batch_size: int):
        self.rng = rng
        self.total = total
        self.batch_size = batch_size
        self._perm = None
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.batch_size >= self.total:
            return np.arange(self.total)
        if self._perm is None or self._pos + self.batch_size > self.total:
            self._perm = self.rng.permutation(self.total)
            self._pos = 0
        idx = np.sort(self._perm[self._pos:self._pos + self.batch_size])
        self._pos += self.batch_size
        return idx


class _StatsStore:
    """Per-sample posterior statistics kept across incremental-EM steps."""

    def __init__(self, n_samples, dict_size, exact: bool):
        self.exact = exact
        self.mu = np.zeros((dict_size, n_samples))
        if exact:
            self.sigma_full = np.zeros((n_samples, dict_size, dict_size))
        else:
            self.sigma_diag = np.zeros((dict_size, n_samples))

    def write(self, idx, stats: PosteriorStats):
        self.mu[:, idx] = stats.mu
        if self.exact:
            self.sigma_full[idx] = stats.sigma_full
        else:
            self.sigma_diag[:, idx] = stats.sigma_diag

    def sum_sigma(self):
        if self.exact:
            return self.sigma_full.sum(axis=0)
        return np.diag(self.sigma_diag.sum(axis=1))


def _init_dictionaries(engine, dataset, rng):
    """Draw initial atoms from data columns (shared indices across
    modalities so paired samples seed paired atoms)."""
    L = dataset.sample_count
    m_max = max(engine.dict_sizes)
    if m_max <= L:
        idx = rng.permutation(L)[:m_max]
    else:
        log.warning("dictionary size %d exceeds sample count %d; reusing "
                    "data columns", m_max, L)
        idx = rng.integers(0, L, size=m_max)
    dicts = []
    for j, M in enumerate(engine.dict_sizes):
        cols = dataset.modalities[j][:, idx[:M]].copy()
        norms = np.linalg.norm(cols, axis=0)
        dead = norms < 1e-12
        if np.any(dead):
            cols[:, dead] = rng.standard_normal((cols.shape[0], int(dead.sum())))
        dicts.append(normalize_columns(cols))
    return dicts


def fit(dataset: MultimodalDataset, prior: PriorSpec,
        config: RunConfig) -> tuple[ModelState, FitReport]:
    """Learn dictionaries and per-sample variances by annealed EM."""
    engine = _make_engine(prior, dataset.n_modalities)
    J = dataset.n_modalities
    L = dataset.sample_count
    schedule = config.anneal
    if len(schedule.sigma0) != J:
        raise ValidationError(
            f"anneal schedule lists {len(schedule.sigma0)} sigma0 values for "
            f"{J} modalities")
    for j, M in enumerate(engine.dict_sizes):
        if M > L:
            log.warning("modality %d: dictionary size %d > %d samples", j, M, L)

    em_mode, post_mode = VARIANTS[config.variant]
    exact = post_mode == "exact"
    rng = np.random.default_rng(config.seed)
    dicts = _init_dictionaries(engine, dataset, rng)
    gammas = np.ones((engine.gamma_rows, L))
    sigmas = np.array(schedule.sigma0, dtype=np.float64)
    frozen = np.zeros(J, dtype=bool)
    rejects = np.zeros(J, dtype=int)

    batch_size = config.batch_size if config.batch_size is not None else L
    batch_size = min(batch_size, L)
    sampler = _BatchSampler(rng, L, batch_size)
    stores = None
    if em_mode == "incremental":
        stores = [_StatsStore(L, M, exact) for M in engine.dict_sizes]
        for j in range(J):
            A = engine.design(j, dicts[j])
            st = estep(A, dataset.modalities[j], engine.modality_gammas(j, gammas),
                       sigmas[j], mode=post_mode, want_full=exact,
                       cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)
            stores[j].write(np.arange(L), st)

    loglik_trace: list[float] = []
    sigma_trace: list[np.ndarray] = []
    inner_segments: list[list[float]] = []
    prune_log: list[int] = []
    converged = False
    outer = 0

    while outer < config.max_outer_iters:
        segment: list[float] = []
        stats_now = designs_now = idx_now = None
        segment_converged = False
        for _ in range(config.inner_max_iters):
            idx = sampler.next() if em_mode != "full" else np.arange(L)
            designs = [engine.design(j, dicts[j]) for j in range(J)]
            stats = [
                estep(designs[j], dataset.modalities[j][:, idx],
                      engine.modality_gammas(j, gammas[:, idx]), sigmas[j],
                      mode=post_mode,
                      want_full=exact and em_mode == "incremental",
                      cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)
                for j in range(J)
            ]
            ll = float(sum(st.loglik for st in stats))
            segment.append(ll)
            # M-step: gamma for the touched samples, then dictionaries
            gammas[:, idx] = engine.updated_gammas(stats)
            if stores is not None:
                for j in range(J):
                    stores[j].write(idx, stats[j])
            for j in range(J):
                if frozen[j]:
                    continue
                if em_mode == "incremental":
                    U = stores[j].mu
                    sum_sigma = stores[j].sum_sigma()
                    Yj = dataset.modalities[j]
                else:
                    U = stats[j].mu
                    sum_sigma = (stats[j].sigma_sum if exact
                                 else np.diag(stats[j].sigma_diag.sum(axis=1)))
                    Yj = dataset.modalities[j][:, idx]
                dicts[j] = engine.dict_update(j, Yj, U, sum_sigma)
            stats_now, designs_now, idx_now = stats, designs, idx
            if len(segment) >= 2 and abs(segment[-1] - segment[-2]) <= \
                    config.inner_tol * abs(segment[-2]):
                segment_converged = True
                break
        inner_segments.append(segment)
        loglik_trace.append(segment[-1])
        sigma_trace.append(sigmas.copy())

        # anneal each live modality; the derivative is evaluated at the
        # parameters of the segment's last E-step (the final M-step moved
        # them by less than inner_tol)
        for j in range(J):
            if frozen[j]:
                continue
            deriv = sigma_loglik_derivative(
                designs_now[j], dataset.modalities[j][:, idx_now],
                engine.modality_gammas(j, gammas[:, idx_now]), sigmas[j],
                stats_now[j])
            new_sigma = anneal_sigma(sigmas[j], deriv, schedule)
            if new_sigma == sigmas[j]:
                # every stationary outer iteration counts as a rejection;
                # acceptances reset the streak, so freezing means the scale
                # stopped moving for three full inner segments (one settled
                # segment suffices once the floor is reached, since proposals
                # can never change sigma again)
                rejects[j] += 1
                if rejects[j] >= _SIGMA_REJECTS_TO_CONVERGE or \
                        (segment_converged and sigmas[j] <= schedule.sigma_inf):
                    frozen[j] = True
            else:
                rejects[j] = 0
                sigmas[j] = new_sigma

        # project columns back to unit norm between fixed-sigma segments;
        # gamma is deliberately NOT rescaled: reinstating atom power here is
        # what lets suppressed variances revive as sigma keeps shrinking
        dicts = [normalize_columns(D) for D in dicts]

        outer += 1
        if config.clean_period and outer % config.clean_period == 0:
            _clean_pass(engine, dataset, dicts, gammas, frozen, stats_now,
                        idx_now, stores, config)
        if np.all(frozen):
            converged = True
            break

    # final statistics over every sample at the learned parameters
    final_stats = [
        estep(engine.design(j, dicts[j]), dataset.modalities[j],
              engine.modality_gammas(j, gammas), sigmas[j], mode=post_mode,
              cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)
        for j in range(J)
    ]

    if engine.padded:
        if engine.kind == "atom_to_subspace":
            S_pr = np.eye(engine.tree.leaf_count)
        else:
            S_pr = engine.selectors.s2
        dicts[1], pruned_tree, removed = prune(
            dicts[1], final_stats[1].mu, engine.tree, engine.padded, S_pr,
            config.prune_epsilon)
        prune_log = removed
        engine = _make_engine(PriorSpec(engine.kind, tree=pruned_tree), J,
                              balance=False)
        gammas = _shrink_gammas(gammas, removed, engine)
        final_stats = _refresh_codes(engine, dataset, dicts, gammas, sigmas,
                                     config)

    codes = [engine.codes_from_stats(j, final_stats[j].mu) for j in range(J)]
    state = ModelState(dictionaries=tuple(d.copy() for d in dicts),
                       gammas=gammas, sigmas=tuple(sigmas),
                       prior=engine.final_prior())
    report = FitReport(loglik_trace=np.array(loglik_trace),
                       sigma_trace=np.array(sigma_trace),
                       iterations_run=outer, converged=converged,
                       prune_log=prune_log, inner_loglik=inner_segments,
                       final_codes=codes)
    return state, report


def _clean_pass(engine, dataset, dicts, gammas, frozen, stats_now, idx_now,
                stores, config):
    """Swap redundant/unused atoms for poorly reconstructed data columns."""
    for j in range(len(dicts)):
        if frozen[j]:
            continue
        if stores is not None:
            U = stores[j].mu
            Yj = dataset.modalities[j]
        else:
            U = stats_now[j].mu
            Yj = dataset.modalities[j][:, idx_now]
        codes = engine.codes_from_stats(j, U)
        design_cols = dicts[j]
        cleaned, replaced = clean_dictionary(
            design_cols, codes, Yj,
            coherence_threshold=config.clean_coherence_threshold,
            energy_threshold=config.clean_energy_threshold)
        if replaced:
            log.info("cleaning modality %d: replaced atoms %s", j, replaced)
            dicts[j] = cleaned
            for m in replaced:
                engine.reset_atom(j, m, gammas)


def _shrink_gammas(gammas, removed_leaves, engine):
    """Drop pruned leaves' variance rows (hierarchical layout only)."""
    if engine.kind != "hierarchical":
        return gammas
    old_m2 = (gammas.shape[0]) // 2
    keep = np.array([m for m in range(old_m2) if m not in set(removed_leaves)])
    return np.vstack([gammas[keep], gammas[old_m2 + keep]])


def _refresh_codes(engine, dataset, dicts, gammas, sigmas, config,
                   iters: int = 25):
    """Fixed-dictionary E/gamma iterations after pruning, to re-settle the
    per-sample variances in the reduced geometry."""
    stats = None
    for _ in range(iters):
        stats = [
            estep(engine.design(j, dicts[j]), dataset.modalities[j],
                  engine.modality_gammas(j, gammas), sigmas[j],
                  cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)
            for j in range(len(dicts))
        ]
        gammas[:, :] = engine.updated_gammas(stats)
    return stats


def sparse_codes(D: np.ndarray, Y: np.ndarray, sigma: float,
                 iters: int = 50, tol: float = 1e-8,
                 mode: str = "exact", cg_tol: float = 1e-8):
    """Unimodal fixed-dictionary inference: iterate posterior/variance
    updates until the likelihood stabilizes, return the posterior means
    and variances.  This is how test-time coefficients are estimated."""
    Y = np.asarray(Y, dtype=np.float64)
    Y = Y if Y.ndim == 2 else Y[:, None]
    gammas = np.ones((D.shape[1], Y.shape[1]))
    prev = None
    stats = None
    for _ in range(iters):
        stats = estep(D, Y, gammas, sigma, mode=mode, cg_tol=cg_tol)
        gammas = np.maximum(stats.second_moment_diag, GAMMA_FLOOR)
        if prev is not None and abs(stats.loglik - prev) <= tol * abs(prev):
            break
        prev = stats.loglik
    return stats.mu, gammas
