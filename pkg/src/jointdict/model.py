"""Core data structures: datasets, support trees, selector matrices, priors.

Conventions used throughout the package:

* samples are matrix *columns*: a dataset with L samples and J modalities
  is a list of (N_j, L) arrays sharing the column index,
* dictionaries are (N_j, M_j) with unit-norm columns (atoms),
* per-sample hyperparameters are stored column-wise as well, one column
  per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GAMMA_FLOOR = 1e-12
"""Lower clamp for prior variances so their inverses stay finite."""


class ValidationError(ValueError):
    """Raised when a domain object violates its structural invariants."""


def _as_float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class MultimodalDataset:
    """Observations from J sources sharing a common sample index.

    ``modalities[j]`` is the (N_j, L) data matrix of the j-th source.
    ``labels``, when present, is a binary (C, L) matrix; classification
    tasks additionally expect one-of-C columns (see :meth:`is_one_hot`).
    """

    modalities: tuple[np.ndarray, ...]
    labels: np.ndarray | None = None

    def __post_init__(self):
        if len(self.modalities) == 0:
            raise ValidationError("dataset needs at least one modality")
        mats = tuple(_as_float_matrix(m, f"modalities[{j}]")
                     for j, m in enumerate(self.modalities))
        object.__setattr__(self, "modalities", mats)
        L = mats[0].shape[1]
        if L < 1:
            raise ValidationError("dataset must contain at least one sample")
        for j, m in enumerate(mats):
            if m.shape[1] != L:
                raise ValidationError(
                    f"modalities[{j}] has {m.shape[1]} samples, expected {L}")
        if self.labels is not None:
            H = _as_float_matrix(self.labels, "labels")
            if H.shape[1] != L:
                raise ValidationError(
                    f"labels have {H.shape[1]} columns, expected {L}")
            if not np.all((H == 0.0) | (H == 1.0)):
                raise ValidationError("labels must be binary (0/1)")
            object.__setattr__(self, "labels", H)

    @property
    def sample_count(self) -> int:
        return self.modalities[0].shape[1]

    @property
    def modality_dims(self) -> list[int]:
        return [m.shape[0] for m in self.modalities]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def is_one_hot(self) -> bool:
        """True when every label column has exactly one nonzero entry."""
        if self.labels is None:
            return False
        return bool(np.all(self.labels.sum(axis=0) == 1.0))


@dataclass(frozen=True)
class SupportTree:
    """Assignment of second-modality atoms (leaves) to first-modality atoms.

    Branch k couples root atom k with the leaf atoms indexed by
    ``leaf_sets[k]``.  Leaf sets must be disjoint, nonempty, and cover
    ``range(leaf_count)`` exactly.
    """

    leaf_sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        sets = tuple(tuple(int(m) for m in s) for s in self.leaf_sets)
        object.__setattr__(self, "leaf_sets", sets)
        if len(sets) == 0:
            raise ValidationError("support tree needs at least one branch")
        seen: set[int] = set()
        for k, s in enumerate(sets):
            if len(s) == 0:
                raise ValidationError(f"branch {k} has no leaves")
            if len(set(s)) != len(s) or seen.intersection(s):
                raise ValidationError(f"branch {k} overlaps another branch")
            seen.update(s)
        M2 = len(seen)
        if seen != set(range(M2)):
            raise ValidationError(
                "leaf sets must cover 0..M2-1 exactly; "
                f"got indices {sorted(seen)[:8]}...")

    @property
    def branch_count(self) -> int:
        return len(self.leaf_sets)

    @property
    def leaf_count(self) -> int:
        return sum(len(s) for s in self.leaf_sets)

    @property
    def branch_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.leaf_sets], dtype=np.int64)

    def root_of_leaf(self) -> np.ndarray:
        """Map leaf index -> branch index, as an int array of length M2."""
        root = np.empty(self.leaf_count, dtype=np.int64)
        for k, s in enumerate(self.leaf_sets):
            for m in s:
                root[m] = k
        return root

    def is_balanced(self) -> bool:
        sizes = self.branch_sizes
        return bool(np.all(sizes == sizes[0]))


def singleton_tree(n: int) -> SupportTree:
    """Tree with n branches of one leaf each (the trivial coupling)."""
    return SupportTree(tuple((k,) for k in range(n)))


def most_uniform_tree(m1: int, m2: int) -> SupportTree:
    """Spread m2 leaves over m1 branches as evenly as pairing allows.

    Branch k gets leaves {k, k + m1} while k + m1 < m2, and {k} after
    that.  Requires m1 <= m2 <= 2*m1.
    """
    if not (1 <= m1 <= m2 <= 2 * m1):
        raise ValidationError(
            f"most_uniform_tree requires m1 <= m2 <= 2*m1, got ({m1}, {m2})")
    sets = []
    for k in range(m1):
        if k + m1 < m2:
            sets.append((k, k + m1))
        else:
            sets.append((k,))
    return SupportTree(tuple(sets))


PRIOR_KINDS = ("one_to_one", "atom_to_subspace", "hierarchical")


@dataclass(frozen=True)
class PriorSpec:
    """Which joint-sparsity prior couples the modalities.

    ``one_to_one`` shares one variance per atom across all modalities and
    requires equal dictionary sizes.  The structured kinds couple exactly
    two modalities through a :class:`SupportTree`; appending branches for
    J > 2 is not supported in this version.
    """

    kind: str
    atom_count: int | None = None          # one_to_one only
    tree: SupportTree | None = None        # structured kinds only

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValidationError(f"unknown prior kind {self.kind!r}")
        if self.kind == "one_to_one":
            if self.atom_count is None or self.atom_count < 1:
                raise ValidationError("one_to_one prior needs atom_count >= 1")
            if self.tree is not None:
                raise ValidationError("one_to_one prior takes no tree")
        else:
            if self.tree is None:
                raise ValidationError(f"{self.kind} prior needs a tree")
            if self.atom_count is not None:
                raise ValidationError("structured priors derive sizes from the tree")

    @property
    def structured(self) -> bool:
        return self.kind != "one_to_one"

    def atom_counts(self, n_modalities: int) -> list[int]:
        """Dictionary sizes per modality implied by the prior."""
        if self.kind == "one_to_one":
            return [int(self.atom_count)] * n_modalities
        if n_modalities != 2:
            raise ValidationError(
                f"{self.kind} prior couples exactly 2 modalities, got {n_modalities}")
        return [self.tree.branch_count, self.tree.leaf_count]


@dataclass(frozen=True)
class SelectorMatrices:
    """Binary lifting operators for a support tree.

    ``s1`` is (M2, K) with s1[m, k] = 1 iff leaf m belongs to branch k;
    ``s2`` stacks two identities, (2*M2, M2).  ``r1`` and ``r2`` are the
    diagonal matrices satisfying S_j^T S_j R_j = I.
    """

    s1: np.ndarray
    r1: np.ndarray
    s2: np.ndarray
    r2: np.ndarray


def build_selectors(tree: SupportTree) -> SelectorMatrices:
    """Construct the selector/averaging matrices of a support tree."""
    K = tree.branch_count
    M2 = tree.leaf_count
    s1 = np.zeros((M2, K))
    for k, leaves in enumerate(tree.leaf_sets):
        s1[list(leaves), k] = 1.0
    r1 = np.diag(1.0 / tree.branch_sizes.astype(np.float64))
    s2 = np.vstack([np.eye(M2), np.eye(M2)])
    r2 = 0.5 * np.eye(M2)
    return SelectorMatrices(s1=s1, r1=r1, s2=s2, r2=r2)


def balance_tree(tree: SupportTree) -> tuple[SupportTree, int]:
    """Pad small branches with fresh leaves until all sizes are equal.

    New leaf indices are appended after the existing ones, handed out to
    the smallest branches in round-robin order so the result is
    deterministic.  Returns the padded tree and the number of added leaves.
    """
    sizes = tree.branch_sizes
    target = int(sizes.max())
    if np.all(sizes == target):
        return tree, 0
    new_sets = [list(s) for s in tree.leaf_sets]
    next_leaf = tree.leaf_count
    deficit = target - sizes
    for _round in range(int(deficit.max())):
        for k in range(tree.branch_count):
            if len(new_sets[k]) < target:
                new_sets[k].append(next_leaf)
                next_leaf += 1
    padded = SupportTree(tuple(tuple(s) for s in new_sets))
    return padded, next_leaf - tree.leaf_count


def normalize_columns(D: np.ndarray) -> np.ndarray:
    """Rescale every column to unit Euclidean norm, preserving direction."""
    D = np.asarray(D, dtype=np.float64)
    norms = np.linalg.norm(D, axis=0)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise ValidationError(f"cannot normalize zero column(s) {zero.tolist()}")
    return D / norms


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric annealing constants for the noise (and label-noise) scales.

    ``sigma0`` holds one starting scale per modality; proposals shrink by
    ``alpha_sigma`` and are floored at ``sigma_inf``.  The beta fields play
    the same role for supervised runs, where the validation likelihood is
    re-checked every ``t_check`` outer iterations.
    """

    sigma0: tuple[float, ...]
    sigma_inf: float
    alpha_sigma: float
    beta0: tuple[float, ...] = ()
    beta_inf: float = 0.0
    alpha_beta: float = 0.5
    t_check: int = 10

    def __post_init__(self):
        object.__setattr__(self, "sigma0", tuple(float(s) for s in self.sigma0))
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        if not self.sigma0:
            raise ValidationError("sigma0 must list one value per modality")
        if not (self.sigma_inf >= 0.0):
            raise ValidationError("sigma_inf must be >= 0")
        if not all(s > self.sigma_inf for s in self.sigma0):
            raise ValidationError("every sigma0 must exceed sigma_inf")
        if not (0.0 < self.alpha_sigma < 1.0):
            raise ValidationError("alpha_sigma must lie in (0, 1)")
        if self.beta0:
            if not all(b > self.beta_inf >= 0.0 for b in self.beta0):
                raise ValidationError("every beta0 must exceed beta_inf >= 0")
            if not (0.0 < self.alpha_beta < 1.0):
                raise ValidationError("alpha_beta must lie in (0, 1)")
        if self.t_check < 1:
            raise ValidationError("t_check must be >= 1")


@dataclass(frozen=True)
class Classifier:
    """Linear label predictors W_j (C, M_j) with label-noise scales beta_j."""

    weights: tuple[np.ndarray, ...]
    betas: tuple[float, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.betas):
            raise ValidationError("need one beta per classifier matrix")
        if not all(b > 0 for b in self.betas):
            raise ValidationError("betas must be positive")


@dataclass(frozen=True)
class ModelState:
    """Learned parameters: dictionaries, per-sample variances, noise scales.

    ``gammas`` is stored as one column per sample; its row layout depends
    on the prior (atoms for one_to_one, branches for atom_to_subspace,
    stacked root/leaf variances of length 2*M2 for hierarchical).
    """

    dictionaries: tuple[np.ndarray, ...]
    gammas: np.ndarray
    sigmas: tuple[float, ...]
    prior: PriorSpec
    classifier: Classifier | None = None

    def __post_init__(self):
        dicts = tuple(np.asarray(D, dtype=np.float64) for D in self.dictionaries)
        object.__setattr__(self, "dictionaries", dicts)
        object.__setattr__(self, "gammas", np.asarray(self.gammas, dtype=np.float64))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if len(dicts) != len(self.sigmas):
            raise ValidationError("need one sigma per dictionary")
        if not all(s > 0 for s in self.sigmas):
            raise ValidationError("sigmas must be positive")
        if np.any(self.gammas < 0):
            raise ValidationError("gamma entries must be nonnegative")

    @property
    def n_modalities(self) -> int:
        return len(self.dictionaries)
