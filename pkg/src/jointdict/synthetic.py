"""Ground-truth-known multimodal data generators.

All generators draw dictionaries with i.i.d. standard normal entries and
unit-normalized columns, per-sample supports of a fixed size, standard
normal coefficients, and noise rescaled per sample to hit the requested
SNR exactly.  Everything is driven by one seed, so identical
specifications produce bit-identical data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    MultimodalDataset,
    PriorSpec,
    SupportTree,
    ValidationError,
    most_uniform_tree,
    normalize_columns,
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic multimodal dataset.

    ``dims`` lists (N_j, M_j) per modality.  For structured kinds M_1 is
    the branch count and M_2 the leaf count of ``tree`` (built as the most
    uniform assignment when omitted).  ``snr_db`` may contain ``inf`` for
    noiseless modalities.  ``share_coefficients`` reuses the first
    modality's coefficient values everywhere (one_to_one only), which is
    how paired denoising data is produced.
    """

    kind: str
    dims: tuple[tuple[int, int], ...]
    sparsity: int
    sample_count: int
    snr_db: tuple[float, ...]
    seed: int
    tree: SupportTree | None = None
    leaf_activation: float = 0.5
    share_coefficients: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple((int(n), int(m))
                                               for n, m in self.dims))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if self.kind not in ("one_to_one", "atom_to_subspace", "hierarchical"):
            raise ValidationError(f"unknown synthetic kind {self.kind!r}")
        if len(self.dims) != len(self.snr_db):
            raise ValidationError("need one SNR per modality")
        if self.sample_count < 1:
            raise ValidationError("sample_count must be >= 1")
        if not all(np.isfinite(s) or s == np.inf for s in self.snr_db):
            raise ValidationError("snr_db entries must be finite or +inf")
        if self.kind == "one_to_one":
            sizes = {m for _, m in self.dims}
            if len(sizes) != 1:
                raise ValidationError("one_to_one requires equal atom counts")
            if not 0 < self.sparsity < self.dims[0][1]:
                raise ValidationError("sparsity must lie in (0, M)")
        else:
            if len(self.dims) != 2:
                raise ValidationError(f"{self.kind} data is bimodal")
            if self.share_coefficients:
                raise ValidationError(
                    "share_coefficients applies to the one_to_one kind only")
            m1, m2 = self.dims[0][1], self.dims[1][1]
            tree = self.tree
            if tree is None:
                tree = most_uniform_tree(m1, m2)
                object.__setattr__(self, "tree", tree)
            if tree.branch_count != m1 or tree.leaf_count != m2:
                raise ValidationError(
                    f"tree ({tree.branch_count} branches, {tree.leaf_count} "
                    f"leaves) does not match dims ({m1}, {m2})")
            if not 0 < self.sparsity < m1:
                raise ValidationError("sparsity must lie in (0, M_1)")
            if not 0.0 <= self.leaf_activation <= 1.0:
                raise ValidationError("leaf_activation must lie in [0, 1]")

    def prior(self) -> PriorSpec:
        if self.kind == "one_to_one":
            return PriorSpec("one_to_one", atom_count=self.dims[0][1])
        return PriorSpec(self.kind, tree=self.tree)


@dataclass(frozen=True)
class SyntheticTruth:
    """Generating parameters kept alongside a synthetic dataset."""

    dictionaries: tuple[np.ndarray, ...]
    codes: tuple[np.ndarray, ...]
    tree: SupportTree | None = None

    @property
    def supports(self) -> tuple[np.ndarray, ...]:
        return tuple(c != 0.0 for c in self.codes)


def generate(spec: SyntheticSpec) -> tuple[MultimodalDataset, SyntheticTruth]:
    """Dispatch on the joint-sparsity kind of the specification."""
    if spec.kind == "one_to_one":
        return gen_one_to_one(spec)
    if spec.kind == "atom_to_subspace":
        return gen_a2s(spec)
    return gen_hier(spec)


def _draw_dictionaries(spec, rng):
    return tuple(normalize_columns(rng.standard_normal((n, m)))
                 for n, m in spec.dims)


def _add_noise(D, X, snr_db, rng):
    """Per-sample noise scaled so 10*log10(||Dx||^2/||v||^2) == snr_db."""
    clean = D @ X
    if snr_db == np.inf:
        return clean
    V = rng.standard_normal(clean.shape)
    signal = np.linalg.norm(clean, axis=0)
    noise = np.linalg.norm(V, axis=0)
    # all-silent samples (possible under hierarchical leaf dropout) stay silent
    scale = np.where(signal > 0.0, signal / noise * 10.0 ** (-snr_db / 20.0), 0.0)
    return clean + V * scale


def gen_one_to_one(spec: SyntheticSpec):
    """Common support of size s across modalities, independent values."""
    rng = np.random.default_rng(spec.seed)
    dicts = _draw_dictionaries(spec, rng)
    M = spec.dims[0][1]
    L = spec.sample_count
    supports = np.zeros((M, L), dtype=bool)
    for i in range(L):
        supports[rng.permutation(M)[:spec.sparsity], i] = True
    codes = []
    for j in range(len(spec.dims)):
        if spec.share_coefficients and j > 0:
            codes.append(codes[0].copy())
            continue
        X = np.zeros((M, L))
        X[supports] = rng.standard_normal(int(supports.sum()))
        codes.append(X)
    mods = tuple(_add_noise(D, X, snr, rng)
                 for D, X, snr in zip(dicts, codes, spec.snr_db))
    return (MultimodalDataset(mods),
            SyntheticTruth(dictionaries=dicts, codes=tuple(codes)))


def gen_a2s(spec: SyntheticSpec):
    """Root support of size s; every leaf of an active root is active."""
    rng = np.random.default_rng(spec.seed)
    dicts = _draw_dictionaries(spec, rng)
    tree = spec.tree
    m1, m2 = tree.branch_count, tree.leaf_count
    L = spec.sample_count
    X1 = np.zeros((m1, L))
    X2 = np.zeros((m2, L))
    for i in range(L):
        roots = rng.permutation(m1)[:spec.sparsity]
        X1[roots, i] = rng.standard_normal(spec.sparsity)
        leaves = [m for k in roots for m in tree.leaf_sets[k]]
        X2[leaves, i] = rng.standard_normal(len(leaves))
    mods = tuple(_add_noise(D, X, snr, rng)
                 for D, X, snr in zip(dicts, (X1, X2), spec.snr_db))
    return (MultimodalDataset(mods),
            SyntheticTruth(dictionaries=dicts, codes=(X1, X2), tree=tree))


def gen_hier(spec: SyntheticSpec):
    """Root support of size s; leaves of active roots switch on with
    probability ``leaf_activation``; inactive roots force silent leaves."""
    rng = np.random.default_rng(spec.seed)
    dicts = _draw_dictionaries(spec, rng)
    tree = spec.tree
    m1, m2 = tree.branch_count, tree.leaf_count
    L = spec.sample_count
    X1 = np.zeros((m1, L))
    X2 = np.zeros((m2, L))
    for i in range(L):
        roots = rng.permutation(m1)[:spec.sparsity]
        X1[roots, i] = rng.standard_normal(spec.sparsity)
        for k in roots:
            leaves = np.array(tree.leaf_sets[k])
            on = rng.random(leaves.size) < spec.leaf_activation
            active = leaves[on]
            X2[active, i] = rng.standard_normal(active.size)
    mods = tuple(_add_noise(D, X, snr, rng)
                 for D, X, snr in zip(dicts, (X1, X2), spec.snr_db))
    return (MultimodalDataset(mods),
            SyntheticTruth(dictionaries=dicts, codes=(X1, X2), tree=tree))


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    """Per-sample SNR of ``noisy`` against the ``clean`` reference, in dB."""
    noise = noisy - clean
    sig = np.sum(clean**2, axis=0)
    err = np.sum(noise**2, axis=0)
    return 10.0 * np.log10(sig / err)
