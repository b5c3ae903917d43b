"""On-disk formats: binary matrices, manifests, datasets, models.

Matrices use a one-line ASCII header followed by raw little-endian
float64 values in row-major order, which round-trips bit-exactly across
platforms.  Manifests are canonical JSON (sorted keys, no timestamps) so
reruns of a command produce byte-identical files; evaluation commands
compare manifest hashes to refuse mismatched model/data pairs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import (
    Classifier,
    ModelState,
    MultimodalDataset,
    PriorSpec,
    SupportTree,
    ValidationError,
)

MATRIX_MAGIC = "jdmat"
MATRIX_SUFFIX = ".jdm"
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class IoError(RuntimeError):
    """Malformed or inconsistent files on disk."""


def write_matrix(path, array) -> None:
    """Write a 2-d float64 matrix with a self-describing header line."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise IoError(f"can only store 2-d matrices, got shape {arr.shape}")
    header = f"{MATRIX_MAGIC} {arr.shape[0]} {arr.shape[1]} float64 little\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read a matrix written by :func:`write_matrix`."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 5 or parts[0] != MATRIX_MAGIC:
            raise IoError(f"{path}: not a matrix file (header {header!r})")
        rows, cols = int(parts[1]), int(parts[2])
        if parts[3] != "float64" or parts[4] != "little":
            raise IoError(f"{path}: unsupported dtype/byte order {parts[3:]}")
        payload = fh.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise IoError(f"{path}: payload holds {len(payload)} bytes, "
                      f"expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def matrix_to_csv(path, array) -> None:
    """CSV export with round-trip float formatting, for interoperability."""
    arr = np.asarray(array, dtype=np.float64)
    arr = arr[None, :] if arr.ndim == 1 else arr
    with open(path, "w", encoding="ascii") as fh:
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_obj) -> str:
    """Stable hash of a parsed configuration mapping."""
    return hashlib.sha256(canonical_json(config_obj).encode()).hexdigest()


def write_manifest(directory, payload: dict) -> None:
    payload = dict(payload)
    payload["format_version"] = FORMAT_VERSION
    text = json.dumps(payload, sort_keys=True, indent=1)
    (Path(directory) / MANIFEST_NAME).write_text(text + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise IoError(f"{directory}: missing {MANIFEST_NAME}")
    return json.loads(path.read_text())


def manifest_digest(directory) -> str:
    """Hash of a directory's manifest file, used to pair models with the
    data they were trained on."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise IoError(f"{directory}: missing {MANIFEST_NAME}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# datasets


def _tree_to_json(tree: SupportTree | None):
    if tree is None:
        return None
    return [list(s) for s in tree.leaf_sets]


def _tree_from_json(obj) -> SupportTree | None:
    if obj is None:
        return None
    return SupportTree(tuple(tuple(int(m) for m in s) for s in obj))


def save_dataset(directory, dataset: MultimodalDataset, *, truth=None,
                 meta: dict | None = None) -> None:
    """Write modality matrices, optional labels, and generating truth."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for j, Y in enumerate(dataset.modalities):
        name = f"Y_{j}{MATRIX_SUFFIX}"
        write_matrix(directory / name, Y)
        files[f"modality_{j}"] = name
    if dataset.labels is not None:
        write_matrix(directory / f"H{MATRIX_SUFFIX}", dataset.labels)
        files["labels"] = f"H{MATRIX_SUFFIX}"
    truth_block = None
    if truth is not None:
        for j, D in enumerate(truth.dictionaries):
            name = f"D_true_{j}{MATRIX_SUFFIX}"
            write_matrix(directory / name, D)
            files[f"true_dictionary_{j}"] = name
        for j, X in enumerate(truth.codes):
            name = f"X_true_{j}{MATRIX_SUFFIX}"
            write_matrix(directory / name, X)
            files[f"true_codes_{j}"] = name
        truth_block = {"tree": _tree_to_json(truth.tree)}
    payload = {
        "kind": "dataset",
        "modality_dims": dataset.modality_dims,
        "sample_count": dataset.sample_count,
        "files": files,
        "truth": truth_block,
    }
    payload.update(meta or {})
    write_manifest(directory, payload)


def load_dataset(directory) -> MultimodalDataset:
    directory = Path(directory)
    man = read_manifest(directory)
    if man.get("kind") != "dataset":
        raise IoError(f"{directory}: manifest is not a dataset manifest")
    files = man["files"]
    mods = []
    j = 0
    while f"modality_{j}" in files:
        mods.append(read_matrix(directory / files[f"modality_{j}"]))
        j += 1
    labels = None
    if "labels" in files:
        labels = read_matrix(directory / files["labels"])
    return MultimodalDataset(tuple(mods), labels=labels)


def load_truth(directory):
    """True dictionaries, codes, and tree saved beside a synthetic dataset."""
    from .synthetic import SyntheticTruth

    directory = Path(directory)
    man = read_manifest(directory)
    files = man["files"]
    if "true_dictionary_0" not in files:
        raise IoError(f"{directory}: dataset carries no ground truth")
    dicts, codes = [], []
    j = 0
    while f"true_dictionary_{j}" in files:
        dicts.append(read_matrix(directory / files[f"true_dictionary_{j}"]))
        codes.append(read_matrix(directory / files[f"true_codes_{j}"]))
        j += 1
    tree = _tree_from_json((man.get("truth") or {}).get("tree"))
    return SyntheticTruth(dictionaries=tuple(dicts), codes=tuple(codes),
                          tree=tree)


# ---------------------------------------------------------------------------
# models


def save_model(directory, state: ModelState, *, codes=None,
               meta: dict | None = None) -> None:
    """Persist a trained model: one matrix file per dictionary (and
    classifier), scalar noise scales and prior layout in the manifest,
    plus the final training codes needed by downstream commands."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for j, D in enumerate(state.dictionaries):
        name = f"D_{j}{MATRIX_SUFFIX}"
        write_matrix(directory / name, D)
        files[f"dictionary_{j}"] = name
    write_matrix(directory / f"gammas{MATRIX_SUFFIX}", state.gammas)
    files["gammas"] = f"gammas{MATRIX_SUFFIX}"
    if codes is not None:
        for j, U in enumerate(codes):
            name = f"codes_{j}{MATRIX_SUFFIX}"
            write_matrix(directory / name, U)
            files[f"codes_{j}"] = name
    classifier_block = None
    if state.classifier is not None:
        for j, W in enumerate(state.classifier.weights):
            name = f"W_{j}{MATRIX_SUFFIX}"
            write_matrix(directory / name, W)
            files[f"classifier_{j}"] = name
        classifier_block = {"betas": list(state.classifier.betas)}
    payload = {
        "kind": "model",
        "prior": {"kind": state.prior.kind,
                  "atom_count": state.prior.atom_count,
                  "tree": _tree_to_json(state.prior.tree)},
        "sigmas": list(state.sigmas),
        "classifier": classifier_block,
        "files": files,
    }
    payload.update(meta or {})
    write_manifest(directory, payload)


def load_model(directory) -> tuple[ModelState, list[np.ndarray] | None]:
    """Load a model directory; returns the state and stored codes."""
    directory = Path(directory)
    man = read_manifest(directory)
    if man.get("kind") != "model":
        raise IoError(f"{directory}: manifest is not a model manifest")
    files = man["files"]
    dicts = []
    j = 0
    while f"dictionary_{j}" in files:
        dicts.append(read_matrix(directory / files[f"dictionary_{j}"]))
        j += 1
    gammas = read_matrix(directory / files["gammas"])
    prior_block = man["prior"]
    prior = PriorSpec(prior_block["kind"],
                      atom_count=prior_block.get("atom_count"),
                      tree=_tree_from_json(prior_block.get("tree")))
    classifier = None
    if man.get("classifier") is not None:
        weights = []
        j = 0
        while f"classifier_{j}" in files:
            weights.append(read_matrix(directory / files[f"classifier_{j}"]))
            j += 1
        classifier = Classifier(weights=tuple(weights),
                                betas=tuple(man["classifier"]["betas"]))
    state = ModelState(dictionaries=tuple(dicts), gammas=gammas,
                       sigmas=tuple(man["sigmas"]), prior=prior,
                       classifier=classifier)
    codes = None
    if "codes_0" in files:
        codes = []
        j = 0
        while f"codes_{j}" in files:
            codes.append(read_matrix(directory / files[f"codes_{j}"]))
            j += 1
    return state, codes


def write_csv_rows(path, header: list[str], rows) -> None:
    """Plain CSV with repr-formatted floats (lossless on reread)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [repr(float(v)) if isinstance(v, (int, float, np.floating))
                     else str(v) for v in row]
            fh.write(",".join(cells) + "\n")
