"""TOML run configurations: schema, defaults, strict validation.

A configuration file holds one or more of the sections below; unknown
keys anywhere are errors, so typos fail fast instead of silently using a
default.  The full schema with defaults is documented in
``docs/config.md`` at the repository root.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import AnnealSchedule, PriorSpec, SupportTree, most_uniform_tree
from .learn import VARIANTS, RunConfig
from .synthetic import SyntheticSpec


class ConfigError(ValueError):
    """Invalid, missing, or unknown configuration fields."""


# section -> key -> (type, default); REQUIRED means no default
REQUIRED = object()

_SYNTH_KEYS = {
    "prior": (str, REQUIRED),
    "modality_dims": (list, REQUIRED),
    "atom_counts": (list, REQUIRED),
    "sparsity": (int, REQUIRED),
    "sample_count": (int, REQUIRED),
    "snr_db": (list, REQUIRED),
    "seed": (int, REQUIRED),
    "leaf_sets": (list, None),
    "leaf_activation": (float, 0.5),
    "share_coefficients": (bool, False),
    "labels_classes": (int, 0),
}

_FIT_KEYS = {
    "prior": (str, REQUIRED),
    "atom_counts": (list, None),
    "leaf_sets": (list, None),
    "variant": (str, "full"),
    "batch_size": (int, None),
    "max_outer_iters": (int, 5000),
    "inner_tol": (float, 1e-6),
    "inner_max_iters": (int, 200),
    "clean_period": (int, 50),
    "clean_coherence_threshold": (float, 0.99),
    "clean_energy_threshold": (float, 1e-3),
    "prune_epsilon": (float, 0.9),
    "cg_tol": (float, 1e-8),
    "cg_max_iter": (int, None),
    "ridge_nu": (float, 1e-4),
    "seed": (int, 0),
    "supervised": (bool, False),
    "validation_fraction": (float, 0.2),
}

_ANNEAL_KEYS = {
    "sigma0": (list, None),
    "sigma_inf": (float, float(np.sqrt(1e-3))),
    "alpha_sigma": (float, float(np.sqrt(0.995))),
    "beta0": (list, None),
    "beta_inf": (float, 0.01),
    "alpha_beta": (float, float(np.sqrt(0.995))),
    "t_check": (int, 10),
}

_EXPERIMENT_KEYS = {
    "trials": (int, REQUIRED),
    "master_seed": (int, REQUIRED),
}

_SECTIONS = {
    "synth": _SYNTH_KEYS,
    "fit": _FIT_KEYS,
    "anneal": _ANNEAL_KEYS,
    "experiment": _EXPERIMENT_KEYS,
}

# starting noise scales when the config omits them, by modality count
_DEFAULT_SIGMA0 = {
    1: (1.0,),
    2: (1.0, float(np.sqrt(10.0))),
    3: (1.0, float(np.sqrt(1.5)), float(np.sqrt(2.0))),
}


def load_config(path) -> dict:
    """Parse and validate a TOML file into plain nested dicts."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return validate_config(raw, source=str(path))


def validate_config(raw: dict, source: str = "<config>") -> dict:
    out: dict = {}
    for section, content in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(
                f"{source}: unknown section [{section}]; expected one of "
                f"{sorted(_SECTIONS)}")
        if not isinstance(content, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        out[section] = _validate_section(section, content, source)
    return out


def _validate_section(section: str, content: dict, source: str) -> dict:
    schema = _SECTIONS[section]
    result = {}
    for key, value in content.items():
        if key not in schema:
            raise ConfigError(
                f"{source}: unknown key {section}.{key}; expected one of "
                f"{sorted(schema)}")
        want, _default = schema[key]
        if want is float and isinstance(value, int):
            value = float(value)
        if want is int and isinstance(value, bool):
            raise ConfigError(f"{source}: {section}.{key} must be an integer")
        if not isinstance(value, want):
            raise ConfigError(
                f"{source}: {section}.{key} must be {want.__name__}, "
                f"got {type(value).__name__}")
        result[key] = value
    for key, (want, default) in schema.items():
        if key not in result:
            if default is REQUIRED:
                raise ConfigError(f"{source}: missing required key "
                                  f"{section}.{key}")
            result[key] = default
    return result


def _tree_from(leaf_sets, atom_counts) -> SupportTree:
    if leaf_sets is not None:
        return SupportTree(tuple(tuple(int(m) for m in s) for s in leaf_sets))
    if atom_counts is None or len(atom_counts) != 2:
        raise ConfigError("structured priors need atom_counts = [M1, M2] "
                          "or explicit leaf_sets")
    return most_uniform_tree(int(atom_counts[0]), int(atom_counts[1]))


def synth_spec(cfg: dict) -> SyntheticSpec:
    """Build a generator specification from the [synth] section."""
    if "synth" not in cfg:
        raise ConfigError("config has no [synth] section")
    s = cfg["synth"]
    dims = tuple((int(n), int(m))
                 for n, m in zip(s["modality_dims"], s["atom_counts"]))
    if len(s["modality_dims"]) != len(s["atom_counts"]):
        raise ConfigError("synth.modality_dims and synth.atom_counts must "
                          "have equal length")
    tree = None
    if s["prior"] != "one_to_one":
        tree = _tree_from(s["leaf_sets"], s["atom_counts"])
    try:
        return SyntheticSpec(kind=s["prior"], dims=dims,
                             sparsity=s["sparsity"],
                             sample_count=s["sample_count"],
                             snr_db=tuple(float(v) for v in s["snr_db"]),
                             seed=s["seed"], tree=tree,
                             leaf_activation=s["leaf_activation"],
                             share_coefficients=s["share_coefficients"])
    except Exception as exc:
        raise ConfigError(f"[synth]: {exc}") from exc


def prior_spec(cfg: dict, n_modalities: int) -> PriorSpec:
    f = cfg["fit"]
    kind = f["prior"]
    if kind == "one_to_one":
        counts = f["atom_counts"]
        if counts is None:
            raise ConfigError("fit.atom_counts is required")
        return PriorSpec("one_to_one", atom_count=int(counts[0]))
    return PriorSpec(kind, tree=_tree_from(f["leaf_sets"], f["atom_counts"]))


def anneal_schedule(cfg: dict, n_modalities: int,
                    supervised: bool = False) -> AnnealSchedule:
    a = cfg.get("anneal", _validate_section("anneal", {}, "<defaults>"))
    sigma0 = a["sigma0"]
    if sigma0 is None:
        if n_modalities not in _DEFAULT_SIGMA0:
            raise ConfigError(
                f"no default sigma0 for {n_modalities} modalities; set "
                "anneal.sigma0 explicitly")
        sigma0 = _DEFAULT_SIGMA0[n_modalities]
    if len(sigma0) != n_modalities:
        raise ConfigError(f"anneal.sigma0 lists {len(sigma0)} values for "
                          f"{n_modalities} modalities")
    beta0 = a["beta0"]
    if supervised and beta0 is None:
        beta0 = (10.0,) * n_modalities
    try:
        return AnnealSchedule(sigma0=tuple(float(v) for v in sigma0),
                              sigma_inf=a["sigma_inf"],
                              alpha_sigma=a["alpha_sigma"],
                              beta0=tuple(float(v) for v in beta0 or ()),
                              beta_inf=a["beta_inf"],
                              alpha_beta=a["alpha_beta"],
                              t_check=a["t_check"])
    except Exception as exc:
        raise ConfigError(f"[anneal]: {exc}") from exc


def run_config(cfg: dict, n_modalities: int, seed_override=None) -> RunConfig:
    """Build the trainer configuration from [fit] and [anneal]."""
    if "fit" not in cfg:
        raise ConfigError("config has no [fit] section")
    f = cfg["fit"]
    if f["variant"] not in VARIANTS:
        raise ConfigError(f"fit.variant must be one of {sorted(VARIANTS)}")
    schedule = anneal_schedule(cfg, n_modalities, supervised=f["supervised"])
    seed = f["seed"] if seed_override is None else int(seed_override)
    try:
        return RunConfig(anneal=schedule, variant=f["variant"],
                         batch_size=f["batch_size"],
                         max_outer_iters=f["max_outer_iters"],
                         inner_tol=f["inner_tol"],
                         inner_max_iters=f["inner_max_iters"],
                         clean_period=f["clean_period"],
                         clean_coherence_threshold=f["clean_coherence_threshold"],
                         clean_energy_threshold=f["clean_energy_threshold"],
                         prune_epsilon=f["prune_epsilon"],
                         cg_tol=f["cg_tol"], cg_max_iter=f["cg_max_iter"],
                         ridge_nu=f["ridge_nu"], seed=seed)
    except Exception as exc:
        raise ConfigError(f"[fit]: {exc}") from exc
