"""Batch experiment runner.

Subcommands::

    jointdict synth    --config cfg.toml --out data/
    jointdict fit      --config cfg.toml --data data/ --out model/
    jointdict eval     --model model/ --data data/ --out eval/
    jointdict denoise  --model model/ --data pairs/ --out out/
    jointdict classify --model model/ --data test/ --out out/
    jointdict experiment --config cfg.toml --out exp/

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure, 3 experiment finished with failed trials.  Progress goes to
stderr; machine-readable results go to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("jointdict.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_PARTIAL = 3


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_flag(argv)

    # heavy imports happen after the thread caps are in place
    import numpy as np

    from .config import ConfigError, load_config
    from .io import IoError
    from .model import ValidationError
    from .posterior import NumericalError

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, IoError, ValidationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


def _apply_thread_flag(argv) -> None:
    """--threads caps BLAS pools; must run before numpy is imported."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="jointdict",
        description="multimodal dictionary learning experiment runner")
    sub = parser.add_subparsers(dest="command")

    def add(name, func, needs_config=False, needs_data=False,
            needs_model=False):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True)
        if needs_data:
            p.add_argument("--data", required=True)
        if needs_model:
            p.add_argument("--model", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, needs_config=True)
    add("fit", cmd_fit, needs_config=True, needs_data=True)
    add("eval", cmd_eval, needs_model=True, needs_data=True)
    add("denoise", cmd_denoise, needs_model=True, needs_data=True)
    add("classify", cmd_classify, needs_model=True, needs_data=True)
    add("experiment", cmd_experiment, needs_config=True)
    return parser


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    """Generate a synthetic dataset with its ground truth and manifest."""
    from . import io
    from .config import load_config, synth_spec
    from .synthetic import generate

    cfg = load_config(args.config)
    spec = synth_spec(cfg)
    if args.seed_override is not None:
        spec = _respec_seed(spec, args.seed_override)
    dataset, truth = generate(spec)
    dataset = _maybe_label(dataset, cfg, spec)
    io.save_dataset(args.out, dataset, truth=truth,
                    meta={"config_hash": io.config_hash(cfg),
                          "seed": spec.seed})
    log.info("wrote dataset with dims %s, L=%d to %s",
             dataset.modality_dims, dataset.sample_count, args.out)
    return EXIT_OK


def _respec_seed(spec, seed):
    from dataclasses import replace
    return replace(spec, seed=int(seed))


def _maybe_label(dataset, cfg, spec):
    """Attach block-structured one-hot labels when the config asks for them
    (atoms are split evenly into classes; a sample's class is the block
    holding most of its true support)."""
    import numpy as np
    from .model import MultimodalDataset

    classes = cfg["synth"].get("labels_classes", 0)
    if not classes:
        return dataset
    raise NotImplementedError(
        "labels_classes is reserved; build supervised datasets through the "
        "library API")


def cmd_fit(args) -> int:
    """Train on a dataset directory; write the model and run report."""
    import numpy as np

    from . import io
    from .config import load_config, prior_spec, run_config
    from .learn import fit

    cfg = load_config(args.config)
    dataset = io.load_dataset(args.data)
    prior = prior_spec(cfg, dataset.n_modalities)
    rc = run_config(cfg, dataset.n_modalities, seed_override=args.seed_override)
    if cfg["fit"]["supervised"]:
        state, report = _fit_supervised_from_dir(dataset, prior, rc, cfg)
    else:
        state, report = fit(dataset, prior, rc)
    out = Path(args.out)
    io.save_model(out, state, codes=report.final_codes,
                  meta={"config_hash": io.config_hash(cfg),
                        "seed": rc.seed,
                        "dataset_manifest": io.manifest_digest(args.data),
                        "converged": report.converged,
                        "iterations_run": report.iterations_run})
    _write_report(out, report)
    log.info("fit finished after %d outer iterations (converged=%s)",
             report.iterations_run, report.converged)
    return EXIT_OK


def _fit_supervised_from_dir(dataset, prior, rc, cfg):
    import numpy as np

    from .model import MultimodalDataset
    from .supervised import SupervisedSplit, fit_supervised

    if dataset.labels is None:
        from .config import ConfigError
        raise ConfigError("fit.supervised requires a labeled dataset")
    frac = cfg["fit"]["validation_fraction"]
    L = dataset.sample_count
    n_val = max(1, int(round(frac * L)))
    # deterministic tail split keeps reruns byte-identical
    train = MultimodalDataset(
        tuple(m[:, :L - n_val] for m in dataset.modalities),
        labels=dataset.labels[:, :L - n_val])
    val = MultimodalDataset(
        tuple(m[:, L - n_val:] for m in dataset.modalities),
        labels=dataset.labels[:, L - n_val:])
    return fit_supervised(SupervisedSplit(train=train, validation=val),
                          prior, rc)


def _write_report(out_dir, report) -> None:
    from . import io

    out_dir = Path(out_dir)
    header = ["iteration", "loglik"] + \
        [f"sigma_{j + 1}" for j in range(report.sigma_trace.shape[1])]
    rows = [[i, ll, *sig] for i, (ll, sig) in
            enumerate(zip(report.loglik_trace, report.sigma_trace))]
    io.write_csv_rows(out_dir / "trace.csv", header, rows)
    summary = {
        "iterations_run": report.iterations_run,
        "converged": report.converged,
        "final_loglik": float(report.loglik_trace[-1]),
        "final_sigmas": [float(s) for s in report.sigma_trace[-1]],
        "prune_log": [int(m) for m in report.prune_log],
        "inner_iterations": [len(s) for s in report.inner_loglik],
    }
    if report.beta_trace is not None:
        summary["final_betas"] = [float(b) for b in report.beta_trace[-1]]
    (out_dir / "report.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n")


def cmd_eval(args) -> int:
    """Score a model against the ground truth stored with its dataset."""
    import numpy as np

    from . import io
    from .metrics import (alignment_profile, recovery_probability,
                          varrho_scores, vartheta_scores)

    state, _codes = io.load_model(args.model)
    model_man = io.read_manifest(args.model)
    want = model_man.get("dataset_manifest")
    have = io.manifest_digest(args.data)
    if want is not None and want != have:
        raise io.IoError(
            f"model was trained on a different dataset (manifest digest "
            f"{want[:12]}... != {have[:12]}...); refusing to evaluate")
    truth = io.load_truth(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scores: dict = {"recovery_probability": []}
    for j, (D_true, D_hat) in enumerate(zip(truth.dictionaries,
                                            state.dictionaries)):
        profile = alignment_profile(D_true, D_hat)
        io.write_csv_rows(out / f"alignment_{j}.csv", ["atom", "alignment"],
                          [[m, v] for m, v in enumerate(profile)])
        scores["recovery_probability"].append(
            recovery_probability(D_true, D_hat))
    if state.prior.structured and truth.tree is not None:
        if state.prior.kind == "atom_to_subspace":
            t1, t2 = vartheta_scores(truth.dictionaries[1],
                                     state.dictionaries[1], truth.tree,
                                     state.prior.tree)
            scores["theta1"], scores["theta2"] = t1, t2
        else:
            r1, r2 = varrho_scores(truth.dictionaries[1],
                                   state.dictionaries[1], truth.tree)
            scores["rho1"], scores["rho2"] = r1, r2
        scores["branch_sizes"] = state.prior.tree.branch_sizes.tolist()
    (out / "metrics.json").write_text(
        json.dumps(scores, sort_keys=True, indent=1) + "\n")
    io.write_csv_rows(out / "metrics.csv",
                      ["metric", "value"],
                      [[k, v] for k, vs in scores.items()
                       for v in (vs if isinstance(vs, list) else [vs])
                       if v is not None])
    log.info("evaluation written to %s: %s", out, scores)
    return EXIT_OK


def cmd_denoise(args) -> int:
    """Translate noisy second-modality data into first-modality estimates."""
    import numpy as np

    from . import io
    from .metrics import cross_modal_map, denoise, output_snr_db

    state, codes = io.load_model(args.model)
    if codes is None or len(codes) < 2:
        raise io.IoError("model directory carries no stored training codes; "
                         "re-run fit to enable denoising")
    data_dir = Path(args.data)
    man = io.read_manifest(data_dir)
    files = man["files"]
    if "modality_1" not in files:
        raise io.IoError(f"{data_dir}: paired data needs a modality_1 matrix")
    Y2 = io.read_matrix(data_dir / files["modality_1"])
    P = cross_modal_map(codes[0], codes[1])
    Y1_hat = denoise(state, P, Y2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_matrix(out / "Y1_hat.jdm", Y1_hat)
    io.write_matrix(out / "P.jdm", P)
    report: dict = {"samples": int(Y1_hat.shape[1])}
    if "clean_reference" in files:
        Y1_clean = io.read_matrix(data_dir / files["clean_reference"])
        per = []
        for i in range(Y1_clean.shape[1]):
            per.append(output_snr_db(Y1_clean[:, [i]], Y1_hat[:, [i]]))
        report["output_snr_db"] = output_snr_db(Y1_clean, Y1_hat)
        io.write_csv_rows(out / "snr.csv", ["sample", "snr_db"],
                          [[i, v] for i, v in enumerate(per)])
    (out / "denoise.json").write_text(
        json.dumps(report, sort_keys=True, indent=1) + "\n")
    log.info("denoised %d samples -> %s", Y1_hat.shape[1], out)
    return EXIT_OK


def cmd_classify(args) -> int:
    """Predict class labels for every sample of every modality."""
    import numpy as np

    from . import io
    from .model import ValidationError
    from .supervised import classify

    state, _ = io.load_model(args.model)
    if state.classifier is None:
        raise ValidationError("model carries no classifier; train with "
                              "fit.supervised = true")
    dataset = io.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    preds = []
    for j in range(dataset.n_modalities):
        pred = classify(state, dataset.modalities[j], j)
        preds.append(pred)
        rows.extend([[i, j, int(c)] for i, c in enumerate(pred)])
    io.write_csv_rows(out / "predictions.csv",
                      ["sample", "modality", "predicted_class"], rows)
    report: dict = {"samples": dataset.sample_count}
    if dataset.labels is not None:
        import numpy as np
        true = np.argmax(dataset.labels, axis=0)
        report["accuracy"] = [float(np.mean(p == true)) for p in preds]
    (out / "classify.json").write_text(
        json.dumps(report, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_experiment(args) -> int:
    """Repeat synth -> fit -> eval over seeded trials and aggregate."""
    import numpy as np

    from . import io
    from .config import ConfigError, load_config, prior_spec, run_config, \
        synth_spec
    from .learn import fit
    from .metrics import recovery_probability, varrho_scores, vartheta_scores
    from .synthetic import generate

    cfg = load_config(args.config)
    if "experiment" not in cfg:
        raise ConfigError("config has no [experiment] section")
    trials = cfg["experiment"]["trials"]
    master = cfg["experiment"]["master_seed"]
    if args.seed_override is not None:
        master = int(args.seed_override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_trial: list[dict] = []
    failures = 0
    for t in range(trials):
        seed = master + 1000 * t
        try:
            spec = _respec_seed(synth_spec(cfg), seed)
            dataset, truth = generate(spec)
            prior = prior_spec(cfg, dataset.n_modalities)
            rc = run_config(cfg, dataset.n_modalities, seed_override=seed + 1)
            state, report = fit(dataset, prior, rc)
            row: dict = {"trial": t, "seed": seed, "status": "ok",
                         "final_sigmas": [float(s) for s in state.sigmas]}
            for j in range(dataset.n_modalities):
                row[f"recovery_{j}"] = recovery_probability(
                    truth.dictionaries[j], state.dictionaries[j])
            if prior.kind == "atom_to_subspace":
                t1, t2 = vartheta_scores(truth.dictionaries[1],
                                         state.dictionaries[1], truth.tree,
                                         state.prior.tree)
                row["theta1"], row["theta2"] = t1, t2
            elif prior.kind == "hierarchical":
                r1, r2 = varrho_scores(truth.dictionaries[1],
                                       state.dictionaries[1], truth.tree)
                row["rho1"], row["rho2"] = r1, r2
            per_trial.append(row)
            log.info("trial %d done: %s", t,
                     {k: v for k, v in row.items() if k != "trial"})
        except Exception as exc:           # keep going; report at the end
            failures += 1
            per_trial.append({"trial": t, "seed": seed, "status": "failed",
                              "error": str(exc)})
            log.error("trial %d failed: %s", t, exc)

    numeric_keys = sorted({k for row in per_trial for k, v in row.items()
                           if row.get("status") == "ok"
                           and isinstance(v, (int, float)) and k != "trial"})
    agg = {}
    for k in numeric_keys:
        vals = [row[k] for row in per_trial
                if row.get("status") == "ok" and isinstance(row.get(k), (int, float))]
        if vals:
            agg[k] = {"mean": float(np.mean(vals)),
                      "std": float(np.std(vals)),
                      "n": len(vals)}
    (out / "trials.json").write_text(
        json.dumps({"trials": per_trial, "aggregate": agg,
                    "failures": failures}, sort_keys=True, indent=1) + "\n")
    rows = []
    for row in per_trial:
        rows.append([row["trial"], row["seed"], row["status"]] +
                    [row.get(k, "") for k in numeric_keys])
    io.write_csv_rows(out / "trials.csv",
                      ["trial", "seed", "status"] + numeric_keys, rows)
    log.info("experiment finished: %d/%d trials ok", trials - failures, trials)
    return EXIT_PARTIAL if failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
