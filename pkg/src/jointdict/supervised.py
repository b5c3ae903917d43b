"""Label-aware training: joint dictionary and linear-classifier learning.

Each modality gets a linear predictor W_j mapping coefficients to class
scores, with its own label-noise scale beta_j.  The posterior stays
Gaussian because labels enter through a second Gaussian likelihood, so
training reuses the unsupervised E/M machinery with the design matrix
augmented by the scaled classifier rows.  The beta scales anneal against
a held-out validation likelihood rather than the training objective,
which is what keeps the classifier from overfitting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import (
    GAMMA_FLOOR,
    Classifier,
    ModelState,
    MultimodalDataset,
    PriorSpec,
    ValidationError,
    normalize_columns,
)
from .learn import (
    FitReport,
    RunConfig,
    _init_dictionaries,
    _make_engine,
    _raw_dict_update,
    _solve_gram,
    anneal_sigma,
    sparse_codes,
)
from .posterior import batch_loglik, estep, sigma_loglik_derivative

log = logging.getLogger(__name__)

_SIGMA_REJECTS_TO_CONVERGE = 3


@dataclass(frozen=True)
class SupervisedSplit:
    """Labeled training data plus the validation set that steers beta."""

    train: MultimodalDataset
    validation: MultimodalDataset

    def __post_init__(self):
        if self.train.labels is None or self.validation.labels is None:
            raise ValidationError("both splits need label matrices")
        if self.train.modality_dims != self.validation.modality_dims:
            raise ValidationError("splits disagree on modality dimensions")
        if self.train.labels.shape[0] != self.validation.labels.shape[0]:
            raise ValidationError("splits disagree on class count")


def update_classifier(H: np.ndarray, U_td: np.ndarray,
                      sum_sigma_td: np.ndarray, nu: float) -> np.ndarray:
    """Ridge-regularized classifier update
    W = H U^T (U U^T + sum_Sigma + nu I)^-1; nu = 0 recovers the plain
    normal-equation solution."""
    if nu < 0:
        raise ValidationError("nu must be nonnegative")
    M = U_td.shape[0]
    gram = U_td @ U_td.T + sum_sigma_td + nu * np.eye(M)
    return _solve_gram(gram, U_td @ H.T).T


def validation_label_loglik(W: np.ndarray, gammas_val: np.ndarray,
                            beta: float, H_val: np.ndarray) -> float:
    """Sum over validation samples of log N(h_i; 0, beta^2 I + W G_i W^T),
    with G_i the per-sample variances inferred on the validation data."""
    return batch_loglik(W, H_val, gammas_val, beta)


def anneal_beta(beta: float, current_val_ll: float, proposed_val_ll: float,
                schedule) -> float:
    """Accept the geometric shrink of beta only when it improves the
    validation label likelihood; floored at beta_inf."""
    proposal = max(schedule.beta_inf, schedule.alpha_beta * beta)
    if proposal < beta and proposed_val_ll > current_val_ll:
        return proposal
    return beta


def _augmented_design(D, W, sigma, beta):
    return np.vstack([D / sigma, W / beta])


def fit_supervised(split: SupervisedSplit, prior: PriorSpec,
                   config: RunConfig) -> tuple[ModelState, FitReport]:
    """Annealed EM over dictionaries, variances, and classifiers.

    The loop mirrors the unsupervised trainer with three additions: the
    posterior sees labels through the augmented design, each outer
    iteration refreshes W_j, and every ``t_check`` outer iterations the
    label-noise scales are annealed against the validation likelihood.
    Only exact full-sample EM is implemented for supervised runs.
    """
    dataset = split.train
    engine = _make_engine(prior, dataset.n_modalities)
    J = dataset.n_modalities
    L = dataset.sample_count
    H = dataset.labels
    C = H.shape[0]
    schedule = config.anneal
    if len(schedule.sigma0) != J:
        raise ValidationError("anneal schedule must list one sigma0 per modality")
    if len(schedule.beta0) != J:
        raise ValidationError("supervised runs need one beta0 per modality")
    if config.variant != "full":
        raise ValidationError("supervised training supports the 'full' variant")

    rng = np.random.default_rng(config.seed)
    dicts = _init_dictionaries(engine, dataset, rng)
    weights = [np.zeros((C, M)) for M in engine.dict_sizes]
    gammas = np.ones((engine.gamma_rows, L))
    sigmas = np.array(schedule.sigma0, dtype=np.float64)
    betas = np.array(schedule.beta0, dtype=np.float64)
    frozen = np.zeros(J, dtype=bool)
    rejects = np.zeros(J, dtype=int)
    val_ll = np.full(J, -np.inf)

    loglik_trace: list[float] = []
    sigma_trace: list[np.ndarray] = []
    beta_trace: list[np.ndarray] = []
    val_trace: list[float] = []
    inner_segments: list[list[float]] = []
    converged = False
    outer = 0

    while outer < config.max_outer_iters:
        segment: list[float] = []
        stats_now = designs_now = None
        segment_converged = False
        for _ in range(config.inner_max_iters):
            designs = [engine.design(j, dicts[j]) for j in range(J)]
            stats = []
            ll = 0.0
            for j in range(J):
                # labels join the data through the stacked, noise-scaled
                # design; the unit-noise likelihood of the stacked vector is
                # the joint (data, label) likelihood up to the scaling
                # Jacobian, which is constant at fixed sigma and beta
                A_aug = np.vstack([designs[j] / sigmas[j], weights[j] / betas[j]])
                Y_aug = np.vstack([dataset.modalities[j] / sigmas[j], H / betas[j]])
                st = estep(A_aug, Y_aug, engine.modality_gammas(j, gammas), 1.0)
                stats.append(st)
                n_j = dataset.modalities[j].shape[0]
                ll += st.loglik - L * (n_j * np.log(sigmas[j])
                                       + C * np.log(betas[j]))
            segment.append(ll)
            gammas = engine.updated_gammas(stats)
            for j in range(J):
                if frozen[j]:
                    continue
                dicts[j] = engine.dict_update(j, dataset.modalities[j],
                                              stats[j].mu, stats[j].sigma_sum)
                weights[j] = _update_weights(engine, j, H, stats[j],
                                             config.ridge_nu)
            stats_now, designs_now = stats, designs
            if len(segment) >= 2 and abs(segment[-1] - segment[-2]) <= \
                    config.inner_tol * abs(segment[-2]):
                segment_converged = True
                break
        inner_segments.append(segment)
        loglik_trace.append(segment[-1])
        sigma_trace.append(sigmas.copy())
        beta_trace.append(betas.copy())

        for j in range(J):
            if frozen[j]:
                continue
            # data-term derivative only: the label block has its own anneal
            gj = engine.modality_gammas(j, gammas)
            deriv = sigma_loglik_derivative(designs_now[j],
                                            dataset.modalities[j], gj,
                                            sigmas[j])
            new_sigma = anneal_sigma(sigmas[j], deriv, schedule)
            if new_sigma == sigmas[j]:
                rejects[j] += 1
                if rejects[j] >= _SIGMA_REJECTS_TO_CONVERGE or \
                        (segment_converged and sigmas[j] <= schedule.sigma_inf):
                    frozen[j] = True
            else:
                rejects[j] = 0
                sigmas[j] = new_sigma

        dicts = [normalize_columns(D) for D in dicts]
        outer += 1

        if outer % schedule.t_check == 0:
            betas, current = _beta_check(split, engine, dicts, weights,
                                         sigmas, betas, schedule, config)
            val_ll = current
        val_trace.append(float(np.sum(val_ll)))
        if np.all(frozen):
            converged = True
            break

    final_stats = []
    for j in range(J):
        A_aug = np.vstack([engine.design(j, dicts[j]) / sigmas[j],
                           weights[j] / betas[j]])
        Y_aug = np.vstack([dataset.modalities[j] / sigmas[j], H / betas[j]])
        final_stats.append(estep(A_aug, Y_aug,
                                 engine.modality_gammas(j, gammas), 1.0))
    codes = [engine.codes_from_stats(j, final_stats[j].mu) for j in range(J)]

    state = ModelState(dictionaries=tuple(d.copy() for d in dicts),
                       gammas=gammas, sigmas=tuple(sigmas),
                       prior=engine.final_prior(),
                       classifier=Classifier(weights=tuple(weights),
                                             betas=tuple(betas)))
    report = FitReport(loglik_trace=np.array(loglik_trace),
                       sigma_trace=np.array(sigma_trace),
                       iterations_run=outer, converged=converged,
                       inner_loglik=inner_segments, final_codes=codes,
                       validation_loglik_trace=np.array(val_trace),
                       beta_trace=np.array(beta_trace))
    return state, report


def _update_weights(engine, j, H, stats, nu):
    """Classifier M-step; structured priors recombine the lifted statistics."""
    if engine.kind == "hierarchical":
        S = engine.selectors.s1 if j == 0 else engine.selectors.s2
        U = S.T @ stats.mu
        sum_sigma = S.T @ stats.sigma_sum @ S
    else:
        U = stats.mu
        sum_sigma = stats.sigma_sum
    return update_classifier(H, U, sum_sigma, nu)


def _beta_check(split, engine, dicts, weights, sigmas, betas, schedule,
                config):
    """Anneal each beta against the validation label likelihood, using
    variances inferred on the validation data with dictionaries fixed."""
    val = split.validation
    H_val = val.labels
    new_betas = betas.copy()
    lls = np.empty(len(betas))
    for j in range(len(betas)):
        _, gammas_val = sparse_codes(dicts[j], val.modalities[j], sigmas[j],
                                     iters=50, tol=config.inner_tol)
        W = weights[j]
        current = validation_label_loglik(W, gammas_val, betas[j], H_val)
        proposal = max(schedule.beta_inf, schedule.alpha_beta * betas[j])
        if proposal < betas[j]:
            proposed = validation_label_loglik(W, gammas_val, proposal, H_val)
            new_betas[j] = anneal_beta(betas[j], current, proposed, schedule)
            if new_betas[j] != betas[j]:
                current = proposed
        lls[j] = current
    return new_betas, lls


def classify(model: ModelState, Y_test: np.ndarray, modality: int,
             inference_iters: int = 50) -> np.ndarray:
    """Predicted class index per test sample for one modality.

    Coefficients are inferred with the trained dictionary fixed and the
    trained noise scale; the prediction is the argmax class score, ties
    resolved toward the lowest class index.
    """
    if model.classifier is None:
        raise ValidationError("model carries no classifier")
    D = model.dictionaries[modality]
    W = model.classifier.weights[modality]
    mu, _ = sparse_codes(D, Y_test, model.sigmas[modality],
                         iters=inference_iters)
    scores = W @ mu
    return np.argmax(scores, axis=0)


def classification_accuracy(model: ModelState, dataset: MultimodalDataset,
                            modality: int) -> float:
    """Fraction of samples whose predicted class matches the label."""
    if dataset.labels is None:
        raise ValidationError("dataset has no labels to score against")
    pred = classify(model, dataset.modalities[modality], modality)
    true = np.argmax(dataset.labels, axis=0)
    return float(np.mean(pred == true))
