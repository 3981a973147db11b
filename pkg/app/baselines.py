"""
Reference algorithms: majority vote and plain EM on the full likelihood.

plain EM with a majority-vote initialisation is the usual crowdsourcing
baseline; "refine" runs plain EM from the stagewise EM model.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app import config
from app.stagewise.driver import FitTrace, TraceRecord
from app.stagewise.mdpd import (
    FrozenCoordinates,
    LabelMatrix,
    MixtureModel,
    Posterior,
    log_likelihood,
    m_step,
    normalize_counts,
    posterior,
)
from app.stagewise.settings import FitConfig

logger = logging.getLogger(config.LOGGER_NAME)

INIT_MODES = ("random", "labels", "model")


def majority_vote(data: LabelMatrix) -> np.ndarray:
    """Most frequent observed label per item (1-based); ties go to the smallest label."""
    counts = np.stack(
        [(data.entries == r).sum(axis=1) for r in range(data.n_labels)], axis=1
    )
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        logger.warning(f"{int(empty.sum())} items have no labels; majority vote gives them label 1")
    return np.argmax(counts, axis=1) + 1


def init_from_labels(
    data: LabelMatrix,
    hard_labels: Sequence[int],
    n_components: int,
    frozen: Optional[FrozenCoordinates] = None,
    smoothing: float = config.SMOOTHING,
) -> MixtureModel:
    """One M-step on one-hot responsibilities built from 1-based hard labels."""
    labels = np.asarray(hard_labels, dtype=np.int64)
    if labels.shape != (data.n_items,):
        raise ValueError(f"Expected {data.n_items} hard labels, got {labels.shape}")
    return m_step(data, Posterior.from_hard_labels(labels - 1, n_components), frozen, smoothing)


def random_init(
    data: LabelMatrix,
    n_components: int,
    seed: int,
    frozen: Optional[FrozenCoordinates] = None,
) -> MixtureModel:
    """Uniform weights, Dirichlet(1) conditionals over the trainable categories."""
    rng = np.random.default_rng(seed)
    n_categories = data.n_labels if frozen is None else frozen.n_categories
    draws = rng.dirichlet(np.ones(n_categories), size=(n_components, data.n_workers))
    mu = normalize_counts(draws, frozen)
    weights = np.full(n_components, 1.0 / n_components)
    return MixtureModel(weights, mu, n_labels=data.n_labels, frozen=frozen)


def fit_em(
    data: LabelMatrix,
    n_components: int,
    init: str = "random",
    cfg: Optional[FitConfig] = None,
    hard_labels: Optional[Sequence[int]] = None,
    model: Optional[MixtureModel] = None,
    frozen: Optional[FrozenCoordinates] = None,
    sample_weight=None,
) -> Tuple[MixtureModel, FitTrace]:
    """
    Plain EM: full-likelihood E-step, M-step, until |dLL| < tau_ll or max_iters.

    init='labels' defaults to majority vote when no hard labels are given;
    init='model' continues from `model` (its frozen coordinates win).
    """
    cfg = cfg or FitConfig(k_target=n_components)
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}, got '{init}'")

    if init == "model":
        if model is None:
            raise ValueError("init='model' needs a model")
        frozen = model.frozen
    elif init == "labels":
        labels = majority_vote(data) if hard_labels is None else hard_labels
        model = init_from_labels(data, labels, n_components, frozen, cfg.smoothing)
    else:
        model = random_init(data, n_components, cfg.seed, frozen)

    trace = FitTrace(initial_log_likelihood=log_likelihood(model, data, sample_weight))
    all_workers = tuple(range(data.n_workers))

    for iteration in range(1, cfg.max_iters + 1):
        post = posterior(model, data, None)
        model = m_step(data, post, frozen, cfg.smoothing, sample_weight)
        ll = log_likelihood(model, data, sample_weight)
        trace.append(
            TraceRecord(
                iteration=iteration,
                log_likelihood=ll,
                max_cmi=float("nan"),
                s_size=data.n_workers,
                n_components=model.n_components,
                triplet=None,
                informative_set=all_workers,
            )
        )
        if abs(trace.ll_change()) < cfg.tau_ll:
            trace.status = "converged-ll"
            break
    else:
        trace.status = "max-iters"

    logger.info(
        f"EM ({init} init) stopped after {len(trace)} iterations ({trace.status}), "
        f"LL={trace.last.log_likelihood:.6f}"
    )
    return model, trace


def refine(
    model: MixtureModel, data: LabelMatrix, cfg: Optional[FitConfig] = None, sample_weight=None
) -> MixtureModel:
    """Plain EM started from a fitted model."""
    return fit_em(
        data, model.n_components, init="model", cfg=cfg, model=model, sample_weight=sample_weight
    )[0]
