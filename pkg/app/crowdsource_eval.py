"""
Crowdsourcing evaluation: missing labels, component alignment, predictions, errors.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from app import config
from app.errors import ShapeMismatchError
from app.stagewise.info_criterion import informative_workers
from app.stagewise.mdpd import FrozenCoordinates, LabelMatrix, MixtureModel, posterior

logger = logging.getLogger(config.LOGGER_NAME)

MATCHINGS = ("aligned", "best_permutation")
MAX_PERMUTATION_K = 6


@dataclass(frozen=True)
class MissingLabelPolicy:
    """
    Data restricted to workers that label something, plus their frozen missing rates.

    rates / frozen are indexed like `data` (kept workers only); frozen is None
    when nothing is missing.
    """

    data: LabelMatrix
    rates: np.ndarray
    frozen: Optional[FrozenCoordinates]
    kept_workers: Tuple[int, ...]
    dropped_workers: Tuple[int, ...] = ()


# =========================================================
#  MISSING LABELS
# =========================================================
def estimate_missing_rates(data: LabelMatrix) -> MissingLabelPolicy:
    """
    m_i = fraction of items worker i left unlabeled.

    When anything is missing the alphabet gains a last "missing" category
    whose probability is frozen to m_i in every component.
    """
    rates = data.missing_mask.mean(axis=0)
    silent = np.flatnonzero(rates >= 1.0)
    if silent.size:
        names = [data.worker_ids[i] for i in silent]
        logger.warning(f"Dropping {silent.size} workers without any label: {names}")
    kept = tuple(int(i) for i in np.flatnonzero(rates < 1.0))
    if not kept:
        raise ShapeMismatchError("No worker provided any label")

    reduced = data.select_workers(kept) if silent.size else data
    rates = rates[list(kept)]
    if not reduced.has_missing:
        return MissingLabelPolicy(reduced, rates, None, kept, tuple(silent.tolist()))

    n_categories = data.n_labels + 1
    mask = np.zeros((len(kept), n_categories), dtype=bool)
    mask[:, -1] = True
    values = np.zeros((len(kept), n_categories))
    values[:, -1] = rates
    logger.info(
        f"Missing rates estimated for {len(kept)} workers "
        f"(mean {rates.mean():.3f}, max {rates.max():.3f})"
    )
    return MissingLabelPolicy(
        reduced, rates, FrozenCoordinates(mask, values), kept, tuple(silent.tolist())
    )


# =========================================================
#  ALIGNMENT AND PREDICTION
# =========================================================
def _require_square(model: MixtureModel) -> None:
    if model.n_labels != model.n_components:
        raise ShapeMismatchError(
            f"Predicting labels needs one component per label; model has "
            f"K={model.n_components} components for R={model.n_labels} labels"
        )


def alignment_scores(model: MixtureModel, S: Optional[Iterable[int]] = None) -> np.ndarray:
    """score[k, r] = mean over i in S of mu_kir (observed labels only)."""
    S = list(S) if S is not None else []
    if not S:
        S = list(range(model.n_workers))
    return model.conditionals[:, S, : model.n_labels].mean(axis=1)


def align_components(model: MixtureModel, S: Optional[Iterable[int]] = None) -> np.ndarray:
    """
    Component -> 0-based label, as a length-K permutation.

    Maximum-weight matching on the mean conditional of the informative
    workers; an empty S falls back to all workers.
    """
    _require_square(model)
    rows, cols = linear_sum_assignment(alignment_scores(model, S), maximize=True)
    perm = np.empty(model.n_components, dtype=np.int64)
    perm[rows] = cols
    return perm


def prediction_set(
    model: MixtureModel,
    S: Optional[Iterable[int]],
    n_items: int,
    level: float = config.NULL_LEVEL,
) -> Tuple[int, ...]:
    """
    Workers the posterior is read from: S plus every worker the fitted model
    finds informative about Y (see informative_workers). S None means all.
    """
    if S is None:
        return tuple(range(model.n_workers))
    return tuple(sorted(set(int(i) for i in S) | set(informative_workers(model, n_items, level))))


def predict(
    model: MixtureModel,
    data: LabelMatrix,
    S: Optional[Iterable[int]] = None,
    alignment: Optional[np.ndarray] = None,
) -> np.ndarray:
    """1-based label per item: posterior argmax on S (all workers if None), then aligned."""
    _require_square(model)
    S = None if S is None else tuple(S)
    components = posterior(model, data, S).argmax()
    if alignment is None:
        alignment = align_components(model, S)
    return np.asarray(alignment)[components] + 1


# =========================================================
#  ERRORS
# =========================================================
def prediction_error(
    pred, truth, matching: str = "aligned", n_labels: Optional[int] = None
) -> float:
    """
    Mismatch rate between 1-based label vectors.

    'best_permutation' relabels pred with the permutation that agrees best with
    truth (exhaustive, K <= 6).
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ in length")
    if matching not in MATCHINGS:
        raise ValueError(f"matching must be one of {MATCHINGS}, got '{matching}'")
    if pred.size == 0:
        return 0.0
    if matching == "aligned":
        return float(np.mean(pred != truth))

    n = n_labels or int(max(pred.max(), truth.max()))
    if n > MAX_PERMUTATION_K:
        raise ValueError(f"best_permutation is limited to K <= {MAX_PERMUTATION_K}, got {n}")
    confusion = np.zeros((n, n))
    np.add.at(confusion, (pred - 1, truth - 1), 1)
    best = max(
        confusion[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n))
    )
    return float(1.0 - best / pred.size)
