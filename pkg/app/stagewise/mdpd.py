"""
Mixtures of discrete product distributions (MDPD).

Data, model and posterior containers plus the EM kernels every fitter in the
package shares: log-likelihood, the (regularized) E-step, the closed-form
M-step, EM iteration and sampling.

Labels are 0-based inside this module; MISSING marks an absent label. When a
model carries one more category than the data has labels, that last category
is the "missing" category and absent entries are scored against it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from app import config
from app.errors import LabelDataError, ShapeMismatchError

logger = logging.getLogger(config.LOGGER_NAME)

MISSING = config.MISSING

# Components whose total responsibility falls below this are reset
DEGENERATE_MASS = 1e-12
SIMPLEX_ATOL = 1e-10


# =========================================================
#  DATA
# =========================================================
@dataclass(frozen=True)
class LabelMatrix:
    """
    N items x M workers of categorical labels in {0..R-1} or MISSING.

    item_ids / worker_ids / label_map are bookkeeping from ingestion; label_map
    maps the original label strings to 1-based labels.
    """

    entries: np.ndarray
    n_labels: int
    item_ids: Optional[Tuple[str, ...]] = None
    worker_ids: Optional[Tuple[str, ...]] = None
    label_map: Optional[Dict[str, int]] = None

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=np.int64, copy=True)
        if entries.ndim != 2:
            raise LabelDataError(f"Label matrix must be 2-D, got shape {entries.shape}")
        n_items, n_workers = entries.shape
        if n_items < 1 or n_workers < 1:
            raise LabelDataError("Label matrix needs at least one item and one worker")
        if self.n_labels < 2:
            raise LabelDataError(f"Need at least 2 labels, got {self.n_labels}")

        observed = entries[entries != MISSING]
        bad = observed[(observed < 0) | (observed >= self.n_labels)]
        if bad.size:
            raise LabelDataError(
                f"Labels outside 0..{self.n_labels - 1}: {sorted(set(bad.tolist()))[:10]}"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

        item_ids = self.item_ids or tuple(str(n) for n in range(n_items))
        worker_ids = self.worker_ids or tuple(str(i) for i in range(n_workers))
        if len(item_ids) != n_items or len(worker_ids) != n_workers:
            raise LabelDataError("item_ids/worker_ids do not match the matrix shape")
        object.__setattr__(self, "item_ids", tuple(item_ids))
        object.__setattr__(self, "worker_ids", tuple(worker_ids))

    @classmethod
    def from_one_based(cls, values, n_labels: int, **kwargs) -> "LabelMatrix":
        """Build from external 1-based labels; NaN, 0 or negatives mean missing."""
        arr = np.asarray(values, dtype=float)
        missing = ~np.isfinite(arr) | (arr <= 0)
        entries = np.where(missing, MISSING, np.nan_to_num(arr) - 1).astype(np.int64)
        return cls(entries, n_labels, **kwargs)

    @property
    def n_items(self) -> int:
        return self.entries.shape[0]

    @property
    def n_workers(self) -> int:
        return self.entries.shape[1]

    @property
    def missing_mask(self) -> np.ndarray:
        return self.entries == MISSING

    @property
    def has_missing(self) -> bool:
        return bool(self.missing_mask.any())

    def observed_counts(self) -> np.ndarray:
        """Number of non-missing labels per worker."""
        return (~self.missing_mask).sum(axis=0)

    def codes(self, n_categories: int) -> np.ndarray:
        """Integer categories with MISSING mapped onto the appended missing category."""
        if n_categories == self.n_labels:
            if self.has_missing:
                raise ShapeMismatchError(
                    "Data has missing entries but the model has no missing category"
                )
            return np.asarray(self.entries)
        if n_categories == self.n_labels + 1:
            return np.where(self.missing_mask, self.n_labels, self.entries)
        raise ShapeMismatchError(
            f"Model has {n_categories} categories, data has {self.n_labels} labels"
        )

    def one_hot(self, n_categories: int) -> np.ndarray:
        return np.eye(n_categories)[self.codes(n_categories)]

    def select_workers(self, workers: Sequence[int]) -> "LabelMatrix":
        workers = list(workers)
        return LabelMatrix(
            self.entries[:, workers],
            self.n_labels,
            item_ids=self.item_ids,
            worker_ids=tuple(self.worker_ids[i] for i in workers),
            label_map=self.label_map,
        )


# =========================================================
#  MODEL
# =========================================================
@dataclass(frozen=True)
class FrozenCoordinates:
    """Per-(worker, category) coordinates excluded from M-step updates."""

    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        mask = np.array(self.mask, dtype=bool, copy=True)
        values = np.where(mask, np.asarray(self.values, dtype=float), 0.0)
        if mask.shape != values.shape or mask.ndim != 2:
            raise ShapeMismatchError("Frozen mask and values must be matching M x R arrays")
        if np.any(values < 0) or np.any(values.sum(axis=1) >= 1.0):
            raise ShapeMismatchError("Frozen mass per worker must lie in [0, 1)")
        mask.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @property
    def n_categories(self) -> int:
        return self.mask.shape[1]

    @property
    def mass(self) -> np.ndarray:
        """Frozen probability mass per worker."""
        return self.values.sum(axis=1)

    def select_workers(self, workers: Sequence[int]) -> "FrozenCoordinates":
        workers = list(workers)
        return FrozenCoordinates(self.mask[workers], self.values[workers])


@dataclass(frozen=True)
class MixtureModel:
    """
    Theta = (weights omega, conditionals mu) of an MDPD.

    conditionals[k, i, r] = f(X_i = r | Y = k). n_labels is the observed
    alphabet; a trailing extra category is the missing-label category.
    """

    weights: np.ndarray
    conditionals: np.ndarray
    n_labels: Optional[int] = None
    frozen: Optional[FrozenCoordinates] = None

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=float, copy=True)
        mu = np.array(self.conditionals, dtype=float, copy=True)
        if weights.ndim != 1 or mu.ndim != 3 or mu.shape[0] != weights.shape[0]:
            raise ShapeMismatchError(
                f"weights {weights.shape} and conditionals {mu.shape} are inconsistent"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > SIMPLEX_ATOL:
            raise ShapeMismatchError(f"weights are not a probability vector: {weights}")
        if np.any(mu < 0) or np.any(np.abs(mu.sum(axis=2) - 1.0) > SIMPLEX_ATOL):
            raise ShapeMismatchError("conditionals rows are not probability vectors")

        n_labels = mu.shape[2] if self.n_labels is None else int(self.n_labels)
        if n_labels not in (mu.shape[2], mu.shape[2] - 1):
            raise ShapeMismatchError(
                f"n_labels={n_labels} incompatible with {mu.shape[2]} categories"
            )
        if self.frozen is not None:
            if self.frozen.mask.shape != mu.shape[1:]:
                raise ShapeMismatchError("Frozen coordinates do not match the model shape")
            drift = np.abs(mu - self.frozen.values[None])[:, self.frozen.mask]
            if drift.size and drift.max() > 1e-12:
                raise ShapeMismatchError("Frozen coordinates were modified")

        weights.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "conditionals", mu)
        object.__setattr__(self, "n_labels", n_labels)

    @property
    def n_components(self) -> int:
        return self.conditionals.shape[0]

    @property
    def n_workers(self) -> int:
        return self.conditionals.shape[1]

    @property
    def n_categories(self) -> int:
        return self.conditionals.shape[2]

    @property
    def has_missing_category(self) -> bool:
        return self.n_categories == self.n_labels + 1

    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def log_conditionals(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.conditionals)

    def with_params(self, weights=None, conditionals=None) -> "MixtureModel":
        return replace(
            self,
            weights=self.weights if weights is None else weights,
            conditionals=self.conditionals if conditionals is None else conditionals,
        )


@dataclass(frozen=True)
class Posterior:
    """N x K responsibilities f(Y | X_S) and the S they were computed from."""

    responsibilities: np.ndarray
    informative_set: Tuple[int, ...] = ()

    @classmethod
    def from_hard_labels(cls, labels: Sequence[int], n_components: int) -> "Posterior":
        """One-hot responsibilities from 0-based component labels."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_components):
            raise LabelDataError(f"Hard labels must lie in 0..{n_components - 1}")
        return cls(np.eye(n_components)[labels])

    @property
    def n_components(self) -> int:
        return self.responsibilities.shape[1]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)


# =========================================================
#  HELPERS
# =========================================================
def as_informative_set(S: Optional[Iterable[int]], n_workers: int) -> Tuple[int, ...]:
    """Validate S; None means every worker."""
    if S is None:
        return tuple(range(n_workers))
    S = tuple(int(i) for i in S)
    if len(set(S)) != len(S):
        raise ValueError(f"Informative set has duplicates: {S}")
    bad = [i for i in S if i < 0 or i >= n_workers]
    if bad:
        raise ValueError(f"Informative set indices out of range: {bad}")
    return S


def check_compatible(model: MixtureModel, data: LabelMatrix) -> None:
    if model.n_workers != data.n_workers:
        raise ShapeMismatchError(
            f"Model has {model.n_workers} workers, data has {data.n_workers}"
        )
    if model.n_labels != data.n_labels:
        raise ShapeMismatchError(
            f"Model has {model.n_labels} labels, data has {data.n_labels}"
        )
    if data.has_missing and not model.has_missing_category:
        raise ShapeMismatchError(
            "Data has missing entries; estimate missing rates before fitting"
        )


def _normalized_weights(sample_weight, n_items: int) -> np.ndarray:
    if sample_weight is None:
        return np.ones(n_items)
    w = np.asarray(sample_weight, dtype=float)
    if w.shape != (n_items,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample_weight must be a non-negative vector with positive sum")
    return w


def component_log_joint(
    model: MixtureModel, codes: np.ndarray, S: Optional[Sequence[int]] = None
) -> np.ndarray:
    """
    log omega_k + sum_{i in S} log mu_{k,i,x_i} for every row of `codes`.

    Gathers log-probabilities instead of multiplying one-hot arrays so that
    zero probabilities never meet zero indicators (0 * -inf).
    """
    log_w = model.log_weights()
    idx = np.arange(model.n_workers) if S is None else np.asarray(S, dtype=np.int64)
    if idx.size == 0:
        return np.broadcast_to(log_w, (codes.shape[0], model.n_components)).copy()
    log_mu = model.log_conditionals()[:, idx, :]
    gathered = log_mu[:, np.arange(idx.size)[None, :], codes[:, idx]]
    return log_w[None, :] + gathered.sum(axis=2).T


def normalize_counts(counts: np.ndarray, frozen: Optional[FrozenCoordinates]) -> np.ndarray:
    """
    Turn K x M x R (pseudo-)counts into conditionals.

    Frozen coordinates get their fixed values; the trainable ones share the
    remaining mass in proportion to their counts.
    """
    if frozen is None:
        trainable = counts
        free_mass = np.ones(counts.shape[1])
    else:
        trainable = np.where(frozen.mask[None], 0.0, counts)
        free_mass = 1.0 - frozen.mass

    total = trainable.sum(axis=2, keepdims=True)
    n_free = trainable.shape[2] if frozen is None else (~frozen.mask).sum(axis=1)
    uniform = np.broadcast_to(
        (1.0 / np.maximum(n_free, 1)).reshape(1, -1, 1), trainable.shape
    )
    if frozen is not None:
        uniform = np.where(frozen.mask[None], 0.0, uniform)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, trainable / total, uniform)
    mu = share * free_mass[None, :, None]
    if frozen is not None:
        mu = np.where(frozen.mask[None], frozen.values[None], mu)
    return mu


# =========================================================
#  LIKELIHOOD AND E-STEP
# =========================================================
def log_likelihood(
    model: MixtureModel, data: LabelMatrix, sample_weight=None
) -> float:
    """
    Per-sample average marginal log-likelihood (nats).

    Returns -inf, with a warning, when some sample has zero probability.
    """
    check_compatible(model, data)
    w = _normalized_weights(sample_weight, data.n_items)
    per_item = logsumexp(component_log_joint(model, data.codes(model.n_categories)), axis=1)

    active = w > 0
    if np.any(np.isneginf(per_item[active])):
        n_zero = int(np.isneginf(per_item[active]).sum())
        logger.warning(f"{n_zero} samples have zero probability under the model")
        return float("-inf")
    return float(np.dot(w[active], per_item[active]) / w.sum())


def posterior(
    model: MixtureModel, data: LabelMatrix, S: Optional[Iterable[int]] = None
) -> Posterior:
    """
    Regularized E-step: f(Y | X_S) for every item.

    S=None uses every worker; an empty S gives the prior omega on every row.
    """
    check_compatible(model, data)
    S = as_informative_set(S, model.n_workers)
    if not S:
        resp = np.tile(model.weights, (data.n_items, 1))
        return Posterior(resp, S)

    log_joint = component_log_joint(model, data.codes(model.n_categories), S)
    norm = logsumexp(log_joint, axis=1)
    bad = ~np.isfinite(norm)
    if np.any(bad):
        logger.warning(f"{int(bad.sum())} items have zero probability on S; using prior")
        log_joint[bad] = model.log_weights()
        norm[bad] = 0.0
    resp = np.exp(log_joint - norm[:, None])
    return Posterior(resp, S)


# =========================================================
#  M-STEP
# =========================================================
def m_step(
    data: LabelMatrix,
    post: Posterior,
    frozen: Optional[FrozenCoordinates] = None,
    smoothing: float = config.SMOOTHING,
    sample_weight=None,
) -> MixtureModel:
    """
    Closed-form M-step for (possibly regularized) responsibilities.

    omega_k is the responsibility mass of k; mu_kir the responsibility-weighted
    frequency of label r for worker i plus `smoothing` pseudo-counts.
    Components with vanishing mass are reset to the global frequencies.
    """
    resp = np.asarray(post.responsibilities, dtype=float)
    if resp.shape[0] != data.n_items:
        raise ShapeMismatchError(
            f"Posterior has {resp.shape[0]} rows, data has {data.n_items} items"
        )
    if data.has_missing and frozen is None:
        raise ShapeMismatchError(
            "Data has missing entries; estimate missing rates before fitting"
        )
    n_categories = data.n_labels if frozen is None else frozen.n_categories
    w = _normalized_weights(sample_weight, data.n_items)

    onehot = data.one_hot(n_categories)
    weighted = resp * w[:, None]
    mass = weighted.sum(axis=0)
    counts = np.einsum("nk,nmc->kmc", weighted, onehot)

    weights = mass / mass.sum()
    mu = normalize_counts(counts + smoothing, frozen)

    degenerate = np.flatnonzero(mass < DEGENERATE_MASS * w.mean())
    if degenerate.size:
        logger.warning(
            f"Degenerate components {degenerate.tolist()} reset to global frequencies"
        )
        global_counts = np.einsum("n,nmc->mc", w, onehot)[None]
        mu[degenerate] = normalize_counts(global_counts + smoothing, frozen)[0]

    return MixtureModel(weights, mu, n_labels=data.n_labels, frozen=frozen)


def init_one_component(
    data: LabelMatrix,
    frozen: Optional[FrozenCoordinates] = None,
    smoothing: float = config.SMOOTHING,
    sample_weight=None,
) -> MixtureModel:
    """K=1, omega=[1], mu_1i = empirical label frequencies of worker i."""
    silent = np.flatnonzero(data.observed_counts() == 0)
    if silent.size:
        names = [data.worker_ids[i] for i in silent]
        raise LabelDataError(f"Workers without any observed label: {names}")
    ones = Posterior(np.ones((data.n_items, 1)), tuple(range(data.n_workers)))
    return m_step(data, ones, frozen, smoothing, sample_weight)


def em_iterate(
    model: MixtureModel,
    data: LabelMatrix,
    S: Optional[Iterable[int]],
    n_steps: int,
    smoothing: float = config.SMOOTHING,
    sample_weight=None,
) -> Tuple[MixtureModel, List[float]]:
    """
    n_steps of (regularized) E-step + M-step.

    Returns the final model and the log-likelihood before and after each step.
    Only S = all workers carries the EM monotonicity guarantee.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    S = None if S is None else tuple(S)
    lls = [log_likelihood(model, data, sample_weight)]
    for _ in range(n_steps):
        post = posterior(model, data, S)
        model = m_step(data, post, model.frozen, smoothing, sample_weight)
        lls.append(log_likelihood(model, data, sample_weight))
    return model, lls


def q_function(
    model: MixtureModel, data: LabelMatrix, post: Posterior, sample_weight=None
) -> float:
    """Expected complete-data log-likelihood under `post` (entropy term dropped)."""
    check_compatible(model, data)
    w = _normalized_weights(sample_weight, data.n_items)
    log_joint = component_log_joint(model, data.codes(model.n_categories))
    resp = post.responsibilities
    terms = np.where(resp > 0, resp * log_joint, 0.0)
    return float(np.dot(w, terms.sum(axis=1)) / w.sum())


# =========================================================
#  SAMPLING
# =========================================================
def sample(model: MixtureModel, n_items: int, seed) -> Tuple[LabelMatrix, np.ndarray]:
    """Draw Y ~ omega, then X_i ~ mu_{Y,i} independently. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    components = rng.choice(model.n_components, size=n_items, p=model.weights)
    u = rng.random((n_items, model.n_workers))
    cdf = np.cumsum(model.conditionals[components], axis=2)
    codes = (cdf <= u[..., None]).sum(axis=2)
    codes = np.minimum(codes, model.n_categories - 1)
    entries = np.where(codes >= model.n_labels, MISSING, codes)
    return LabelMatrix(entries, model.n_labels), components
