"""
Statistics of the hybrid distribution f(Y | X_S) * f_hat(X).

The central quantity is the per-component pairwise conditional mutual
information I(X_i, X_j) | (Y = k). Summed over pairs and weighted by the
component masses it approximates (Bethe) the KL upper bound that one EM step
can reach; its largest entry drives the informative-set updates.
All information quantities are in nats.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.special import rel_entr, xlogy
from scipy.stats import chi2

from app import config
from app.stagewise.exact import ExactDistribution
from app.stagewise.mdpd import (
    LabelMatrix,
    MixtureModel,
    Posterior,
    log_likelihood,
    posterior,
)
from app.stagewise.settings import TRIPLET_SCORES

logger = logging.getLogger(config.LOGGER_NAME)


# =========================================================
#  TYPES
# =========================================================
@dataclass(frozen=True)
class CMITensor:
    """
    per_component[k, i, j] = I(X_i, X_j) | (Y=k) (diagonal zeroed),
    component_weights[k] = f~(Y=k), aggregate = sum_k weights[k] * per_component[k].
    """

    per_component: np.ndarray
    component_weights: np.ndarray
    aggregate: np.ndarray

    @property
    def n_components(self) -> int:
        return self.per_component.shape[0]

    @property
    def n_workers(self) -> int:
        return self.per_component.shape[1]


@dataclass(frozen=True)
class Triplet:
    """Worker pair (i < j), component k and the score that selected them."""

    i: int
    j: int
    k: int
    value: float


@dataclass(frozen=True)
class SparsityDiagnostic:
    per_feature_kl: np.ndarray
    l0_count: int
    lam: float
    tau0: float

    @property
    def penalty(self) -> float:
        return self.lam * self.l0_count


# =========================================================
#  CMI TENSOR
# =========================================================
def _pairwise_mi(joint: np.ndarray) -> np.ndarray:
    """MI for an M x M x R x R stack of pairwise joints; symmetric, zero diagonal."""
    p_i = joint.sum(axis=3)
    p_j = joint.sum(axis=2)
    outer = p_i[..., :, None] * p_j[..., None, :]
    mi = rel_entr(joint, outer).sum(axis=(2, 3))
    upper = np.triu(mi, 1)
    return upper + upper.T


def cmi_tensor(
    data: LabelMatrix,
    post: Posterior,
    smoothing: float = config.SMOOTHING,
    sample_weight=None,
) -> CMITensor:
    """
    Pairwise conditional mutual information under the hybrid distribution.

    For each component the weighted pairwise joint counts of all worker pairs
    come out of one (N x MR)^T (N x MR) product, O(K N M^2 R^2) overall.
    Joints are smoothed as (p + eps) / (1 + R^2 eps), which does not depend
    on the component's mass.
    """
    n_categories = data.n_labels + (1 if data.has_missing else 0)
    n_items, n_workers = data.n_items, data.n_workers
    resp = np.asarray(post.responsibilities, dtype=float)
    w = np.ones(n_items) if sample_weight is None else np.asarray(sample_weight, dtype=float)

    onehot = data.one_hot(n_categories).reshape(n_items, n_workers * n_categories)
    mass = (resp * w[:, None]).sum(axis=0)
    component_weights = mass / w.sum()

    per_component = np.zeros((resp.shape[1], n_workers, n_workers))
    for k in range(resp.shape[1]):
        if mass[k] < 1e-12 * w.mean():
            logger.warning(f"Component {k} has no mass; its CMI slice is set to zero")
            continue
        weighted = onehot * (resp[:, k] * w)[:, None]
        counts = weighted.T @ onehot
        joint = counts.reshape(n_workers, n_categories, n_workers, n_categories)
        joint = joint.transpose(0, 2, 1, 3) / mass[k]
        joint = (joint + smoothing) / (1.0 + n_categories ** 2 * smoothing)
        per_component[k] = _pairwise_mi(joint)

    aggregate = np.tensordot(component_weights, per_component, axes=1)
    return CMITensor(per_component, component_weights, aggregate)


# =========================================================
#  SELECTION AND SUMMARIES
# =========================================================
def select_triplet(t: CMITensor, score: str = "per_component") -> Triplet:
    """
    Largest (i < j, k) entry; ties go to the smallest k, then i, then j.

    score='per_component' ranks I(X_i,X_j)|(Y=k) itself, 'weighted' ranks
    f~(Y=k) * I(X_i,X_j)|(Y=k).
    """
    if score not in TRIPLET_SCORES:
        raise ValueError(f"Unknown triplet score '{score}'")
    if t.n_workers < 2:
        raise ValueError("Need at least two workers to pick a pair")
    values = t.per_component
    if score == "weighted":
        values = t.component_weights[:, None, None] * values

    rows, cols = np.triu_indices(t.n_workers, 1)
    flat = values[:, rows, cols]
    best = int(np.argmax(flat))
    k, pair = divmod(best, rows.size)
    return Triplet(int(rows[pair]), int(cols[pair]), int(k), float(flat[k, pair]))


def max_triplet(
    t: CMITensor, tau: float = config.TAU_CMI, score: str = "per_component"
) -> Optional[Triplet]:
    """Best triplet, or None (converged) when it scores below tau."""
    triplet = select_triplet(t, score)
    if triplet.value < tau:
        return None
    return triplet


def cmi_sum(t: CMITensor, restrict: Optional[Iterable[int]] = None) -> float:
    """sum_{i != j} I(X_i, X_j | Y), optionally only over pairs inside `restrict`."""
    aggregate = t.aggregate
    if restrict is not None:
        idx = sorted(set(int(i) for i in restrict))
        aggregate = aggregate[np.ix_(idx, idx)]
    return float(2.0 * np.triu(aggregate, 1).sum())


def max_cmi_norm(t: CMITensor) -> float:
    if t.n_workers < 2:
        return 0.0
    rows, cols = np.triu_indices(t.n_workers, 1)
    return float(t.aggregate[rows, cols].max())


# =========================================================
#  CHANCE LEVELS
# =========================================================
def cmi_noise_floor(
    data: LabelMatrix, post: Posterior, level: float = config.NULL_LEVEL, sample_weight=None
) -> float:
    """
    Value the max aggregate CMI exceeds by chance with probability `level`
    when every worker pair is independent given Y.

    Per component 2 n_k I ~ chi2((R-1)^2), with n_k the effective (Kish) size
    of the component; the weighted sum over components is matched to a scaled
    chi2 and the pair maximum gets a Bonferroni correction. 0 when level is 0.
    """
    if level <= 0 or data.n_workers < 2:
        return 0.0
    n_categories = data.n_labels + (1 if data.has_missing else 0)
    dof = (n_categories - 1) ** 2
    w = np.ones(data.n_items) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    resp = np.asarray(post.responsibilities, dtype=float) * w[:, None]
    mass = resp.sum(axis=0)
    live = mass > 1e-12 * w.sum()
    if not live.any():
        return 0.0
    n_eff = mass[live] ** 2 / (resp[:, live] ** 2).sum(axis=0)
    omega = mass[live] / w.sum()

    mean = float(np.sum(omega * dof / (2.0 * n_eff)))
    total_dof = dof * int(live.sum())
    n_pairs = data.n_workers * (data.n_workers - 1) // 2
    return float(chi2.isf(level / n_pairs, total_dof) * mean / total_dof)


def worker_information(model: MixtureModel) -> np.ndarray:
    """I(X_i; Y) under the model, sum_k w_k KL(mu_ki || mu_bar_i), per worker."""
    mu = model.conditionals
    mu_bar = np.einsum("k,kmr->mr", model.weights, mu)
    return np.einsum("k,kmr->m", model.weights, rel_entr(mu, mu_bar[None]))


def informative_workers(
    model: MixtureModel, n_items: int, level: float = config.NULL_LEVEL
) -> Tuple[int, ...]:
    """
    Workers whose labels depend on Y beyond chance: a G-test of 2 N I(X_i; Y)
    against chi2((K-1)(R-1)) at level / M. Empty when level is 0 or K = 1.
    """
    dof = (model.n_components - 1) * (model.n_labels - 1)
    if level <= 0 or dof < 1:
        return ()
    g = 2.0 * n_items * worker_information(model)
    cutoff = chi2.isf(level / model.n_workers, dof)
    return tuple(int(i) for i in np.flatnonzero(g > cutoff))


# =========================================================
#  SPARSITY (L0 penalty, reporting only)
# =========================================================
def sparsity_diagnostic(
    model: MixtureModel, tau0: float = 1e-6, lam: float = 0.0
) -> SparsityDiagnostic:
    """Per-worker sum_k KL(mu_bar_i || mu_ki) and how many exceed tau0."""
    mu = model.conditionals
    mu_bar = np.einsum("k,kmr->mr", model.weights, mu)
    per_feature = rel_entr(mu_bar[None], mu).sum(axis=(0, 2))
    return SparsityDiagnostic(per_feature, int((per_feature > tau0).sum()), lam, tau0)


def penalized_log_likelihood(
    model: MixtureModel, data: LabelMatrix, lam: float, tau0: float = 1e-6
) -> float:
    return log_likelihood(model, data) - sparsity_diagnostic(model, tau0, lam).penalty


# =========================================================
#  EXACT ORACLES
# =========================================================
def _hybrid_table(f0: ExactDistribution, model: MixtureModel, S):
    data, weights = f0.as_weighted_data()
    post = posterior(model, data, S)
    return data, weights, post, weights[:, None] * post.responsibilities


def brute_upper_bound(f0: ExactDistribution, model: MixtureModel, S) -> float:
    """
    U = sum_i H(X_i | Y) - H(X | Y) under f~(X, Y) = f(Y | X_S) f0(X), by enumeration.
    """
    data, _, _, joint = _hybrid_table(f0, model, S)
    y_entropy = xlogy(joint.sum(axis=0), joint.sum(axis=0)).sum()
    h_x_given_y = -xlogy(joint, joint).sum() + y_entropy

    singles = 0.0
    onehot = data.one_hot(f0.n_categories)
    for i in range(f0.n_workers):
        marg = onehot[:, i, :].T @ joint
        singles += -xlogy(marg, marg).sum() + y_entropy
    return float(singles - h_x_given_y)


def bethe_gap(f0: ExactDistribution, model: MixtureModel, S) -> float:
    """|U - cmi_sum|: how far the pairwise (Bethe) approximation is from the exact bound."""
    data, weights, post, _ = _hybrid_table(f0, model, S)
    t = cmi_tensor(data, post, smoothing=0.0, sample_weight=weights)
    return abs(brute_upper_bound(f0, model, S) - cmi_sum(t))
