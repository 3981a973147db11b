"""
Component splitting.

A component is duplicated (a saddle point of the pairwise CMI objective),
then the four conditional vectors mu_ki, mu_kj, mu_new,i, mu_new,j are moved
along the most negative eigendirection of the numerical Hessian of that
objective restricted to them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from app import config
from app.errors import SplitAbortedError
from app.stagewise.info_criterion import cmi_sum, cmi_tensor
from app.stagewise.mdpd import LabelMatrix, MixtureModel, posterior
from app.stagewise.settings import FitConfig

logger = logging.getLogger(config.LOGGER_NAME)


@dataclass(frozen=True)
class SplitPlan:
    source_component: int
    new_component: int
    pair: Tuple[int, int]
    tangent_dim: int
    hessian: Optional[np.ndarray]
    chosen_direction: Optional[np.ndarray]
    step_size: float
    strategy: str  # "eigen", "random" or "aborted"
    objective_before: float
    objective_after: float


# =========================================================
#  DUPLICATION
# =========================================================
def duplicate_component(model: MixtureModel, k: int) -> MixtureModel:
    """Append a copy of component k; k and the copy each keep half of omega_k."""
    if not 0 <= k < model.n_components:
        raise ValueError(f"No component {k} in a {model.n_components}-component model")
    weights = np.append(model.weights, 0.0)
    weights[k] = model.weights[k] / 2.0
    weights[-1] = model.weights[k] / 2.0
    conditionals = np.concatenate([model.conditionals, model.conditionals[k : k + 1]], axis=0)
    return model.with_params(weights=weights, conditionals=conditionals)


# =========================================================
#  TANGENT COORDINATES
# =========================================================
class TangentMap:
    """
    Free coordinates of the four split vectors.

    Each vector's trainable (non-frozen) coordinates are parameterised by all
    but the last one; the last absorbs the remaining trainable mass.
    """

    def __init__(self, model: MixtureModel, k: int, k_new: int, i: int, j: int):
        self.model = model
        self.blocks = [(k, i), (k, j), (k_new, i), (k_new, j)]
        self.slices: List[Tuple[np.ndarray, int, float, slice]] = []

        offset = 0
        for _, worker in self.blocks:
            if model.frozen is None:
                trainable = np.arange(model.n_categories)
                free_mass = 1.0
            else:
                trainable = np.flatnonzero(~model.frozen.mask[worker])
                free_mass = 1.0 - float(model.frozen.mass[worker])
            width = max(trainable.size - 1, 0)
            self.slices.append((trainable, width, free_mass, slice(offset, offset + width)))
            offset += width
        self.dim = offset

    def apply(self, theta: np.ndarray) -> np.ndarray:
        """Conditionals with theta added to the free coordinates (no projection)."""
        mu = np.array(self.model.conditionals, copy=True)
        for (comp, worker), (trainable, width, free_mass, sl) in zip(self.blocks, self.slices):
            free, last = trainable[:-1], trainable[-1]
            mu[comp, worker, free] = self.model.conditionals[comp, worker, free] + theta[sl]
            mu[comp, worker, last] = free_mass - mu[comp, worker, free].sum()
        return mu

    def trainable_values(self, mu: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [mu[comp, worker, tr] for (comp, worker), (tr, _, _, _) in zip(self.blocks, self.slices)]
        )

    def within_margin(self, mu: np.ndarray, margin: float) -> bool:
        values = self.trainable_values(mu)
        return bool(np.all(values >= margin) and np.all(values <= 1.0 - margin))

    def project(self, mu: np.ndarray, margin: float) -> np.ndarray:
        """Clip the four vectors' trainable coordinates to >= margin and restore their mass."""
        mu = np.array(mu, copy=True)
        for (comp, worker), (trainable, _, free_mass, _) in zip(self.blocks, self.slices):
            vals = np.maximum(mu[comp, worker, trainable], margin)
            mu[comp, worker, trainable] = vals / vals.sum() * free_mass
        return mu


# =========================================================
#  RESTRICTED OBJECTIVE
# =========================================================
class RestrictedObjective:
    """theta -> sum_{i != j} I(X_i, X_j | Y) with only the four split vectors free."""

    def __init__(
        self,
        model: MixtureModel,
        data: LabelMatrix,
        S: Iterable[int],
        k: int,
        k_new: int,
        i: int,
        j: int,
        smoothing: float = config.SMOOTHING,
        margin: float = 1e-6,
    ):
        self.tangent = TangentMap(model, k, k_new, i, j)
        self.data = data
        self.S = tuple(S)
        self.smoothing = smoothing
        self.margin = margin
        self.projections = 0

    @property
    def dim(self) -> int:
        return self.tangent.dim

    def model_at(self, theta: np.ndarray) -> MixtureModel:
        mu = self.tangent.apply(np.asarray(theta, dtype=float))
        if np.any(self.tangent.trainable_values(mu) < 0):
            self.projections += 1
            logger.debug(f"Split coordinates left the simplex; projected (#{self.projections})")
            mu = self.tangent.project(mu, self.margin)
        return self.tangent.model.with_params(conditionals=mu)

    def __call__(self, theta: np.ndarray) -> float:
        model = self.model_at(theta)
        post = posterior(model, self.data, self.S)
        return cmi_sum(cmi_tensor(self.data, post, self.smoothing))


def restricted_cmi_objective(
    model: MixtureModel,
    data: LabelMatrix,
    S: Iterable[int],
    k: int,
    k_new: int,
    i: int,
    j: int,
    theta_free: np.ndarray,
    smoothing: float = config.SMOOTHING,
) -> float:
    return RestrictedObjective(model, data, S, k, k_new, i, j, smoothing)(theta_free)


# =========================================================
#  HESSIAN
# =========================================================
def numerical_hessian(
    objective: Callable[[np.ndarray], float],
    dim: int,
    h: float,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central second differences, filled symmetrically. Raises SplitAbortedError on non-finite values."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)

    def f(x: np.ndarray) -> float:
        value = float(objective(x))
        if not np.isfinite(value):
            raise SplitAbortedError(f"Objective is not finite at {x}")
        return value

    center = f(x0)
    eye = np.eye(dim) * h
    hess = np.zeros((dim, dim))
    for a in range(dim):
        hess[a, a] = (f(x0 + 2 * eye[a]) - 2 * center + f(x0 - 2 * eye[a])) / (4 * h * h)
        for b in range(a + 1, dim):
            hess[a, b] = (
                f(x0 + eye[a] + eye[b])
                - f(x0 + eye[a] - eye[b])
                - f(x0 - eye[a] + eye[b])
                + f(x0 - eye[a] - eye[b])
            ) / (4 * h * h)
            hess[b, a] = hess[a, b]
    return hess


# =========================================================
#  SPLIT
# =========================================================
def split_component(
    model: MixtureModel,
    data: LabelMatrix,
    S: Iterable[int],
    i: int,
    j: int,
    k: int,
    cfg: FitConfig,
) -> Tuple[MixtureModel, SplitPlan]:
    """
    Duplicate component k and break the symmetry in coordinates (i, j).

    Steps eps_0, eps_0/2, ... along +-v (v = eigenvector of the most negative
    Hessian eigenvalue) until the four vectors stay inside [delta, 1-delta]
    and the restricted objective strictly decreases. Without negative
    curvature, or once backtracking is exhausted, a seeded random tangent
    step is used instead.
    """
    S = tuple(S)
    dup = duplicate_component(model, k)
    k_new = dup.n_components - 1
    objective = RestrictedObjective(
        dup, data, S, k, k_new, i, j, cfg.smoothing, cfg.simplex_margin
    )
    tangent = objective.tangent

    def plan(strategy, hessian=None, direction=None, step=0.0, before=np.nan, after=np.nan):
        return SplitPlan(
            k, k_new, (i, j), tangent.dim, hessian, direction, step, strategy, before, after
        )

    if tangent.dim == 0:
        logger.warning(f"Split of component {k} on ({i}, {j}) has no free coordinates")
        return dup, plan("aborted")

    try:
        before = objective(np.zeros(tangent.dim))
        if not np.isfinite(before):
            raise SplitAbortedError("Objective is not finite at the duplicated model")
        hessian = numerical_hessian(objective, tangent.dim, cfg.hessian_step)
    except SplitAbortedError as ex:
        logger.warning(f"Split aborted, keeping the unperturbed duplicate: {ex}")
        return dup, plan("aborted")

    eigvals, eigvecs = np.linalg.eigh(hessian)
    logger.debug(f"Split Hessian eigenvalues: {np.round(eigvals, 6).tolist()}")

    if eigvals[0] < -cfg.eig_tol:
        direction = eigvecs[:, 0]
        step = cfg.split_step
        for _ in range(cfg.max_halvings + 1):
            for sign in (1.0, -1.0):
                theta = sign * step * direction
                if not tangent.within_margin(tangent.apply(theta), cfg.simplex_margin):
                    continue
                after = objective(theta)
                if after < before:
                    logger.info(
                        f"Split component {k} on workers ({i}, {j}): "
                        f"step={step:.3g}, CMI sum {before:.6f} -> {after:.6f}"
                    )
                    return (
                        objective.model_at(theta),
                        plan("eigen", hessian, sign * direction, step, before, after),
                    )
            step /= 2.0
        logger.warning(f"Split backtracking exhausted for component {k}; random perturbation")
    else:
        logger.warning(
            f"No negative curvature (min eigenvalue {eigvals[0]:.3g}); random perturbation"
        )

    return _random_split(objective, dup, cfg, hessian, before, k, i, j, plan)


def _random_split(objective, dup, cfg, hessian, before, k, i, j, plan):
    tangent = objective.tangent
    rng = np.random.default_rng([cfg.seed, k, i, j, dup.n_components])
    direction = rng.standard_normal(tangent.dim)
    direction /= np.linalg.norm(direction)

    step = cfg.split_step
    for _ in range(cfg.max_halvings + 1):
        mu = tangent.apply(step * direction)
        if tangent.within_margin(mu, cfg.simplex_margin):
            break
        step /= 2.0
    else:
        mu = tangent.project(tangent.apply(step * direction), cfg.simplex_margin)

    model = dup.with_params(conditionals=mu)
    after = objective(step * direction) if tangent.within_margin(mu, cfg.simplex_margin) else np.nan
    return model, plan("random", hessian, direction, step, before, after)


def perturb_split(
    model: MixtureModel,
    data: LabelMatrix,
    S: Iterable[int],
    i: int,
    j: int,
    k: int,
    cfg: FitConfig,
) -> MixtureModel:
    return split_component(model, data, S, i, j, k, cfg)[0]
