"""
Exact joint distributions for small, enumerable MDPDs.

Used as an oracle: the hybrid-distribution statistics and EM kernels are run
over every configuration of X weighted by its exact probability.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Tuple, Union

import numpy as np
from scipy.special import rel_entr

from app import config
from app.errors import ShapeMismatchError, SizeGuardError
from app.stagewise.mdpd import LabelMatrix, MixtureModel, component_log_joint


@dataclass(frozen=True)
class ExactDistribution:
    """Full joint f(X, Y): table[x, k] over all R^M configurations x (C order)."""

    table: np.ndarray
    n_workers: int
    n_categories: int

    def __post_init__(self) -> None:
        expected = (self.n_categories ** self.n_workers,)
        if self.table.ndim != 2 or self.table.shape[:1] != expected:
            raise ShapeMismatchError(
                f"table shape {self.table.shape} does not enumerate {expected[0]} configurations"
            )
        if np.any(self.table < 0) or abs(self.table.sum() - 1.0) > 1e-12:
            raise ShapeMismatchError("table is not a probability distribution")

    @property
    def n_components(self) -> int:
        return self.table.shape[1]

    @cached_property
    def configs(self) -> np.ndarray:
        return enumerate_configs(self.n_workers, self.n_categories)

    def marginal(self) -> np.ndarray:
        """f(X) per configuration."""
        return self.table.sum(axis=1)

    def marginal_over(self, S: Iterable[int]) -> np.ndarray:
        """f(X_S), flattened over the workers of S in increasing order."""
        keep = sorted(set(int(i) for i in S))
        cube = self.marginal().reshape((self.n_categories,) * self.n_workers)
        drop = tuple(i for i in range(self.n_workers) if i not in keep)
        return cube.sum(axis=drop).reshape(-1)

    def as_weighted_data(self) -> Tuple[LabelMatrix, np.ndarray]:
        """Every configuration as a label row, with f(X) as its sample weight."""
        return LabelMatrix(self.configs, self.n_categories), self.marginal()


def enumerate_configs(n_workers: int, n_categories: int) -> np.ndarray:
    return np.array(
        list(itertools.product(range(n_categories), repeat=n_workers)), dtype=np.int64
    ).reshape(-1, n_workers)


def exact_from_model(model: MixtureModel, limit: int = config.EXACT_LIMIT) -> ExactDistribution:
    size = model.n_categories ** model.n_workers * model.n_components
    if size > limit:
        raise SizeGuardError(
            f"Exact table would need {size} cells (limit {limit}); "
            f"M={model.n_workers}, R={model.n_categories}, K={model.n_components}"
        )
    configs = enumerate_configs(model.n_workers, model.n_categories)
    table = np.exp(component_log_joint(model, configs))
    # renormalise away the last ulp so the table is a distribution to 1e-12
    table = table / table.sum()
    return ExactDistribution(table, model.n_workers, model.n_categories)


def exact_kl(
    p: Union[ExactDistribution, np.ndarray], q: Union[ExactDistribution, np.ndarray]
) -> float:
    """sum_x p(x) log(p(x)/q(x)) with 0 log 0 = 0."""
    p_arr = p.marginal() if isinstance(p, ExactDistribution) else np.asarray(p, dtype=float)
    q_arr = q.marginal() if isinstance(q, ExactDistribution) else np.asarray(q, dtype=float)
    if p_arr.shape != q_arr.shape:
        raise ShapeMismatchError(f"Cannot compare {p_arr.shape} with {q_arr.shape}")
    return float(np.sum(rel_entr(p_arr, q_arr)))
