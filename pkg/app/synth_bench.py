"""
Synthetic crowdsourcing data.

Two worker populations over K classes with uniform truth:
  - alpha_sparse: the first ceil(alpha * M) workers answer correctly with
    probability p, wrong labels share the rest uniformly;
  - decaying: the first n_informative workers have abilities linearly
    decreasing from p_start to p_end.
Every other worker answers from a fixed Dirichlet(1) distribution that does
not depend on the true class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping

import numpy as np

from app import config
from app.crowdsource_eval import prediction_error
from app.stagewise.info_criterion import cmi_tensor, max_cmi_norm
from app.stagewise.mdpd import LabelMatrix, MixtureModel, log_likelihood, posterior, sample
from app.stagewise.settings import coerce_value

logger = logging.getLogger(config.LOGGER_NAME)

MODES = ("alpha_sparse", "decaying")


@dataclass(frozen=True)
class SynthSpec:
    n_workers: int = 100
    n_items: int = 1000
    n_classes: int = 3
    mode: str = "alpha_sparse"
    alpha: float = 0.1
    p: float = 0.6
    n_informative: int = 30
    p_start: float = 0.7
    p_end: float = 0.45
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.n_workers < 1 or self.n_items < 1:
            raise ValueError("n_workers and n_items must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        chance = 1.0 / self.n_classes
        if self.mode == "alpha_sparse":
            if not 0 < self.alpha <= 1:
                raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
            if not chance < self.p <= 1:
                raise ValueError(f"p must beat chance {chance:.4f} and be <= 1, got {self.p}")
        else:
            if not 1 <= self.n_informative <= self.n_workers:
                raise ValueError(
                    f"n_informative must lie in 1..{self.n_workers}, got {self.n_informative}"
                )
            if self.p_start < self.p_end:
                raise ValueError("p_start must be >= p_end")
            if not (chance < self.p_end and self.p_start <= 1):
                raise ValueError(f"abilities must lie in ({chance:.4f}, 1]")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        kwargs: Dict[str, Any] = {}
        for key, raw in values.items():
            name = key.strip().lower().replace("-", "_")
            if name not in known:
                raise ValueError(f"Unknown simulation option '{key}'")
            if raw is not None:
                kwargs[name] = coerce_value(raw, type(getattr(cls, name)))
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def informative_count(self) -> int:
        if self.mode == "decaying":
            return self.n_informative
        # round first so 0.3 * 100 gives 30, not 31
        return min(math.ceil(round(self.alpha * self.n_workers, 9)), self.n_workers)

    def abilities(self) -> np.ndarray:
        """P(X_i = Y) per worker; NaN for uninformative workers."""
        out = np.full(self.n_workers, np.nan)
        n = self.informative_count
        if self.mode == "decaying":
            out[:n] = np.linspace(self.p_start, self.p_end, n)
        else:
            out[:n] = self.p
        return out


@dataclass(frozen=True)
class SyntheticDataset:
    data: LabelMatrix
    truth_labels: np.ndarray  # 1-based
    truth_model: MixtureModel
    abilities: np.ndarray

    @property
    def informative_workers(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.abilities))


@dataclass(frozen=True)
class Benchmark:
    truth_model: MixtureModel
    benchmark_ll: float
    benchmark_max_cmi: float
    benchmark_error: float


# =========================================================
#  GENERATORS
# =========================================================
def _truth_model(abilities: np.ndarray, n_classes: int, rng: np.random.Generator) -> MixtureModel:
    n_workers = abilities.size
    mu = np.empty((n_classes, n_workers, n_classes))
    for i, p in enumerate(abilities):
        if np.isfinite(p):
            mu[:, i, :] = (1.0 - p) / (n_classes - 1)
            mu[np.arange(n_classes), i, np.arange(n_classes)] = p
        else:
            mu[:, i, :] = rng.dirichlet(np.ones(n_classes))
    weights = np.full(n_classes, 1.0 / n_classes)
    return MixtureModel(weights, mu)


def generate(spec: SynthSpec) -> SyntheticDataset:
    model_seed, sample_seed = np.random.SeedSequence(spec.seed).spawn(2)
    abilities = spec.abilities()
    truth = _truth_model(abilities, spec.n_classes, np.random.default_rng(model_seed))
    data, components = sample(truth, spec.n_items, sample_seed)
    logger.info(
        f"Generated {spec.mode} data: N={spec.n_items}, M={spec.n_workers}, "
        f"K={spec.n_classes}, informative={spec.informative_count}, seed={spec.seed}"
    )
    return SyntheticDataset(data, components + 1, truth, abilities)


def gen_alpha_sparse(spec: SynthSpec) -> SyntheticDataset:
    if spec.mode != "alpha_sparse":
        raise ValueError(f"Expected an alpha_sparse spec, got mode '{spec.mode}'")
    return generate(spec)


def gen_decaying(spec: SynthSpec) -> SyntheticDataset:
    if spec.mode != "decaying":
        raise ValueError(f"Expected a decaying spec, got mode '{spec.mode}'")
    return generate(spec)


# =========================================================
#  BENCHMARK
# =========================================================
def compute_benchmark(
    truth_model: MixtureModel,
    data: LabelMatrix,
    truth_labels,
    smoothing: float = config.SMOOTHING,
) -> Benchmark:
    """Scores of the generating model on the data it generated (per-sample LL, 1/N)."""
    post = posterior(truth_model, data, None)
    predictions = post.argmax() + 1
    return Benchmark(
        truth_model=truth_model,
        benchmark_ll=log_likelihood(truth_model, data),
        benchmark_max_cmi=max_cmi_norm(cmi_tensor(data, post, smoothing)),
        benchmark_error=prediction_error(predictions, truth_labels, "aligned"),
    )
