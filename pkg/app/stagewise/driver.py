"""
Stagewise EM.

Starts from a one-component model with the empirical marginals and, every
iteration: computes the CMI tensor on the current regularized posterior,
picks the largest (i, j, k) entry, grows the informative set S (splitting
component k while K < K_target), then runs one regularized E-step on the
updated S and one M-step.

The max CMI of a finite sample never reaches zero. Once K = K_target, S only
grows while the max CMI stays above the chance floor of independent pairs
(see cmi_noise_floor), and the run counts as converged once it falls below.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from app import config
from app.stagewise.info_criterion import (
    Triplet,
    cmi_noise_floor,
    cmi_tensor,
    max_cmi_norm,
    select_triplet,
)
from app.stagewise.mdpd import (
    FrozenCoordinates,
    LabelMatrix,
    MixtureModel,
    init_one_component,
    log_likelihood,
    m_step,
    posterior,
)
from app.stagewise.settings import FitConfig
from app.stagewise.split_engine import split_component

logger = logging.getLogger(config.LOGGER_NAME)

TRACE_COLUMNS = [
    "iteration", "log_likelihood", "max_cmi", "cmi_floor", "s_size", "n_components",
    "i", "j", "k", "value", "split", "informative_set",
]


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    log_likelihood: float
    max_cmi: float
    s_size: int
    n_components: int
    triplet: Optional[Triplet]
    informative_set: Tuple[int, ...]
    split: Optional[str] = None
    wall_time: float = 0.0
    cmi_floor: float = 0.0


@dataclass
class FitTrace:
    """Per-iteration records; wall_time stays in memory and is never serialized."""

    initial_log_likelihood: float = float("nan")
    records: List[TraceRecord] = field(default_factory=list)
    status: str = "running"

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> TraceRecord:
        return self.records[-1]

    def ll_change(self) -> float:
        if not self.records:
            return float("nan")
        previous = (
            self.records[-2].log_likelihood
            if len(self.records) > 1
            else self.initial_log_likelihood
        )
        return self.last.log_likelihood - previous

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for rec in self.records:
            trip = rec.triplet
            rows.append(
                {
                    "iteration": rec.iteration,
                    "log_likelihood": rec.log_likelihood,
                    "max_cmi": rec.max_cmi,
                    "cmi_floor": rec.cmi_floor,
                    "s_size": rec.s_size,
                    "n_components": rec.n_components,
                    "i": trip.i if trip else None,
                    "j": trip.j if trip else None,
                    "k": trip.k if trip else None,
                    "value": trip.value if trip else None,
                    "split": rec.split or "",
                    "informative_set": " ".join(str(s) for s in rec.informative_set),
                }
            )
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)


@dataclass(frozen=True)
class FitResult:
    model: MixtureModel
    informative_set: Tuple[int, ...]
    trace: FitTrace


# =========================================================
#  CONVERGENCE
# =========================================================
def convergence_status(trace: FitTrace, cfg: FitConfig) -> Optional[str]:
    """Why the run should stop after the last record, or None to keep going."""
    if not trace.records:
        raise ValueError("No iteration recorded yet")
    last = trace.last
    if last.max_cmi < max(cfg.tau_cmi, last.cmi_floor):
        return "converged-cmi"
    if last.n_components == cfg.k_target and abs(trace.ll_change()) < cfg.tau_ll:
        return "converged-ll"
    if last.iteration >= cfg.max_iters:
        return "max-iters"
    return None


def converged(trace: FitTrace, cfg: FitConfig) -> bool:
    return convergence_status(trace, cfg) is not None


# =========================================================
#  DRIVER
# =========================================================
def fit_stagewise(
    data: LabelMatrix,
    cfg: FitConfig,
    frozen: Optional[FrozenCoordinates] = None,
) -> FitResult:
    model = init_one_component(data, frozen, cfg.smoothing)
    S: List[int] = []
    trace = FitTrace(initial_log_likelihood=log_likelihood(model, data))
    logger.info(
        f"Stagewise EM: N={data.n_items}, M={data.n_workers}, R={model.n_categories}, "
        f"K_target={cfg.k_target}, initial LL={trace.initial_log_likelihood:.6f}"
    )

    for iteration in range(1, cfg.max_iters + 1):
        started = time.perf_counter()

        post = posterior(model, data, S)
        tensor = cmi_tensor(data, post, cfg.smoothing)
        cmi_max = max_cmi_norm(tensor)
        # the chance floor is in force once K_target is reached; 0 before that
        floor = (
            cmi_noise_floor(data, post, cfg.null_level)
            if model.n_components >= cfg.k_target
            else 0.0
        )
        triplet = select_triplet(tensor, cfg.triplet_score) if data.n_workers > 1 else None

        # pairs whose dependence is within chance neither join S nor split
        split = None
        if triplet is not None and cmi_max >= max(cfg.tau_cmi, floor):
            new_pair = triplet.i not in S or triplet.j not in S
            for idx in (triplet.i, triplet.j):
                if idx not in S:
                    S.append(idx)
            if (new_pair or cfg.split_when_in_s) and model.n_components < cfg.k_target:
                model, plan = split_component(
                    model, data, S, triplet.i, triplet.j, triplet.k, cfg
                )
                split = plan.strategy

        # regularized E-step on the S of this iteration, then the M-step
        model = m_step(data, posterior(model, data, S), frozen, cfg.smoothing)
        ll = log_likelihood(model, data)

        trace.append(
            TraceRecord(
                iteration=iteration,
                log_likelihood=ll,
                max_cmi=cmi_max,
                s_size=len(S),
                n_components=model.n_components,
                triplet=triplet,
                informative_set=tuple(S),
                split=split,
                wall_time=time.perf_counter() - started,
                cmi_floor=floor,
            )
        )
        logger.info(
            f"[iter {iteration}] LL={ll:.6f} maxCMI={cmi_max:.5f} floor={floor:.5f} "
            f"|S|={len(S)} K={model.n_components}" + (f" split={split}" if split else "")
        )

        status = convergence_status(trace, cfg)
        if status:
            trace.status = status
            break

    logger.info(f"Stagewise EM finished after {len(trace)} iterations ({trace.status})")
    return FitResult(model, tuple(S), trace)
