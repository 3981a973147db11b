"""
Running fits and experiment grids.

`run_algorithm` is the single dispatch used by the CLI, the HTTP app and the
grid; `run_grid` fans (alpha x seed) cells out to a process pool and returns
one summary row per cell, failed cells included.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from app import config
from app.baselines import fit_em
from app.crowdsource_eval import predict, prediction_error, prediction_set
from app.errors import StagewiseError
from app.stagewise.driver import FitTrace, fit_stagewise
from app.stagewise.mdpd import FrozenCoordinates, LabelMatrix, MixtureModel
from app.stagewise.settings import FitConfig
from app.synth_bench import SynthSpec, compute_benchmark, generate

logger = logging.getLogger(config.LOGGER_NAME)

ALGORITHMS = ("stagewise", "em-random", "em-mv", "refine")
GRID_KEYS = ("alphas", "seeds", "algorithms", "workers")


@dataclass(frozen=True)
class RunOutcome:
    algorithm: str
    model: MixtureModel
    informative_set: Tuple[int, ...]
    trace: FitTrace


def run_algorithm(
    algorithm: str,
    data: LabelMatrix,
    cfg: FitConfig,
    frozen: Optional[FrozenCoordinates] = None,
    start: Optional[MixtureModel] = None,
) -> RunOutcome:
    """
    stagewise | em-random | em-mv | refine.

    refine continues plain EM from `start` when given, otherwise from a fresh
    stagewise fit; its informative set is every worker.
    """
    all_workers = tuple(range(data.n_workers))
    if algorithm == "stagewise":
        result = fit_stagewise(data, cfg, frozen)
        return RunOutcome(algorithm, result.model, result.informative_set, result.trace)
    if algorithm == "em-random":
        model, trace = fit_em(data, cfg.k_target, "random", cfg, frozen=frozen)
        return RunOutcome(algorithm, model, all_workers, trace)
    if algorithm == "em-mv":
        model, trace = fit_em(data, cfg.k_target, "labels", cfg, frozen=frozen)
        return RunOutcome(algorithm, model, all_workers, trace)
    if algorithm == "refine":
        if start is None:
            start = fit_stagewise(data, cfg, frozen).model
        model, trace = fit_em(data, start.n_components, "model", cfg, model=start)
        return RunOutcome(algorithm, model, all_workers, trace)
    raise StagewiseError(f"Unknown algorithm '{algorithm}' (known: {ALGORITHMS})")


# ---------------------------------------------------------
# Grid configuration
# ---------------------------------------------------------
def _split_list(raw: str) -> List[str]:
    return [part.strip() for part in str(raw).split(",") if part.strip()]


def load_grid_config(path: str) -> Dict[str, str]:
    """KEY=value experiment file; keys are SynthSpec/FitConfig fields or grid keys."""
    values = dotenv_values(path)
    return {k.strip().lower(): v for k, v in values.items() if v is not None}


def build_cells(settings: Mapping[str, Any]) -> List[Dict[str, Any]]:
    """Expand `alphas` x `seeds` into one cell per synthetic dataset."""
    spec_fields = {f.name for f in fields(SynthSpec)}
    fit_fields = {f.name for f in fields(FitConfig)}

    spec_values: Dict[str, Any] = {}
    fit_values: Dict[str, Any] = {}
    for key, value in settings.items():
        name = key.strip().lower().replace("-", "_")
        if name in GRID_KEYS:
            continue
        if name not in spec_fields and name not in fit_fields:
            raise StagewiseError(f"Unknown grid option '{key}'")
        if name in spec_fields:
            spec_values[name] = value
        if name in fit_fields:
            fit_values[name] = value

    alphas = _split_list(settings.get("alphas", "")) or [spec_values.get("alpha", SynthSpec.alpha)]
    seeds_raw = _split_list(settings.get("seeds", "10"))
    seeds = list(range(int(seeds_raw[0]))) if len(seeds_raw) == 1 else [int(s) for s in seeds_raw]
    algorithms = _split_list(settings.get("algorithms", "stagewise,em-mv"))
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise StagewiseError(f"Unknown algorithms {unknown} (known: {ALGORITHMS})")

    fit_values.setdefault("k_target", spec_values.get("n_classes", SynthSpec.n_classes))
    cells = []
    for alpha in alphas:
        for seed in seeds:
            spec = SynthSpec.from_mapping({**spec_values, "alpha": alpha, "seed": seed})
            cfg = FitConfig.from_mapping({**fit_values, "seed": seed})
            cells.append({"spec": spec, "config": cfg, "algorithms": algorithms})
    return cells


# ---------------------------------------------------------
# Running
# ---------------------------------------------------------
def run_cell(spec: SynthSpec, cfg: FitConfig, algorithms: List[str]) -> List[Dict[str, Any]]:
    """
    One synthetic dataset, every algorithm on it; errors use best_permutation.

    An algorithm that fails (say a fit that stopped short of one component per
    class) gets its own 'error' row; the other algorithms are still reported.
    """
    dataset = generate(spec)
    bench = compute_benchmark(dataset.truth_model, dataset.data, dataset.truth_labels, cfg.smoothing)
    base = {"mode": spec.mode, "alpha": spec.alpha, "seed": spec.seed}
    rows = [
        {
            **base,
            "algorithm": "truth",
            "error": bench.benchmark_error,
            "log_likelihood": bench.benchmark_ll,
            "max_cmi": bench.benchmark_max_cmi,
            "s_size": spec.n_workers,
            "iterations": 0,
            "status": "processed",
        }
    ]
    for algorithm in algorithms:
        try:
            outcome = run_algorithm(algorithm, dataset.data, cfg)
            workers = prediction_set(
                outcome.model, outcome.informative_set, spec.n_items, cfg.null_level
            )
            pred = predict(outcome.model, dataset.data, workers)
        except StagewiseError as ex:
            logger.error(f"{algorithm} on alpha={spec.alpha} seed={spec.seed} failed: {ex}")
            rows.append({**base, "algorithm": algorithm, "status": "error", "error_message": str(ex)})
            continue
        rows.append(
            {
                **base,
                "algorithm": algorithm,
                "error": prediction_error(
                    pred, dataset.truth_labels, "best_permutation", spec.n_classes
                ),
                "log_likelihood": outcome.trace.last.log_likelihood,
                "max_cmi": outcome.trace.last.max_cmi,
                "s_size": len(outcome.informative_set),
                "iterations": len(outcome.trace),
                "status": "processed",
            }
        )
    return rows


def _run_cell_safe(cell: Dict[str, Any]) -> List[Dict[str, Any]]:
    spec = cell["spec"]
    try:
        return run_cell(spec, cell["config"], cell["algorithms"])
    except Exception as ex:
        logger.error(
            f"Grid cell alpha={spec.alpha} seed={spec.seed} failed: {ex}"
        )
        return [
            {
                "mode": spec.mode,
                "alpha": spec.alpha,
                "seed": spec.seed,
                "algorithm": ",".join(cell["algorithms"]),
                "status": "error",
                "error_message": str(ex),
            }
        ]


def run_grid(settings: Mapping[str, Any], workers: Optional[int] = None) -> pd.DataFrame:
    """
    Every cell of the grid, run in a process pool.

    A failing cell becomes an 'error' row; the others are still reported.
    """
    cells = build_cells(settings)
    workers = workers or int(settings.get("workers", config.GRID_WORKERS))
    logger.info(f"Running {len(cells)} grid cells on {workers} worker processes")

    rows: List[Dict[str, Any]] = []
    if workers <= 1:
        for cell in cells:
            rows.extend(_run_cell_safe(cell))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell_safe, cell) for cell in cells]
            for future in as_completed(futures):
                rows.extend(future.result())

    df = pd.DataFrame(rows)
    failed = int((df["status"] == "error").sum()) if not df.empty else 0
    logger.info(f"Grid finished: {len(cells)} cells, {failed} failed")
    return df.sort_values(["alpha", "seed", "algorithm"], kind="stable").reset_index(drop=True)


def summarize_grid(rows: pd.DataFrame) -> pd.DataFrame:
    """Median error / LL / |S| per (alpha, algorithm) over processed cells."""
    ok = rows[rows["status"] == "processed"]
    if ok.empty:
        return pd.DataFrame(columns=["alpha", "algorithm", "error", "log_likelihood", "s_size", "n"])
    summary = (
        ok.groupby(["alpha", "algorithm"])
        .agg(
            error=("error", "median"),
            log_likelihood=("log_likelihood", "median"),
            s_size=("s_size", "median"),
            n=("seed", "count"),
        )
        .reset_index()
    )
    return summary


def median_by_algorithm(rows: pd.DataFrame, alpha: float, algorithm: str) -> float:
    sel = rows[
        (rows["status"] == "processed")
        & np.isclose(rows["alpha"].astype(float), alpha)
        & (rows["algorithm"] == algorithm)
    ]
    return float(sel["error"].median())
