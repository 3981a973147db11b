"""
Command-line front end.

    python -m app simulate --mode decaying --m 100 --n 1000 --k 3 --seed 7
    python -m app fit stagewise --data output/simulate/labels.csv --k-target 3
    python -m app eval --model output/stagewise_model.json --data labels.csv --truth truth.csv
    python -m app grid --config experiments/alpha_sweep.env

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from app import config
from app.crowdsource_eval import (
    MATCHINGS,
    estimate_missing_rates,
    predict,
    prediction_error,
    prediction_set,
)
from app.errors import LabelDataError, StagewiseError
from app.experiment_service import (
    ALGORITHMS,
    load_grid_config,
    run_algorithm,
    run_grid,
    summarize_grid,
)
from app.label_io import (
    FORMATS,
    ModelDocument,
    export_labels,
    ingest_labels,
    ingest_truth,
    load_model,
    save_model,
    write_item_labels,
    write_trace,
)
from app.stagewise.info_criterion import (
    cmi_tensor,
    max_cmi_norm,
    penalized_log_likelihood,
    sparsity_diagnostic,
)
from app.stagewise.mdpd import LabelMatrix, log_likelihood, posterior
from app.stagewise.settings import TRIPLET_SCORES, FitConfig
from app.synth_bench import MODES, SynthSpec, compute_benchmark, generate

logger = logging.getLogger(config.LOGGER_NAME)


class UsageError(Exception):
    """Bad flag values detected after parsing; exits with code 2."""


# ---------------------------------------------------------
# Helpers
# ---------------------------------------------------------
def _options(config_file: Optional[str], flags: Mapping[str, Any]) -> Dict[str, Any]:
    """Key-value config file first, explicit flags on top."""
    values: Dict[str, Any] = {}
    if config_file:
        if not os.path.isfile(config_file):
            raise UsageError(f"Config file not found: {config_file}")
        values.update({k.lower(): v for k, v in dotenv_values(config_file).items() if v is not None})
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _build(kind, values: Mapping[str, Any]):
    try:
        return kind.from_mapping(values)
    except ValueError as ex:
        raise UsageError(str(ex))


def _emit(report: Dict[str, Any], out: Optional[str] = None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        parent = os.path.dirname(out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def _data_for_model(doc: ModelDocument, path: str, fmt: str) -> LabelMatrix:
    """Ingest with the model's label map and put the columns in the model's worker order."""
    data = ingest_labels(path, fmt, doc.label_map or None)
    if not doc.worker_ids:
        return data
    index = {w: i for i, w in enumerate(data.worker_ids)}
    absent = [w for w in doc.worker_ids if w not in index]
    if absent:
        raise LabelDataError(f"{path} has no labels from model workers {absent[:10]}")
    return data.select_workers([index[w] for w in doc.worker_ids])


def _prediction_workers(doc: ModelDocument, data: LabelMatrix):
    level = float(doc.fit_config.get("fit", {}).get("null_level", config.NULL_LEVEL))
    return prediction_set(doc.model, doc.informative_set, data.n_items, level)


# ---------------------------------------------------------
# Commands
# ---------------------------------------------------------
def cmd_simulate(args: argparse.Namespace) -> int:
    flags = {
        "mode": args.mode,
        "n_workers": args.m,
        "n_items": args.n,
        "n_classes": args.k,
        "alpha": args.alpha,
        "p": args.p,
        "n_informative": args.n_informative,
        "p_start": args.p_start,
        "p_end": args.p_end,
        "seed": args.seed,
    }
    spec = _build(SynthSpec, _options(args.config, flags))
    dataset = generate(spec)
    bench = compute_benchmark(dataset.truth_model, dataset.data, dataset.truth_labels)

    out_dir = args.out_dir
    labels_path = os.path.join(out_dir, "labels.csv")
    truth_path = os.path.join(out_dir, "truth.csv")
    model_path = os.path.join(out_dir, "truth_model.json")
    export_labels(dataset.data, labels_path)
    write_item_labels(truth_path, dataset.data.item_ids, dataset.truth_labels)
    informative = [int(i) for i in dataset.informative_workers]
    save_model(
        model_path,
        dataset.truth_model,
        informative,
        worker_ids=dataset.data.worker_ids,
        cfg={"simulation": spec.to_dict(), "informative_workers": informative},
    )

    _emit(
        {
            "format_version": config.FORMAT_VERSION,
            "spec": spec.to_dict(),
            "informative_workers": len(informative),
            "benchmark_log_likelihood": bench.benchmark_ll,
            "benchmark_max_cmi": bench.benchmark_max_cmi,
            "benchmark_error": bench.benchmark_error,
            "labels": labels_path,
            "truth": truth_path,
            "truth_model": model_path,
        }
    )
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    flags = {
        "k_target": args.k_target,
        "seed": args.seed,
        "max_iters": args.max_iters,
        "tau_cmi": args.tau_cmi,
        "tau_ll": args.tau_ll,
        "triplet_score": args.triplet_score,
        "split_when_in_s": args.split_when_in_s,
    }
    cfg = _build(FitConfig, _options(args.config, flags))
    if args.from_model and args.algorithm != "refine":
        raise UsageError("--from is only valid with the refine algorithm")

    if args.from_model:
        # the start model fixes the alphabet, the worker order and the missing rates
        doc = load_model(args.from_model)
        data = _data_for_model(doc, args.data, args.format)
        fit_data, frozen, dropped = data, doc.model.frozen, []
        start = doc.model
        label_map = doc.label_map or data.label_map
    else:
        data = ingest_labels(args.data, args.format)
        policy = estimate_missing_rates(data)
        fit_data, frozen = policy.data, policy.frozen
        dropped = [data.worker_ids[i] for i in policy.dropped_workers]
        start = None
        label_map = data.label_map
    outcome = run_algorithm(args.algorithm, fit_data, cfg, frozen, start)

    name = args.name or args.algorithm
    model_path = os.path.join(args.out_dir, f"{name}_model.json")
    trace_path = os.path.join(args.out_dir, f"{name}_trace.csv")
    effective = {"algorithm": args.algorithm, "fit": cfg.to_dict()}
    save_model(
        model_path,
        outcome.model,
        outcome.informative_set,
        label_map,
        fit_data.worker_ids,
        effective,
    )
    write_trace(trace_path, outcome.trace, effective)

    _emit(
        {
            "format_version": config.FORMAT_VERSION,
            "algorithm": args.algorithm,
            "status": outcome.trace.status,
            "iterations": len(outcome.trace),
            "initial_log_likelihood": outcome.trace.initial_log_likelihood,
            "log_likelihood": outcome.trace.last.log_likelihood,
            "k": outcome.model.n_components,
            "s_size": len(outcome.informative_set),
            "informative_workers": [fit_data.worker_ids[i] for i in outcome.informative_set],
            "dropped_workers": dropped,
            "config": effective,
            "model": model_path,
            "trace": trace_path,
        }
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    doc = load_model(args.model)
    data = _data_for_model(doc, args.data, args.format)
    labels = predict(doc.model, data, _prediction_workers(doc, data))
    write_item_labels(args.out, data.item_ids, labels, doc.label_map)
    logger.info(f"Wrote {len(labels)} predictions to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    doc = load_model(args.model)
    model = doc.model
    data = _data_for_model(doc, args.data, args.format)
    smoothing = float(doc.fit_config.get("fit", {}).get("smoothing", config.SMOOTHING))

    post = posterior(model, data, doc.informative_set)
    sparsity = sparsity_diagnostic(model, args.tau0, args.lam)
    report: Dict[str, Any] = {
        "format_version": config.FORMAT_VERSION,
        "n_items": data.n_items,
        "n_workers": data.n_workers,
        "k": model.n_components,
        "log_likelihood": log_likelihood(model, data),
        "max_cmi": max_cmi_norm(cmi_tensor(data, post, smoothing)),
        "s_size": len(doc.informative_set),
        "sparsity": {
            "l0_count": sparsity.l0_count,
            "lam": sparsity.lam,
            "tau0": sparsity.tau0,
            "penalized_log_likelihood": penalized_log_likelihood(model, data, args.lam, args.tau0),
        },
    }
    if args.truth:
        truth = ingest_truth(args.truth, data, args.format)
        pred = predict(model, data, _prediction_workers(doc, data))
        report["matching"] = args.matching
        report["error"] = prediction_error(pred, truth, args.matching, model.n_labels)

    _emit(report, args.out)
    return 0


def cmd_cmi(args: argparse.Namespace) -> int:
    """Aggregate pairwise CMI matrix under the model's regularized posterior."""
    doc = load_model(args.model)
    data = _data_for_model(doc, args.data, args.format)
    post = posterior(doc.model, data, doc.informative_set)
    matrix = cmi_tensor(data, post).aggregate

    workers = list(range(data.n_workers))
    if args.restrict_to_s:
        workers = sorted(doc.informative_set)
    ids = [data.worker_ids[i] for i in workers]
    df = pd.DataFrame(matrix[np.ix_(workers, workers)], index=ids, columns=ids)
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    df.to_csv(args.out, index_label="worker")
    logger.info(f"Wrote {len(ids)}x{len(ids)} CMI matrix to {args.out}")
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    if not os.path.isfile(args.config):
        raise UsageError(f"Config file not found: {args.config}")
    settings = load_grid_config(args.config)
    try:
        rows = run_grid(settings, args.workers)
    except (ValueError, StagewiseError) as ex:
        raise UsageError(str(ex))

    summary = summarize_grid(rows)
    os.makedirs(args.out_dir, exist_ok=True)
    rows.to_csv(os.path.join(args.out_dir, "grid_rows.csv"), index=False)
    summary.to_csv(os.path.join(args.out_dir, "grid_summary.csv"), index=False)
    print(summary.to_string(index=False))
    failed = int((rows["status"] == "error").sum())
    return 1 if failed else 0


# ---------------------------------------------------------
# Parser
# ---------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagewise-em", description="Stagewise EM for sparse clustering of label data"
    )
    parser.add_argument("--log-level", default=config.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic crowdsourcing dataset")
    sim.add_argument("--mode", required=True, choices=MODES)
    sim.add_argument("--m", type=int, help="number of workers")
    sim.add_argument("--n", type=int, help="number of items")
    sim.add_argument("--k", type=int, help="number of classes")
    sim.add_argument("--alpha", type=float)
    sim.add_argument("--p", type=float)
    sim.add_argument("--n-informative", type=int)
    sim.add_argument("--p-start", type=float)
    sim.add_argument("--p-end", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--config", help="KEY=value file with SynthSpec fields")
    sim.add_argument("--out-dir", default=os.path.join(config.OUTPUT_DIR, "simulate"))
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit a model to a label file")
    fit.add_argument("algorithm", choices=ALGORITHMS)
    fit.add_argument("--data", required=True)
    fit.add_argument("--format", default="triplet", choices=FORMATS)
    fit.add_argument("--k-target", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--max-iters", type=int)
    fit.add_argument("--tau-cmi", type=float)
    fit.add_argument("--tau-ll", type=float)
    fit.add_argument("--triplet-score", choices=TRIPLET_SCORES)
    fit.add_argument("--split-when-in-s", action=argparse.BooleanOptionalAction)
    fit.add_argument("--from", dest="from_model", help="model file to refine")
    fit.add_argument("--config", help="KEY=value file with FitConfig fields")
    fit.add_argument("--name", help="artifact prefix (default: algorithm)")
    fit.add_argument("--out-dir", default=config.OUTPUT_DIR)
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="write per-item labels")
    pred.add_argument("--model", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--format", default="triplet", choices=FORMATS)
    pred.add_argument("--out", required=True)
    pred.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="report LL, CMI, sparsity and error")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--truth")
    ev.add_argument("--format", default="triplet", choices=FORMATS)
    ev.add_argument("--matching", default="aligned", choices=MATCHINGS)
    ev.add_argument("--lam", type=float, default=0.0)
    ev.add_argument("--tau0", type=float, default=1e-6)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    cmi = sub.add_parser("cmi", help="export the pairwise CMI matrix")
    cmi.add_argument("--model", required=True)
    cmi.add_argument("--data", required=True)
    cmi.add_argument("--format", default="triplet", choices=FORMATS)
    cmi.add_argument("--restrict-to-s", action="store_true")
    cmi.add_argument("--out", required=True)
    cmi.set_defaults(func=cmd_cmi)

    grid = sub.add_parser("grid", help="run an alpha x seed experiment grid")
    grid.add_argument("--config", required=True)
    grid.add_argument("--workers", type=int)
    grid.add_argument("--out-dir", default=os.path.join(config.OUTPUT_DIR, "grid"))
    grid.set_defaults(func=cmd_grid)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return int(ex.code or 0)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except UsageError as ex:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {ex}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as ex:
        logger.error(f"{args.command} failed: {ex}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
