"""
Reading and writing label files, truth files, model documents and traces.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError, ParserError

from app import config
from app.errors import LabelDataError, StagewiseError
from app.stagewise.driver import FitTrace
from app.stagewise.mdpd import MISSING, FrozenCoordinates, LabelMatrix, MixtureModel

logger = logging.getLogger(config.LOGGER_NAME)

FORMATS = ("triplet", "zhou")
LABEL_COLUMNS = ["ITEM", "WORKER", "LABEL"]
TRUTH_COLUMNS = ["ITEM", "LABEL"]

HEADERS_FILE = os.path.join(os.path.dirname(__file__), "column_mapping.json")

with open(HEADERS_FILE, "r", encoding="utf-8") as f:
    HEADERS = json.load(f)

# headerless layouts, e.g. zhou = worker item label
LAYOUTS: Dict[str, List[str]] = HEADERS["layouts"]


@dataclass(frozen=True)
class ModelDocument:
    model: MixtureModel
    informative_set: Tuple[int, ...]
    label_map: Dict[str, int] = field(default_factory=dict)
    worker_ids: Tuple[str, ...] = ()
    fit_config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = config.FORMAT_VERSION


# ---------------------------------------------------------
# Helpers
# ---------------------------------------------------------
def _source_name(source) -> str:
    if isinstance(source, (str, os.PathLike)):
        return str(source)
    return getattr(source, "name", "<upload>")


def natural_key(value: str):
    """Numbers in numeric order, then everything else alphabetically."""
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def header_aliases(kind: str = "labels") -> Dict[str, str]:
    """Folded header spelling -> ITEM / WORKER / LABEL; the truth aliases win for truth files."""
    lookup: Dict[str, str] = {}
    for section in ("labels", kind):
        for column, spellings in HEADERS.get(section, {}).items():
            lookup.update({spelling.lower(): column for spelling in spellings})
    return lookup


def _fold(header) -> str:
    return str(header).replace(" ", "").replace("_", "").replace("-", "").lower()


def _rename_headers(df: pd.DataFrame, kind: str) -> pd.DataFrame:
    lookup = header_aliases(kind)
    renamed: Dict[str, str] = {}
    for col in df.columns:
        target = lookup.get(_fold(col))
        # first header wins when two spell the same column
        if target is not None and target not in renamed.values():
            renamed[col] = target
    return df.rename(columns=renamed)


def _read_table(source, fmt: str, kind: str) -> pd.DataFrame:
    name = _source_name(source)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        if fmt == "triplet":
            df = pd.read_csv(
                source, sep=None, engine="python", dtype=str,
                skipinitialspace=True, keep_default_na=False,
            )
            df = _rename_headers(df, kind)
        elif fmt in LAYOUTS:
            df = pd.read_csv(
                source, sep=r"\s+", header=None,
                names=list(LAYOUTS[fmt]), dtype=str, keep_default_na=False,
            )
        else:
            raise LabelDataError(f"Unknown label format '{fmt}' (known: {FORMATS})")
    except EmptyDataError:
        raise LabelDataError(f"Label file {name} is empty")
    except (ParserError, UnicodeDecodeError, csv.Error) as ex:
        raise LabelDataError(f"Could not parse {name}: {ex}")
    return df


def _clean(
    df: pd.DataFrame, columns: List[str], name: str, optional: Sequence[str] = ()
) -> pd.DataFrame:
    """Strip cells and drop rows with a blank required column; `optional` columns may stay blank."""
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise LabelDataError(
            f"{name}: no column for {missing}; found headers {list(df.columns)}"
        )
    df = df[columns].fillna("").astype(str)
    df = df.apply(lambda col: col.str.strip())
    required = [c for c in columns if c not in optional]
    df = df[(df[required] != "").all(axis=1)]
    if df.empty:
        raise LabelDataError(f"{name} contains no labels")
    return df


def _label_map(labels: pd.Series, known: Optional[Mapping[str, int]], name: str) -> Dict[str, int]:
    if known:
        known = {str(k): int(v) for k, v in known.items()}
        unknown = sorted(set(labels) - set(known), key=natural_key)
        if unknown:
            raise LabelDataError(f"{name}: unknown labels {unknown[:20]}")
        return known
    vocab = sorted(set(labels), key=natural_key)
    if len(vocab) < 2:
        raise LabelDataError(
            f"{name}: only {len(vocab)} distinct label(s); pass a label map with the full alphabet"
        )
    return {lab: idx + 1 for idx, lab in enumerate(vocab)}


# ---------------------------------------------------------
# Label files
# ---------------------------------------------------------
def ingest_labels(
    source, fmt: str = "triplet", label_map: Optional[Mapping[str, int]] = None
) -> LabelMatrix:
    """
    Read (item, worker, label) rows into an N x M matrix; absent pairs are MISSING.

    Items and workers are ordered naturally by id. Duplicated (item, worker)
    pairs keep the last row. A row with a blank label only registers its item
    and worker, so all-missing items and workers survive a round trip.
    """
    if fmt not in FORMATS:
        raise LabelDataError(f"Unknown label format '{fmt}' (known: {FORMATS})")
    name = _source_name(source)
    table = _clean(_read_table(source, fmt, "labels"), LABEL_COLUMNS, name, optional=["LABEL"])
    item_ids = sorted(table["ITEM"].unique(), key=natural_key)
    worker_ids = sorted(table["WORKER"].unique(), key=natural_key)

    df = table[table["LABEL"] != ""]
    if df.empty:
        raise LabelDataError(f"{name} contains no labels")
    dup = df.duplicated(["ITEM", "WORKER"], keep="last")
    if dup.any():
        logger.warning(f"{name}: {int(dup.sum())} duplicated (item, worker) pairs; last one wins")
        df = df[~dup]

    mapping = _label_map(df["LABEL"], label_map, name)
    rows = pd.Index(item_ids).get_indexer(df["ITEM"])
    cols = pd.Index(worker_ids).get_indexer(df["WORKER"])
    entries = np.full((len(item_ids), len(worker_ids)), MISSING, dtype=np.int64)
    entries[rows, cols] = df["LABEL"].map(mapping).to_numpy(dtype=np.int64) - 1

    logger.info(
        f"Loaded {name}: N={len(item_ids)} items, M={len(worker_ids)} workers, "
        f"{len(df)} labels, R={max(mapping.values())}"
    )
    return LabelMatrix(
        entries, max(mapping.values()), tuple(item_ids), tuple(worker_ids), mapping
    )


def _inverse_map(label_map: Optional[Mapping[str, int]]) -> Dict[int, str]:
    return {v: k for k, v in (label_map or {}).items()}


def export_labels(data: LabelMatrix, path: str) -> None:
    """
    Write the observed entries as an item,worker,label file (original label strings).

    Items or workers without any label get one row with a blank label.
    """
    inverse = _inverse_map(data.label_map)
    observed = ~data.missing_mask
    rows, cols = np.nonzero(observed)
    records = [
        (data.item_ids[r], data.worker_ids[c], inverse.get(int(lab), str(lab)))
        for r, c, lab in zip(rows, cols, data.entries[rows, cols] + 1)
    ]
    records += [(data.item_ids[r], data.worker_ids[0], "") for r in np.flatnonzero(~observed.any(axis=1))]
    records += [(data.item_ids[0], data.worker_ids[c], "") for c in np.flatnonzero(~observed.any(axis=0))]
    _ensure_parent(path)
    pd.DataFrame(records, columns=["item", "worker", "label"]).to_csv(path, index=False)


# ---------------------------------------------------------
# Truth / prediction files
# ---------------------------------------------------------
def ingest_truth(source, data: LabelMatrix, fmt: str = "triplet") -> np.ndarray:
    """1-based truth labels in the item order of `data`, through data's label map."""
    name = _source_name(source)
    truth_fmt = "triplet" if fmt == "triplet" else f"{fmt}_truth"
    df = _clean(_read_table(source, truth_fmt, "truth"), TRUTH_COLUMNS, name)
    df = df.drop_duplicates("ITEM", keep="last")

    mapping = data.label_map or {str(r): r for r in range(1, data.n_labels + 1)}
    unknown = sorted(set(df["LABEL"]) - set(mapping), key=natural_key)
    if unknown:
        raise LabelDataError(f"{name}: unknown labels {unknown[:20]}")

    series = df.set_index("ITEM")["LABEL"].map(mapping)
    absent = [item for item in data.item_ids if item not in series.index]
    if absent:
        raise LabelDataError(f"{name}: no truth for {len(absent)} items, e.g. {absent[:5]}")
    return series.reindex(list(data.item_ids)).to_numpy(dtype=np.int64)


def write_item_labels(
    path: str,
    item_ids: Sequence[str],
    labels: Sequence[int],
    label_map: Optional[Mapping[str, int]] = None,
) -> None:
    inverse = _inverse_map(label_map)
    df = pd.DataFrame(
        {"item": list(item_ids), "label": [inverse.get(int(lab), str(int(lab))) for lab in labels]}
    )
    _ensure_parent(path)
    df.to_csv(path, index=False)


# ---------------------------------------------------------
# Model documents
# ---------------------------------------------------------
def save_model(
    path: str,
    model: MixtureModel,
    informative_set: Sequence[int],
    label_map: Optional[Mapping[str, int]] = None,
    worker_ids: Optional[Sequence[str]] = None,
    cfg: Optional[Mapping[str, Any]] = None,
) -> None:
    doc = {
        "format_version": config.FORMAT_VERSION,
        "k": model.n_components,
        "m": model.n_workers,
        "r": model.n_categories,
        "n_labels": model.n_labels,
        "weights": model.weights.tolist(),
        "conditionals": model.conditionals.tolist(),
        "frozen": None
        if model.frozen is None
        else {"mask": model.frozen.mask.tolist(), "values": model.frozen.values.tolist()},
        "informative_set": [int(i) for i in informative_set],
        "label_map": dict(label_map or {}),
        "worker_ids": list(worker_ids or []),
        "config": dict(cfg or {}),
    }
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def load_model(path: str) -> ModelDocument:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as ex:
        raise StagewiseError(f"{path} is not a model document: {ex}")

    required = ("format_version", "weights", "conditionals", "informative_set")
    absent = [key for key in required if key not in doc]
    if absent:
        raise StagewiseError(f"{path} lacks fields {absent}")
    if doc["format_version"] != config.FORMAT_VERSION:
        raise StagewiseError(
            f"{path} has format_version {doc['format_version']}, expected {config.FORMAT_VERSION}"
        )

    frozen = doc.get("frozen")
    model = MixtureModel(
        np.asarray(doc["weights"], dtype=float),
        np.asarray(doc["conditionals"], dtype=float),
        n_labels=doc.get("n_labels"),
        frozen=None
        if frozen is None
        else FrozenCoordinates(np.asarray(frozen["mask"]), np.asarray(frozen["values"])),
    )
    return ModelDocument(
        model=model,
        informative_set=tuple(int(i) for i in doc["informative_set"]),
        label_map={str(k): int(v) for k, v in doc.get("label_map", {}).items()},
        worker_ids=tuple(doc.get("worker_ids", [])),
        fit_config=dict(doc.get("config", {})),
        format_version=doc["format_version"],
    )


# ---------------------------------------------------------
# Traces
# ---------------------------------------------------------
def write_trace(path: str, trace: FitTrace, cfg: Optional[Mapping[str, Any]] = None) -> None:
    """CSV of the trace rows, preceded by '# key=value' metadata lines."""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# format_version={config.FORMAT_VERSION}\n")
        f.write(f"# status={trace.status}\n")
        f.write(f"# initial_log_likelihood={trace.initial_log_likelihood!r}\n")
        if cfg:
            f.write(f"# config={json.dumps(dict(cfg), sort_keys=True)}\n")
        trace.to_frame().to_csv(f, index=False)


def read_trace(path: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    meta: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition("=")
            meta[key] = value
    return pd.read_csv(path, skiprows=len(meta)), meta


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
