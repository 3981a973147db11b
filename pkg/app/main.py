import logging
import os
from typing import Any, Dict

from fastapi import Body, FastAPI, File, HTTPException, Query, UploadFile
from fastapi.responses import HTMLResponse

from app import config
from app.crowdsource_eval import estimate_missing_rates
from app.experiment_service import ALGORITHMS, run_algorithm
from app.label_io import (
    export_labels,
    ingest_labels,
    read_trace,
    save_model,
    write_item_labels,
    write_trace,
)
from app.stagewise.settings import FitConfig
from app.synth_bench import SynthSpec, compute_benchmark, generate

# ---------------------------------------------------------
# Logging setup (global)
# ---------------------------------------------------------
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)
logger = logging.getLogger(config.LOGGER_NAME)

app = FastAPI(
    title="Stagewise EM",
    description="Simulate crowdsourcing data, fit sparse MDPD models and browse fit traces.",
    version="1.0.0",
)

TRACE_SUFFIX = "_trace.csv"


@app.get("/")
def health():
    return {"status": "ok"}


# ---------------------------------------------------------
# 1) Simulate a synthetic dataset
# ---------------------------------------------------------
@app.post("/simulate")
def simulate(payload: Dict[str, Any] = Body(default={})):
    """
    Generate a dataset from SynthSpec fields and write labels, truth and
    truth model under <output>/simulate/<mode>_seed<seed>/.
    """
    try:
        spec = SynthSpec.from_mapping(payload)
    except ValueError as ex:
        raise HTTPException(status_code=400, detail=str(ex))

    logger.info(f"Starting /simulate: {spec.to_dict()}")
    dataset = generate(spec)
    bench = compute_benchmark(dataset.truth_model, dataset.data, dataset.truth_labels)

    out_dir = os.path.join(config.OUTPUT_DIR, "simulate", f"{spec.mode}_seed{spec.seed}")
    export_labels(dataset.data, os.path.join(out_dir, "labels.csv"))
    write_item_labels(os.path.join(out_dir, "truth.csv"), dataset.data.item_ids, dataset.truth_labels)
    informative = [int(i) for i in dataset.informative_workers]
    save_model(
        os.path.join(out_dir, "truth_model.json"),
        dataset.truth_model,
        informative,
        worker_ids=dataset.data.worker_ids,
        cfg={"simulation": spec.to_dict(), "informative_workers": informative},
    )
    return {
        "spec": spec.to_dict(),
        "informative_workers": len(informative),
        "benchmark_log_likelihood": bench.benchmark_ll,
        "benchmark_error": bench.benchmark_error,
        "output_dir": out_dir,
    }


# ---------------------------------------------------------
# 2) Fit an uploaded label file
# ---------------------------------------------------------
@app.post("/fit")
async def fit(
    file: UploadFile = File(...),
    algorithm: str = Query("stagewise"),
    k_target: int = Query(2),
    seed: int = Query(0),
    fmt: str = Query("triplet", alias="format"),
):
    """
    Upload an item,worker,label file and fit it; the model and trace are
    written to the output dir as upload_<algorithm>_*.
    """
    if algorithm not in ALGORITHMS:
        raise HTTPException(status_code=400, detail=f"Unknown algorithm '{algorithm}'")
    logger.info(f"Received upload for /fit: {file.filename} ({algorithm}, K={k_target})")
    content = await file.read()

    try:
        cfg = FitConfig(k_target=k_target, seed=seed)
        data = ingest_labels(content, fmt)
        policy = estimate_missing_rates(data)
        outcome = run_algorithm(algorithm, policy.data, cfg, policy.frozen)
    except ValueError as ex:
        raise HTTPException(status_code=400, detail=str(ex))

    name = f"upload_{algorithm}"
    effective = {"algorithm": algorithm, "fit": cfg.to_dict(), "source": file.filename}
    save_model(
        os.path.join(config.OUTPUT_DIR, f"{name}_model.json"),
        outcome.model,
        outcome.informative_set,
        data.label_map,
        policy.data.worker_ids,
        effective,
    )
    write_trace(os.path.join(config.OUTPUT_DIR, f"{name}{TRACE_SUFFIX}"), outcome.trace, effective)

    return {
        "file": file.filename,
        "algorithm": algorithm,
        "status": outcome.trace.status,
        "iterations": len(outcome.trace),
        "log_likelihood": outcome.trace.last.log_likelihood,
        "k": outcome.model.n_components,
        "s_size": len(outcome.informative_set),
        "informative_workers": [policy.data.worker_ids[i] for i in outcome.informative_set],
        "trace": f"{name}{TRACE_SUFFIX}",
    }


# ---------------------------------------------------------
# 3) Dashboard: list fit traces
# ---------------------------------------------------------
@app.get("/runs", response_class=HTMLResponse)
def list_runs():
    """
    Simple HTML dashboard listing all trace files in the output dir.
    """
    output_dir = config.OUTPUT_DIR
    os.makedirs(output_dir, exist_ok=True)

    files = sorted(f for f in os.listdir(output_dir) if f.endswith(TRACE_SUFFIX))

    rows = "".join(f'<tr><td><a href="/runs/{f}">{f}</a></td></tr>' for f in files)
    html = f"""
    <html>
      <head><title>Fit Traces</title></head>
      <body>
        <h1>Fit Traces</h1>
        <table border="1" cellpadding="5" cellspacing="0">
          <tr><th>File</th></tr>
          {rows}
        </table>
      </body>
    </html>
    """
    return html


# ---------------------------------------------------------
# 4) Dashboard: view one trace as HTML table
# ---------------------------------------------------------
@app.get("/runs/{file_name}", response_class=HTMLResponse)
def view_run(file_name: str):
    full_path = os.path.join(config.OUTPUT_DIR, file_name)

    if os.path.basename(file_name) != file_name or not os.path.isfile(full_path):
        raise HTTPException(status_code=404, detail="File not found")

    df, meta = read_trace(full_path)
    table_html = df.to_html(index=False, na_rep="")
    meta_html = "".join(f"<li><b>{k}</b>: {v}</li>" for k, v in meta.items())

    html = f"""
    <html>
      <head>
        <title>View: {file_name}</title>
        <style>
            table {{ border-collapse: collapse; width: 100%; }}
            th, td {{ border: 1px solid #ccc; padding: 4px; font-size: 12px; }}
            th {{ background-color: #eee; }}
        </style>
      </head>
      <body>
        <h1>{file_name}</h1>
        <ul>{meta_html}</ul>
        {table_html}
      </body>
    </html>
    """
    return html
