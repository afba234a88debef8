"""Run a scenario and write its CSVs, final state and manifest."""

from __future__ import annotations

import os
import time

import numpy as np

from .. import __version__
from ..core import save_state
from .config import ExperimentConfig
from .output import ensure_dir, write_csv, write_manifest
from .scenarios import (
    SCENARIO_RUNNERS,
    ActiveResult,
    ContinualResult,
    HelmholtzResult,
    OutlierResult,
    StreamResult,
    TuningResult,
    verify_active_log,
)

GRID_COLUMNS = ["x", "u_exact", "u_mean", "u_band", "f_exact", "f_mean", "f_band"]
ERROR_COLUMNS = ["n_data", "u_error_pct", "f_error_pct", "u_band_mean", "f_band_mean"]


def _grid_rows(rep):
    g = rep.grid
    return zip(g.points, rep.u_exact, g.u_mean, g.u_band, rep.f_exact, g.f_mean, g.f_band)


def _write_reports(out, header, reports, prefix="grid"):
    files = []
    for rep in reports:
        name = f"{prefix}_{rep.label}.csv"
        write_csv(os.path.join(out, name), {**header, "n_data": rep.n_data}, GRID_COLUMNS, _grid_rows(rep))
        files.append(name)
    rows = [(r.n_data, r.u_error, r.f_error, r.u_band_mean, r.f_band_mean) for r in reports]
    write_csv(os.path.join(out, "errors.csv"), header, ERROR_COLUMNS, rows)
    return files + ["errors.csv"]


def _write_trace(out, header, trace):
    write_csv(os.path.join(out, "band_trace.csv"), header, ["n_data", "u_band_mean"], trace)
    return ["band_trace.csv"]


def _final_errors(reports) -> dict:
    if not reports:
        return {}
    return {"u_error_pct": reports[-1].u_error, "f_error_pct": reports[-1].f_error}


def _write_continual(out, header, res: ContinualResult, summary):
    summary["final_errors"] = _final_errors(res.checkpoints)
    summary["checkpoint_errors"] = [
        {"n_data": r.n_data, "u_error_pct": r.u_error, "f_error_pct": r.f_error} for r in res.checkpoints]
    summary["n_blocks"] = res.n_blocks
    return _write_reports(out, header, res.checkpoints) + _write_trace(out, header, res.band_trace)


def _write_stream(out, header, res: StreamResult, summary):
    files = _write_continual(out, header, res, summary)
    summary["oracle_checkpoint"] = res.checkpoints[0].n_data if res.checkpoints else 0
    return files


def _write_tuning(out, header, res: TuningResult, summary):
    cols = ["branch", "segment", "step", "sigma", "validation_error_pct"]
    cols += [f"u_at_{s:g}" for s in res.slices]
    write_csv(os.path.join(out, "sigma_flow.csv"), header, cols, res.rows)
    node_rows = [(s, d) for s, d in sorted(res.nodes.items())]
    write_csv(os.path.join(out, "sigma_nodes.csv"), header, ["sigma", "oracle_discrepancy"], node_rows)
    write_csv(os.path.join(out, "validation.csv"), header, ["tau", "f_measured"],
              zip(res.validation_tau, res.validation_y))
    summary["node_discrepancy"] = {format(s, "g"): d for s, d in res.nodes.items()}
    summary["segment_h"] = res.segment_h
    last = res.rows[-1]
    summary["final_errors"] = {"sigma": last[3], "validation_error_pct": last[4]}
    return ["sigma_flow.csv", "sigma_nodes.csv", "validation.csv"]


def _write_outlier(out, header, res: OutlierResult, summary):
    summary["final_errors"] = _final_errors(res.reports)
    summary["errors"] = {r.label: {"u_error_pct": r.u_error, "f_error_pct": r.f_error} for r in res.reports}
    summary["outlier_indices"] = list(res.outlier_indices)
    summary["order_discrepancy"] = res.order_discrepancy
    return _write_reports(out, header, res.reports)


def _write_active(out, header, res: ActiveResult, summary):
    cols = ["iteration", "index", "location", "band_before", "band_after", "measurement",
            "u_error_pct", "f_error_pct"]
    write_csv(os.path.join(out, "sensors.csv"), header, cols, res.log)
    snap_rows = []
    for it, snap in enumerate(res.snapshots, start=1):
        for j, (loc, band) in enumerate(zip(res.candidates, snap)):
            if not np.isnan(band):
                snap_rows.append((it, j, loc, band))
    write_csv(os.path.join(out, "band_snapshots.csv"), header,
              ["iteration", "index", "location", "f_band"], snap_rows)
    summary["stop_reason"] = res.stop_reason
    summary["n_sensors"] = len(res.log)
    summary["log_check_failures"] = verify_active_log(res)
    summary["final_errors"] = _final_errors(res.reports)
    return ["sensors.csv", "band_snapshots.csv"]


def _write_helmholtz(out, header, res: HelmholtzResult, summary, fields):
    cols = ["step", "row", "col", "m", "u_error_pct", "f_error_pct", "u_band_mean"]
    write_csv(os.path.join(out, "subdomain_steps.csv"), header, cols, res.steps)
    last = res.steps[-1]
    summary["final_errors"] = {"u_error_pct": last[4], "f_error_pct": last[5]}
    summary["traversal"] = res.traversal
    summary["grid_size"] = res.grid_size
    summary["subdomains"] = res.subdomains
    if res.order_discrepancy is not None:
        summary["order_discrepancy"] = res.order_discrepancy
        summary["compared_with"] = res.other_traversal
    return ["subdomain_steps.csv"] + fields


def run_scenario(config: ExperimentConfig, out_dir) -> dict:
    """Run ``config.scenario``, write every output into ``out_dir``, return the manifest."""
    out = ensure_dir(out_dir)
    header = config.header()
    start = time.perf_counter()
    summary: dict = {}
    runner = SCENARIO_RUNNERS[config.scenario]

    if config.scenario in ("3a", "3b"):
        fields: list[str] = []

        def on_field(step, r, c, X, Y, err):
            name = f"error_field_step{step:03d}.csv"
            write_csv(os.path.join(out, name), {**header, "step": step, "cell": f"{r},{c}"},
                      ["x", "y", "abs_error_u"], zip(X.ravel(), Y.ravel(), err.ravel()))
            fields.append(name)

        res = runner(config, on_field=on_field)
        files = _write_helmholtz(out, header, res, summary, fields)
    else:
        res = runner(config)
        writer = {
            ContinualResult: _write_continual,
            StreamResult: _write_stream,
            TuningResult: _write_tuning,
            OutlierResult: _write_outlier,
            ActiveResult: _write_active,
        }[type(res)]
        files = writer(out, header, res, summary)

    save_state(res.final_state, os.path.join(out, "final_state.txt"), header)
    files.append("final_state.txt")
    manifest = {
        **header,
        "version": __version__,
        "step_policy": "fixed" if config.step.fixed else "staged",
        "paper_scale": config.paper_scale,
        "scale": config.scale,
        "config": config.raw,
        "wall_time_s": time.perf_counter() - start,
        "oracle_discrepancy": res.oracle_discrepancy,
        "files": files,
        **summary,
    }
    write_manifest(os.path.join(out, "manifest.json"), manifest)
    return manifest
