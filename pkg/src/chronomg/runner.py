"""Solve a :class:`RunConfig`, write its artifacts, and time it across worker counts."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .config import (RunConfig, build_cycle, build_forcing, build_hierarchy, build_model,
                     emit_config, lyapunov_time)
from .mgrit import REPORT_SCHEMA_VERSION, MGRITSolver, SolveReport

log = logging.getLogger(__name__)

EXIT_CODES = {"converged": 0, "stalled": 2, "diverged": 3}
USAGE_ERROR = 1


@dataclass
class Problem:
    cfg: RunConfig
    model: object
    hier: object
    g: np.ndarray

    @property
    def grid(self):
        return self.hier.grid


def setup(cfg: RunConfig) -> Problem:
    cfg.validate()
    model = build_model(cfg)
    hier = build_hierarchy(cfg, model)
    return Problem(cfg, model, hier, build_forcing(cfg, model))


def solve(cfg: RunConfig, workers: int | None = None, callback=None,
          problem: Problem | None = None) -> tuple[SolveReport, Problem]:
    """Run MGRIT for ``cfg``; ``workers`` overrides the configured count."""
    prob = problem or setup(cfg)
    solver = MGRITSolver(prob.hier, build_cycle(cfg, workers))
    report = solver.solve(prob.g, callback=callback)
    T_l = lyapunov_time(cfg, prob.model)
    if T_l:
        report.kappa = 10.0 ** (prob.grid.t_final / T_l)
    report.config = {"ini": emit_config(cfg)}
    return report, prob


def sequential_seconds(prob: Problem) -> float:
    """Wall time of plain time marching with the fine stepper."""
    g = np.ascontiguousarray(prob.g)
    u = np.empty_like(g)
    u[0] = g[0]
    phi = np.empty((1, g.shape[1]))
    t0 = time.perf_counter()
    kernels.propagate(prob.hier.levels[0].stepper, prob.grid, u, g, [0], prob.grid.n_steps,
                      True, phi)
    return time.perf_counter() - t0


def write_manifest(path, **entries) -> None:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "backend": kernels.backend()}
    doc.update(entries)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=str)


def write_rows(path, header, rows) -> None:
    """Headered CSV; floats keep full precision."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in row])


def write_report(report: SolveReport, out: Path, stem: str) -> list[str]:
    """Residual CSV, JSON report and, if present, the LE estimates."""
    out.mkdir(parents=True, exist_ok=True)
    files = [f"{stem}_residuals.csv", f"{stem}_report.json"]
    report.to_csv(out / files[0])
    report.to_json(out / files[1])
    if report.lyapunov_estimates is not None:
        files.append(f"{stem}_exponents.csv")
        write_rows(out / files[-1], ["j", "lambda"],
                   [(j + 1, float(v)) for j, v in enumerate(report.lyapunov_estimates)])
    return files


def run(cfg: RunConfig, out=None, workers: int | None = None) -> int:
    """Solve one configuration and write its artifacts; returns the exit code."""
    report, _ = solve(cfg, workers)
    out = Path(out or cfg.out or "chronomg-out")
    files = write_report(report, out, cfg.name)
    (out / f"{cfg.name}.ini").write_text(emit_config(cfg))
    write_manifest(out / "manifest.json", kind="run", config=emit_config(cfg),
                   workers=report.workers, files=files + [f"{cfg.name}.ini"])
    log.info("%s: %s after %d iterations (residual %.3e)", cfg.name, report.status,
             report.iterations, report.final_residual)
    return EXIT_CODES[report.status]


def scaling_harness(cfg: RunConfig, worker_list, mode: str = "strong") -> list[dict]:
    """Wall time per worker count.

    ``strong`` keeps the problem fixed; ``weak`` multiplies ``n_t`` by the
    worker count so the number of time points per worker stays fixed.  The
    first row is the serial baseline.
    """
    if mode not in ("strong", "weak"):
        raise ValueError("mode must be strong or weak")
    worker_list = sorted({1, *[int(w) for w in worker_list]})
    rows = []
    base = None
    ref_hist = None
    for w in worker_list:
        c = cfg.replace(n_t=cfg.n_t * w) if mode == "weak" else cfg
        t0 = time.perf_counter()
        report, _ = solve(c, workers=w)
        wall = time.perf_counter() - t0
        if base is None:
            base, ref_hist = wall, report.residuals
        rows.append({
            "workers": w, "n_t": c.n_t, "wall_s": wall, "iterations": report.iterations,
            "status": report.status, "speedup": base / wall if w > 1 else 1.0,
            "identical": (report.residuals == ref_hist) if mode == "strong" else "",
        })
    return rows


def default_workers() -> int:
    """``CHRONOMG_WORKERS`` or 1."""
    raw = os.environ.get("CHRONOMG_WORKERS", "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        log.warning("ignoring CHRONOMG_WORKERS=%r", raw)
        return 1
