"""Experiment presets: the Lorenz tables and figures and the KS scaling studies.

Each preset has a full-size variant and a ``desk`` variant that fits a
workstation.  Reductions applied by ``desk``:

==============  =============================================================
table1          n_t in {512, 1024, 2048} instead of up to 8192
table2          T_f in {2, 4, 6, 8} instead of up to 12
table3          T_f in {2, 4}
fig2, fig4      unchanged (two-level Lorenz is cheap)
fig3            T_f = 4 with n_t = 8192 instead of T_f = 8, n_t = 16384
fig5-lyap       500 time units per step size instead of 5000
ks-weak         (n_x, n_t) in {(64, 1024), (128, 4096)} at T_f = 1, 3 levels
ks-strong-4Tl   n_x = 64, n_t = 1024, T_f = 1, 3 levels (m = 16, 4)
ks-strong-8Tl   n_x = 64, n_t = 2048, T_f = 2, 3 levels (m = 16, 4)
ks-rank-sweep   n_x = 64, n_t = 1024, T_f = 1, ranks {1, 3, 6, 9, 12}
==============  =============================================================

Table cells hold the iteration count, ``-`` for a stall (no convergence within
``max_iter``) and ``*`` for divergence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, build_model, emit_config
from .core import block_residual, sequential_solve
from .lyapunov import backward_lv_path, manifold_errors, qr_iterate
from .runner import scaling_harness, sequential_seconds, setup, solve, write_report, write_rows
from .steppers import ThetaEuler, backward_euler, forward_euler, theta_for_euler

log = logging.getLogger(__name__)

LORENZ_ALGOS = {
    "MGRIT": {},
    "MGRIT+theta": {"theta": True},
    "MGRIT+Delta": {"delta": "full"},
    "MGRIT+Delta+theta": {"theta": True, "delta": "full"},
}


@dataclass
class Context:
    out: Path
    desk: bool = False
    workers: int = 1
    overrides: dict = field(default_factory=dict)
    worker_list: list = field(default_factory=lambda: [1, 2, 4, 8])
    runs: list = field(default_factory=list)
    files: list = field(default_factory=list)

    def config(self, **kw) -> RunConfig:
        kw.update(self.overrides)
        kw.setdefault("workers", self.workers)
        return RunConfig(**kw).validate()

    def solve(self, label: str, cfg: RunConfig, callback=None):
        cfg = cfg.replace(name=label)
        report, prob = solve(cfg, callback=callback)
        self.runs.append({"label": label, "status": report.status,
                          "iterations": report.iterations, "ini": emit_config(cfg)})
        self.files += [f"runs/{f}" for f in write_report(report, self.out / "runs", label)]
        log.info("%-40s %-9s %3d  %.3e", label, report.status, report.iterations,
                 report.final_residual)
        return report, prob

    def table(self, name: str, header, rows) -> None:
        write_rows(self.out / name, header, rows)
        self.files.append(name)


def cell(report) -> str:
    if report.status == "converged":
        return str(report.iterations)
    return "-" if report.status == "stalled" else "*"


# ---------------------------------------------------------------------------
# Lorenz


def _lorenz(**kw) -> dict:
    base = dict(problem="lorenz", coarsening=[2], tol=1e-10, max_iter=100,
                initial_guess="zero", relaxation="F", cycle="V")
    base.update(kw)
    return base


def table1(ctx: Context) -> None:
    nts = [512, 1024, 2048] if ctx.desk else [512, 1024, 2048, 4096, 8192]
    rows = []
    for algo, opts in LORENZ_ALGOS.items():
        row = [algo]
        for nt in nts:
            rep, _ = ctx.solve(f"table1_{algo}_nt{nt}", ctx.config(**_lorenz(t_final=4, n_t=nt, **opts)))
            row.append(cell(rep))
        rows.append(row)
    ctx.table("table1.csv", ["algorithm"] + [f"Tf=4 nt={nt}" for nt in nts], rows)


def table2(ctx: Context) -> None:
    tfs = [2, 4, 6, 8] if ctx.desk else [2, 4, 6, 8, 10, 12]
    rows = []
    for algo, opts in LORENZ_ALGOS.items():
        row = [algo]
        for tf in tfs:
            rep, _ = ctx.solve(f"table2_{algo}_Tf{tf}",
                               ctx.config(**_lorenz(t_final=tf, n_t=2048 * tf, **opts)))
            row.append(cell(rep))
        rows.append(row)
    ctx.table("table2.csv", ["algorithm"] + [f"Tf={tf} nt={2048 * tf}" for tf in tfs], rows)


def table3(ctx: Context) -> None:
    tfs = [2, 4] if ctx.desk else [2, 4, 6, 8]
    rows = []
    for algo, opts in LORENZ_ALGOS.items():
        for nl in (2, 3, 5, 7):
            row = [algo, nl]
            for tf in tfs:
                rep, _ = ctx.solve(f"table3_{algo}_L{nl}_Tf{tf}",
                                   ctx.config(**_lorenz(t_final=tf, n_t=2048 * tf, levels=nl, **opts)))
                row.append(cell(rep))
            rows.append(row)
    ctx.table("table3.csv", ["algorithm", "levels"] + [f"Tf={tf} nt={2048 * tf}" for tf in tfs], rows)


def _binned(values, n_bins: int = 1024):
    """Maximum over contiguous blocks, keeping at most ``n_bins`` samples."""
    stride = max(1, -(-len(values) // n_bins))
    idx = np.arange(0, len(values), stride)
    return idx, np.maximum.reduceat(values, idx)


def fig2(ctx: Context) -> None:
    """Residual over the time domain per iteration (30 two-level iterations)."""
    rows = []
    hist = {}
    for algo in ("MGRIT", "MGRIT+Delta+theta"):
        cfg = ctx.config(**_lorenz(t_final=8, n_t=16384, max_iter=30, **LORENZ_ALGOS[algo]))
        T_l = build_model(cfg).lyapunov_time

        def grab(it, solver, algo=algo):
            fine = solver.levels[0]
            r, _ = block_residual(fine.u, fine.prop, fine.g, fine.grid)
            idx, peak = _binned(np.linalg.norm(r, axis=1))
            for i, v in zip(idx, peak):
                rows.append((algo, it, fine.grid.time(int(i)) / T_l, float(v)))

        rep, _ = ctx.solve(f"fig2_{algo}", cfg, callback=grab)
        hist[algo] = rep.residuals
    ctx.table("fig2_residual_time.csv", ["algorithm", "iter", "t_lyapunov", "residual"], rows)
    _histories(ctx, "fig2_histories.csv", hist)


def _histories(ctx: Context, name: str, hist: dict) -> None:
    n = max(len(h) for h in hist.values())
    rows = [[k] + [h[k] if k < len(h) else "" for h in hist.values()] for k in range(n)]
    ctx.table(name, ["iter"] + list(hist), rows)


def fig3(ctx: Context) -> None:
    """Residual and relative error along the unstable, neutral and stable LVs."""
    tf, nt = (4, 8192) if ctx.desk else (8, 16384)
    rows = []
    for algo in ("MGRIT", "MGRIT+Delta"):
        cfg = ctx.config(**_lorenz(t_final=tf, n_t=nt, max_iter=30, **LORENZ_ALGOS[algo]))
        prob = setup(cfg)
        fine = prob.hier.levels[0].stepper
        exact = sequential_solve(fine, prob.g, prob.grid)
        bases = backward_lv_path(fine, exact, np.eye(3), prob.grid.h)
        scale = float(np.linalg.norm(exact))

        def grab(it, solver, algo=algo):
            u = solver.levels[0].u
            e = manifold_errors(u - exact, bases, scale)
            rows.append((algo, it, solver.residual(), *map(float, e)))

        ctx.solve(f"fig3_{algo}", cfg, callback=grab)
    ctx.table("fig3_decomposition.csv", ["algorithm", "iter", "residual", "e_u", "e_n", "e_s"], rows)


def fig4(ctx: Context) -> None:
    hist = {}
    for algo, opts in LORENZ_ALGOS.items():
        rep, _ = ctx.solve(f"fig4_{algo}", ctx.config(**_lorenz(t_final=8, n_t=8192, **opts)))
        hist[algo] = rep.residuals
    _histories(ctx, "fig4_histories.csv", hist)


def fig5_lyap(ctx: Context) -> None:
    """Greatest LE against step size for forward Euler, backward Euler and theta."""
    T = 500.0 if ctx.desk else 5000.0
    cfg = ctx.config(problem="lorenz", t_final=T, units="absolute", n_t=1, levels=1)
    model = build_model(cfg)
    x0 = model.initial_condition()
    rows = []
    for m in (1, 2, 4, 8, 16):
        h = 1e-3 * m
        n = int(round(T / h))
        lam = []
        for st in (forward_euler(model), backward_euler(model), ThetaEuler(model, theta_for_euler(m))):
            _, est = qr_iterate(st, x0, np.eye(3)[:, :1], h=h, n_steps=n)
            lam.append(float(est.exponents[0]))
        rows.append((h, *lam))
        log.info("h=%g lambda_1: FE %.4f  BE %.4f  theta %.4f", h, *lam)
    ctx.runs.append({"label": "fig5-lyap", "window": T})
    ctx.table("fig5_lyapunov.csv", ["h", "forward_euler", "backward_euler", "theta"], rows)


# ---------------------------------------------------------------------------
# Kuramoto-Sivashinsky


def _ks(**kw) -> dict:
    base = dict(problem="ks", relaxation="FCF", cycle="V", tol=1e-8, max_iter=100,
                initial_guess="coarse-sequential-interpolated", coarsening=[16, 4])
    base.update(kw)
    return base


def ks_algos(levels_naive: int, levels_theta: int, rank: int = 9) -> dict:
    deferred = dict(delta="lowrank", rank=rank, delta_from=1 if levels_theta > 2 else 0)
    return {
        "MGRIT": {"levels": levels_naive},
        "MGRIT+theta": {"levels": levels_theta, "theta": True},
        f"MGRIT+theta+Delta{rank}": {"levels": levels_theta, "theta": True, **deferred},
    }


def ks_weak(ctx: Context) -> None:
    if ctx.desk:
        sizes, tf, algos = [(64, 1024), (128, 4096)], 1, ks_algos(3, 3)
    else:
        sizes, tf, algos = [(64, 512), (128, 2048), (256, 8192), (512, 32768)], 4, None
    rows = []
    for n_x, nt in sizes:
        if algos is None:
            # coarsest grid: 128 points without Delta, 32 with it
            lv = _levels(nt, 128)
            use = ks_algos(lv, lv, 9)
            use[next(k for k in use if "Delta" in k)]["levels"] = _levels(nt, 32)
        else:
            use = algos
        seq = None
        for algo, opts in use.items():
            cfg = ctx.config(**_ks(n_x=n_x, n_t=nt, t_final=tf, **opts))
            if seq is None:
                seq = sequential_seconds(setup(cfg))
            rep, _ = ctx.solve(f"ksweak_{algo}_nx{n_x}_nt{nt}", cfg)
            wall = rep.wall_ms[-1] / 1e3
            rows.append((n_x, nt, algo, cfg.levels, rep.iterations, rep.status, wall, seq, seq / wall))
    ctx.table("ks_weak.csv", ["n_x", "n_t", "algorithm", "levels", "iterations", "status",
                              "wall_s", "sequential_s", "speedup"], rows)


def _levels(nt: int, coarsest: int, factors=(16, 4)) -> int:
    levels, size, k = 1, nt, 0
    while True:
        m = factors[min(k, len(factors) - 1)]
        if size % m or size // m < coarsest:
            return levels
        size //= m
        levels += 1
        k += 1


def _strong(ctx: Context, name: str, tf: float, n_x: int, nt: int, algos: dict) -> None:
    rows = []
    for algo, opts in algos.items():
        cfg = ctx.config(**_ks(n_x=n_x, n_t=nt, t_final=tf, **opts)).replace(name=f"{name}_{algo}")
        seq = sequential_seconds(setup(cfg))
        for r in scaling_harness(cfg, ctx.worker_list):
            rows.append((algo, cfg.levels, r["workers"], r["iterations"], r["status"], r["wall_s"],
                         r["speedup"], seq, seq / r["wall_s"], r["identical"]))
        ctx.runs.append({"label": cfg.name, "ini": emit_config(cfg)})
    ctx.table(f"{name}.csv", ["algorithm", "levels", "workers", "iterations", "status", "wall_s",
                              "speedup_vs_1", "sequential_s", "speedup_vs_sequential",
                              "identical_history"], rows)


def ks_strong_4tl(ctx: Context) -> None:
    if ctx.desk:
        _strong(ctx, "ks_strong_4Tl", 1, 64, 1024, ks_algos(3, 3))
    else:
        _strong(ctx, "ks_strong_4Tl", 4, 256, 8192, ks_algos(3, 4))


def ks_strong_8tl(ctx: Context) -> None:
    algos = ks_algos(3, 3 if ctx.desk else 4)
    algos.pop("MGRIT")
    for opts in algos.values():
        opts["cycle"] = "F"
        if "delta" in opts:
            opts["lv_coarse"] = True
    if ctx.desk:
        _strong(ctx, "ks_strong_8Tl", 2, 64, 2048, algos)
    else:
        _strong(ctx, "ks_strong_8Tl", 8, 256, 16384, algos)


def ks_rank_sweep(ctx: Context) -> None:
    if ctx.desk:
        tf, n_x, nt, lv, ranks = 1, 64, 1024, 3, [1, 3, 6, 9, 12]
    else:
        tf, n_x, nt, lv, ranks = 4, 256, 8192, 4, [1, 3, 5, 7, 9, 11, 13, 15]
    rows = []
    base = ctx.config(**_ks(n_x=n_x, n_t=nt, t_final=tf, levels=lv, theta=True))
    seq = sequential_seconds(setup(base))
    variants = [("theta", 0, {})] + [(f"Delta{k}", k, dict(delta="lowrank", rank=k, delta_from=1))
                                     for k in ranks]
    for label, k, opts in variants:
        rep, _ = ctx.solve(f"ksrank_{label}", base.replace(**opts))
        wall = rep.wall_ms[-1] / 1e3
        rows.append((label, k, rep.iterations, rep.status, wall, seq, seq / wall))
    ctx.table("ks_rank_sweep.csv", ["variant", "rank", "iterations", "status", "wall_s",
                                    "sequential_s", "speedup_vs_sequential"], rows)


@dataclass(frozen=True)
class Preset:
    name: str
    summary: str
    func: object


PRESETS = {p.name: p for p in [
    Preset("table1", "two-level Lorenz, T_f = 4 T_l, refining n_t", table1),
    Preset("table2", "two-level Lorenz, growing T_f at fixed h", table2),
    Preset("table3", "Lorenz with 2, 3, 5 and 7 levels", table3),
    Preset("fig2", "residual over time during a naive two-level stall", fig2),
    Preset("fig3", "error along unstable/neutral/stable LVs, naive vs Delta", fig3),
    Preset("fig4", "residual histories of the four two-level algorithms", fig4),
    Preset("fig5-lyap", "greatest LE against step size, FE/BE/theta", fig5_lyap),
    Preset("ks-weak", "KS weak scaling: wall time against problem size", ks_weak),
    Preset("ks-strong-4Tl", "KS strong scaling, T_f = 4 T_l", ks_strong_4tl),
    Preset("ks-strong-8Tl", "KS strong scaling, T_f = 8 T_l, F-cycles", ks_strong_8tl),
    Preset("ks-rank-sweep", "KS iterations and time against the Delta rank", ks_rank_sweep),
]}


def run_preset(name: str, ctx: Context) -> dict:
    """Run a preset into ``ctx.out``; returns the manifest entries."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    ctx.out.mkdir(parents=True, exist_ok=True)
    PRESETS[name].func(ctx)
    return {"kind": "preset", "preset": name, "desk": ctx.desk, "workers": ctx.workers,
            "worker_list": ctx.worker_list, "overrides": ctx.overrides, "runs": ctx.runs,
            "files": ctx.files}
