"""Multilevel FAS MGRIT: hierarchy, relaxation, transfers, cycles and halting.

Level ``l`` stores its states ``u``, its forcing ``g`` (for coarse levels the
injected fine forcing plus tau) and, for the pair ``l -> l+1``, the optional
Delta correction that is applied to the steps of level ``l+1``.  All interval
sweeps go through :func:`chronomg.kernels.propagate`, so they are parallel
over intervals and bitwise independent of the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import (ChronoError, DivergenceError, Propagator, StepperError, TimeGrid,
                   global_norm)
from .kernels import Correction

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DIVERGENCE_THRESHOLD = 1e10


@dataclass
class LevelDescriptor:
    """One level of the hierarchy.

    ``delta_mode`` and ``rank`` describe the correction of the pair from this
    level to the next; ``lv_coarse`` turns on sequential LV propagation on
    the next level for low-rank mode.
    """

    stepper: Propagator
    m: int | None = None
    delta_mode: str = "off"
    rank: int = 0
    theta_enabled: bool = False
    lv_coarse: bool = False

    def __post_init__(self):
        if self.delta_mode not in ("off", "full", "lowrank"):
            raise ValueError(f"delta_mode must be off, full or lowrank, got {self.delta_mode!r}")
        if self.delta_mode == "lowrank" and self.rank < 1:
            raise ValueError("low-rank Delta needs rank >= 1")


@dataclass
class TimeHierarchy:
    grid: TimeGrid
    levels: list

    def __post_init__(self):
        self.validate()

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def grids(self) -> list[TimeGrid]:
        out = [self.grid]
        for lev in self.levels[:-1]:
            out.append(out[-1].coarsen(lev.m))
        return out

    def validate(self) -> None:
        if not self.levels:
            raise ValueError("hierarchy needs at least one level")
        n = self.levels[0].stepper.n
        grid = self.grid
        for l, lev in enumerate(self.levels):
            if lev.stepper.n != n:
                raise ValueError(f"level {l}: state dimension {lev.stepper.n} != {n}")
            if l == len(self.levels) - 1:
                break
            if lev.m is None or lev.m < 1:
                raise ValueError(f"level {l}: coarsening factor missing")
            if grid.n_steps % lev.m:
                raise ValueError(f"level {l}: {grid.n_steps} steps not divisible by m={lev.m}")
            if lev.delta_mode == "lowrank" and lev.rank > n:
                raise ValueError(f"level {l}: rank {lev.rank} exceeds state dimension {n}")
            grid = grid.coarsen(lev.m)
            if grid.n_points < 2:
                raise ValueError("coarsest level needs at least 2 points")


@dataclass
class CycleConfig:
    cycle: str = "V"
    relaxation: str = "F"
    halt_tol: float = 1e-10
    max_iter: int = 100
    initial_guess: str = "zero"
    workers: int = 1
    seed: int = 0
    psi_init: str = "coarse"

    def __post_init__(self):
        if self.cycle not in ("V", "F"):
            raise ValueError(f"cycle must be V or F, got {self.cycle!r}")
        if self.relaxation not in ("F", "FCF"):
            raise ValueError(f"relaxation must be F or FCF, got {self.relaxation!r}")
        if not self.halt_tol > 0:
            raise ValueError("halt_tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.initial_guess not in ("zero", "coarse-sequential-interpolated", "constant"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")
        if self.psi_init not in ("random", "sequential", "coarse"):
            raise ValueError(f"unknown psi_init {self.psi_init!r}")


@dataclass
class SolveReport:
    residuals: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    status: str = "stalled"
    iterations: int = 0
    level_visits: list = field(default_factory=list)
    states: np.ndarray | None = None
    psi: np.ndarray | None = None
    lyapunov_estimates: np.ndarray | None = None
    kappa: float | None = None
    workers: int = 1
    message: str = ""
    config: dict = field(default_factory=dict)
    iterates: list | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.nan

    def history_rows(self):
        return [(k, r, w) for k, (r, w) in enumerate(zip(self.residuals, self.wall_ms))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "residual", "wall_ms"])
            for k, r, w in self.history_rows():
                wr.writerow([k, repr(float(r)), f"{w:.3f}"])

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "status": self.status,
            "iterations": self.iterations,
            "final_residual": float(self.final_residual),
            "residuals": [float(r) for r in self.residuals],
            "wall_ms": [float(w) for w in self.wall_ms],
            "level_visits": list(self.level_visits),
            "workers": self.workers,
            "kappa": self.kappa,
            "lyapunov_estimates": (None if self.lyapunov_estimates is None
                                   else [float(v) for v in self.lyapunov_estimates]),
            "message": self.message,
            "config": self.config,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=str)


# ---------------------------------------------------------------------------
# level storage and elementary operations


class LevelData:
    """Work arrays of one level."""

    def __init__(self, grid: TimeGrid, prop: Propagator, n: int):
        self.grid = grid
        self.prop = prop
        self.u = np.zeros((grid.n_points, n))
        self.g = np.zeros((grid.n_points, n))
        # correction applied to this level's steps (from the finer pair)
        self.corr: Correction | None = None
        # per coarse point, for the pair this level -> next
        self.tau: np.ndarray | None = None
        self.psi: np.ndarray | None = None
        # Phi^m per interval from the latest F-sweep, valid until u changes
        self.phi: np.ndarray | None = None
        self.lv_logr: np.ndarray | None = None


def c_indices(n_points: int, m: int) -> np.ndarray:
    return np.arange(0, n_points, m)


def interval_starts(n_points: int, m: int) -> np.ndarray:
    return np.arange(0, n_points - 1, m)


def f_relax(level: LevelData, m: int, workers: int = 1, with_phi: bool = False,
            V=None, W=None):
    """Propagate every C-point through its interval's F-points.

    With ``with_phi`` also returns ``Phi`` of each interval's last F-point
    (unforced), i.e. ``Phi^m`` of the interval's C-point.
    """
    starts = interval_starts(level.grid.n_points, m)
    phi = np.empty((len(starts), level.u.shape[1])) if with_phi else None
    kernels.propagate(level.prop, level.grid, level.u, level.g, starts, m, True, phi,
                      level.corr, V, W, workers)
    return phi


def c_relax(level: LevelData, m: int, workers: int = 1, phi=None):
    """Overwrite C-points ``km`` (k >= 1) from the preceding F-point.

    ``phi`` may carry the step values from a preceding F-sweep.
    """
    n_points = level.grid.n_points
    cs = c_indices(n_points, m)[1:]
    if phi is None:
        phi = np.empty((len(cs), level.u.shape[1]))
        kernels.propagate(level.prop, level.grid, level.u, level.g, cs - 1, 1, False, phi,
                          level.corr, None, None, workers)
    level.u[cs] = phi + level.g[cs]


def restrict_inject(u: np.ndarray, m: int) -> np.ndarray:
    """Coarse point ``j`` is fine point ``j m``."""
    return np.array(u[::m], copy=True)


def interpolate_inject(fine_u: np.ndarray, coarse_u: np.ndarray, m: int) -> None:
    fine_u[::m] = coarse_u


def compute_tau(phi_m: np.ndarray, coarse: LevelData, workers: int = 1, corr=None):
    """``tau_i = Phi^m(v_{i-1}) - Phi_c(v_{i-1}) [- Delta_i v_{i-1}]``.

    ``phi_m`` holds the fine values per coarse interval, ``coarse.u`` the
    injected states and ``corr`` an optional Delta correction (indexed by the
    coarse destination point).
    """
    nc = coarse.grid.n_points
    phic = np.empty((nc - 1, coarse.u.shape[1]))
    kernels.propagate(coarse.prop, coarse.grid, coarse.u, coarse.g, np.arange(nc - 1), 1,
                      False, phic, None, None, None, workers)
    tau = phi_m - phic
    if corr is not None:
        for i in range(1, nc):
            tau[i - 1] -= corr.apply(i, coarse.u[i - 1])
    return tau


def coarse_solve(level: LevelData, workers: int = 1) -> None:
    """Sequential solve of the (corrected) recurrence on the coarsest level."""
    level.u[0] = level.g[0]
    n_points = level.grid.n_points
    phi = np.empty((1, level.u.shape[1]))
    kernels.propagate(level.prop, level.grid, level.u, level.g, [0], n_points - 1, True, phi,
                      level.corr, None, None, 1)
    level.u[-1] = phi[0] + level.g[-1]
    if not np.all(np.isfinite(level.u[-1])):
        raise DivergenceError("non-finite state on the coarsest level", index=n_points - 1)


def level_residual_from_phi(level: LevelData, m: int, phi: np.ndarray) -> float:
    """Global residual after an F-relaxation: only C-points (and point 0) contribute."""
    u, g = level.u, level.g
    cs = c_indices(level.grid.n_points, m)[1:]
    r = np.zeros((len(cs) + 1, u.shape[1]))
    r[0] = g[0] - u[0]
    r[1:] = phi + g[cs] - u[cs]
    return global_norm(r)


# ---------------------------------------------------------------------------
# the solver


class MGRITSolver:
    """FAS MGRIT with optional theta coarse steppers and Delta corrections."""

    def __init__(self, hier: TimeHierarchy, cfg: CycleConfig | None = None):
        self.hier = hier
        self.cfg = cfg or CycleConfig()
        n = hier.levels[0].stepper.n
        self.n = n
        self.levels = [LevelData(gr, lev.stepper, n)
                       for gr, lev in zip(hier.grids, hier.levels)]
        self.visits = [0] * hier.n_levels
        rng = np.random.default_rng(self.cfg.seed)
        for l, lev in enumerate(hier.levels[:-1]):
            if lev.delta_mode == "lowrank":
                nc = self.levels[l + 1].grid.n_points
                q = np.linalg.qr(rng.standard_normal((n, lev.rank)))[0]
                self.levels[l].psi = np.ascontiguousarray(np.broadcast_to(q, (nc, n, lev.rank)))

    # -- setup -------------------------------------------------------------

    def initialize(self, g: np.ndarray, u0: np.ndarray | None = None) -> None:
        fine = self.levels[0]
        g = np.asarray(g, dtype=float).reshape(fine.grid.n_points, -1)
        if g.shape[1] != self.n:
            raise ValueError(f"forcing has dimension {g.shape[1]}, expected {self.n}")
        fine.g[:] = g
        for level in self.levels:
            level.phi = None
        guess = self.cfg.initial_guess
        if u0 is not None:
            fine.u[:] = u0
            self._restrict_guess()
        elif guess == "zero":
            fine.u[:] = 0.0
            fine.u[0] = g[0]
        elif guess == "constant":
            fine.u[:] = g[0]
        else:
            self._coarse_sequential_guess()
        if self.cfg.psi_init != "random":
            self._sequential_psi(self.cfg.psi_init == "coarse")

    def _restrict_guess(self):
        # a supplied guess is injected so the coarse levels see the same states
        levels, hier = self.levels, self.hier
        for l in range(1, len(levels)):
            m = hier.levels[l - 1].m
            levels[l].u[:] = levels[l - 1].u[::m]
            levels[l].g[:] = levels[l - 1].g[::m]

    def _coarse_sequential_guess(self):
        # forcing injected all the way down, sequential solve on the
        # coarsest grid, then F-relaxation level by level on the way up
        levels, hier = self.levels, self.hier
        for l in range(1, len(levels)):
            levels[l].g[:] = levels[l - 1].g[::hier.levels[l - 1].m]
        coarse_solve(levels[-1])
        for l in range(len(levels) - 2, -1, -1):
            m = hier.levels[l].m
            levels[l].u[::m] = levels[l + 1].u
            f_relax(levels[l], m, self.cfg.workers)

    def _sequential_psi(self, coarse: bool):
        # QR iteration along the current guess, either with this level's
        # m-step tangents or with one step of the next level's stepper
        from .lyapunov import lv_coarse_propagate, sequential_psi
        for l, lev in enumerate(self.hier.levels[:-1]):
            if lev.delta_mode == "lowrank":
                level = self.levels[l]
                if coarse:
                    nxt = self.levels[l + 1]
                    nxt.u[:] = level.u[::lev.m]
                    level.psi = lv_coarse_propagate(nxt, level.psi, True)
                else:
                    level.psi = sequential_psi(level, lev.m, level.psi[0])

    # -- cycle pieces --------------------------------------------------------

    def _pre_relax(self, l: int):
        """Pre-relaxation fused with the restriction sweep.

        Returns ``(phi, W)``: the fine values ``Phi^m`` per interval and the
        tangent products needed for Delta (or None).
        """
        level, desc, cfg = self.levels[l], self.hier.levels[l], self.cfg
        m, w = desc.m, cfg.workers
        mode = desc.delta_mode
        nint = level.grid.n_steps // m
        cached = level.phi
        level.phi = None
        if cfg.relaxation == "FCF":
            if mode == "lowrank":
                from .lyapunov import lv_relax
                lv_relax(level, m, w, mode="FCF")
            else:
                # a valid phi means the F-points are already relaxed
                phi = cached if cached is not None else f_relax(level, m, w, with_phi=True)
                c_relax(level, m, w, phi)
        elif mode == "off" and cached is not None:
            return cached, None
        V = W = None
        if mode == "full":
            V = np.ascontiguousarray(np.broadcast_to(np.eye(self.n), (nint, self.n, self.n)))
            W = np.empty_like(V)
        elif mode == "lowrank":
            V = np.ascontiguousarray(level.psi[:-1])
            W = np.empty_like(V)
        phi = f_relax(level, m, w, with_phi=True, V=V, W=W)
        return phi, W

    def _restrict(self, l: int, phi, W) -> None:
        from .delta import full_delta_from_tangents
        from .lyapunov import lowrank_delta_from_tangents
        level, coarse = self.levels[l], self.levels[l + 1]
        desc = self.hier.levels[l]
        m, w = desc.m, self.cfg.workers
        coarse.u[:] = restrict_inject(level.u, m)
        coarse.phi = None
        coarse.g[:] = level.g[::m]
        corr = None
        if desc.delta_mode != "off":
            nc = coarse.grid.n_points
            if desc.delta_mode == "full":
                Fc = np.ascontiguousarray(np.broadcast_to(np.eye(self.n), (nc - 1, self.n, self.n)))
            else:
                Fc = np.ascontiguousarray(level.psi[:-1])
            FcV = np.empty_like(Fc)
            phic = np.empty((nc - 1, self.n))
            kernels.propagate(coarse.prop, coarse.grid, coarse.u, coarse.g, np.arange(nc - 1), 1,
                              False, phic, None, Fc, FcV, w)
            if desc.delta_mode == "full":
                corr = full_delta_from_tangents(W, FcV)
            else:
                corr = lowrank_delta_from_tangents(W, FcV, level.psi)
            tau = phi - phic
            for i in range(1, nc):
                tau[i - 1] -= corr.apply(i, coarse.u[i - 1])
        else:
            tau = compute_tau(phi, coarse, w)
        coarse.corr = corr
        level.tau = tau
        coarse.g[1:] += tau

    def _coarse_lv(self, l: int) -> None:
        desc = self.hier.levels[l]
        if desc.delta_mode == "lowrank" and desc.lv_coarse:
            from .lyapunov import lv_coarse_propagate
            level = self.levels[l]
            level.psi = lv_coarse_propagate(self.levels[l + 1], level.psi, True)

    def cycle(self, l: int = 0, kind: str | None = None):
        """One cycle from level ``l``; returns the post-relaxation ``phi`` at ``l``."""
        kind = kind or self.cfg.cycle
        self.visits[l] += 1
        level = self.levels[l]
        if l == len(self.levels) - 1:
            coarse_solve(level, self.cfg.workers)
            return None
        m = self.hier.levels[l].m
        phi, W = self._pre_relax(l)
        self._restrict(l, phi, W)
        if l + 1 == len(self.levels) - 1:
            self.cycle(l + 1, kind)
        elif kind == "F":
            self.cycle(l + 1, "F")
            self.cycle(l + 1, "V")
        else:
            self.cycle(l + 1, "V")
        self._coarse_lv(l)
        interpolate_inject(level.u, self.levels[l + 1].u, m)
        level.phi = f_relax(level, m, self.cfg.workers, with_phi=True)
        return level.phi

    def residual(self) -> float:
        """Global residual at the finest level for the current states."""
        fine = self.levels[0]
        n_points = fine.grid.n_points
        phi = np.empty((n_points - 1, self.n))
        kernels.propagate(fine.prop, fine.grid, fine.u, fine.g, np.arange(n_points - 1), 1,
                          False, phi, None, None, None, self.cfg.workers)
        r = np.empty_like(fine.u)
        r[0] = fine.g[0] - fine.u[0]
        r[1:] = phi + fine.g[1:] - fine.u[1:]
        return global_norm(r)

    # -- driver ---------------------------------------------------------------

    def solve(self, g, u0=None, callback=None) -> SolveReport:
        cfg = self.cfg
        report = SolveReport(workers=cfg.workers)
        t_start = time.perf_counter()

        def record(res):
            report.residuals.append(float(res))
            report.wall_ms.append(1e3 * (time.perf_counter() - t_start))

        try:
            self.initialize(g, u0)
            if len(self.levels) == 1:
                coarse_solve(self.levels[0])
            res = self.residual()
            record(res)
            status = self._classify(res, 0)
            it = 0
            while status is None:
                it += 1
                phi = self.cycle(0)
                if phi is None:
                    res = self.residual()
                else:
                    res = level_residual_from_phi(self.levels[0], self.hier.levels[0].m, phi)
                record(res)
                if callback is not None:
                    callback(it, self)
                status = self._classify(res, it)
            report.status = status
            report.iterations = it
            if status == "diverged":
                report.message = f"residual {res:.3e} is not finite or above {DIVERGENCE_THRESHOLD:.0e}"
        except (DivergenceError, StepperError, FloatingPointError, ArithmeticError) as exc:
            report.status = "diverged"
            report.iterations = len(report.residuals)
            report.message = str(exc)
            if not report.residuals or math.isfinite(report.residuals[-1]):
                record(math.inf)
        report.states = self.levels[0].u.copy()
        report.level_visits = list(self.visits)
        # LV data come from the finest level that carries a basis
        lv = next((l for l, lev in enumerate(self.levels) if lev.psi is not None), None)
        if lv is not None:
            level = self.levels[lv]
            report.psi = level.psi.copy()
            logr = level.lv_logr
            if logr is not None and len(logr) >= 2:
                # second half of the time domain, as for the sequential estimate
                half = logr[len(logr) // 2:]
                H = self.hier.levels[lv].m * level.grid.h
                report.lyapunov_estimates = half.mean(axis=0) / H
        return report

    def _classify(self, res: float, it: int):
        if not math.isfinite(res) or res > DIVERGENCE_THRESHOLD:
            return "diverged"
        if res <= self.cfg.halt_tol:
            return "converged"
        if it >= self.cfg.max_iter:
            return "stalled"
        return None


def mgrit_solve(hier: TimeHierarchy, g, cfg: CycleConfig | None = None, u0=None,
                lyapunov_time: float | None = None, config_echo: dict | None = None) -> SolveReport:
    """Solve ``A(u) = g`` on ``hier`` and return the report."""
    solver = MGRITSolver(hier, cfg)
    report = solver.solve(g, u0)
    if lyapunov_time:
        report.kappa = 10.0 ** ((hier.grid.t_final - hier.grid.t0) / lyapunov_time)
    report.config = config_echo or {"cycle": asdict(solver.cfg), "n_levels": hier.n_levels}
    return report
