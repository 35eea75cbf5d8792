"""Full Delta correction of the coarse propagator.

``Delta_i = D Phi^m(v_{i-1}) - D Phi_c(v_{i-1})`` is the mismatch between the
linearizations of ``m`` fine steps and one coarse step.  The corrected
coarse step is affine in its argument, ``Phi_Delta(x) = Phi_c(x) + Delta_i x``,
with ``Delta_i`` frozen for the cycle.  With ``Phi_c == 0`` the corrected
two-level cycle is Newton's method on the coarse block system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Propagator, TimeGrid, ZeroPropagator
from .kernels import Correction

MAX_FULL_DELTA_DIM = 64


@dataclass
class DeltaCorrection:
    D: np.ndarray
    point: np.ndarray


def fine_chain(fine_prop: Propagator, v, m: int, h: float, V=None, t0: float = 0.0, g=None):
    """``(Phi^m(v), D Phi^m(v) V)`` for ``m`` fine steps from ``v``.

    ``g`` optionally holds the forcing of the ``m - 1`` interior points; the
    last step is unforced.  ``V`` defaults to the identity.
    """
    x = np.array(v, dtype=float, copy=True)
    W = np.eye(x.size) if V is None else np.array(V, dtype=float, copy=True)
    for j in range(m):
        x, W = fine_prop.step_apply(x, t0 + j * h, h, W)
        if g is not None and j < m - 1:
            x = x + g[j]
    return x, W


def compute_delta(fine_prop: Propagator, coarse_prop: Propagator, v, m: int, h: float,
                  t0: float = 0.0, g=None) -> DeltaCorrection:
    """Delta at ``v``; the fine tangent is the product of per-step tangents."""
    v = np.asarray(v, dtype=float)
    if v.size > MAX_FULL_DELTA_DIM:
        raise ValueError(f"full Delta is limited to n <= {MAX_FULL_DELTA_DIM}; use low-rank mode")
    _, Fm = fine_chain(fine_prop, v, m, h, t0=t0, g=g)
    Fc = coarse_prop.tangent(v, t0, m * h)
    return DeltaCorrection(Fm - Fc, v.copy())


def delta_step(coarse_prop: Propagator, delta, v, t: float, H: float) -> np.ndarray:
    """``Phi_c(v) + Delta v``."""
    D = delta.D if isinstance(delta, DeltaCorrection) else np.asarray(delta)
    return coarse_prop.step(v, t, H) + D @ v


def delta_step_tangent(coarse_prop: Propagator, delta, v, t: float, H: float) -> np.ndarray:
    D = delta.D if isinstance(delta, DeltaCorrection) else np.asarray(delta)
    return coarse_prop.tangent(v, t, H) + D


def full_delta_from_tangents(Fm: np.ndarray, Fc: np.ndarray) -> Correction:
    """Correction for a coarse grid from per-interval fine and coarse tangents.

    ``Fm[k]`` and ``Fc[k]`` belong to the interval ending at coarse point
    ``k + 1``; the result is indexed by that destination point.
    """
    nint, n, _ = Fm.shape
    if n > MAX_FULL_DELTA_DIM:
        raise ValueError(f"full Delta is limited to n <= {MAX_FULL_DELTA_DIM}; use low-rank mode")
    D = np.zeros((nint + 1, n, n))
    D[1:] = Fm - Fc
    return Correction("full", D=D)


class CorrectedPropagator(Propagator):
    """Coarse propagator with per-interval corrections on a fixed grid."""

    def __init__(self, base: Propagator, corr: Correction, grid: TimeGrid):
        self.base = base
        self.corr = corr
        self.grid = grid
        self.n = base.n

    def _dest(self, t: float) -> int:
        return int(round((t - self.grid.t0) / self.grid.h)) + 1

    def step(self, u, t, h):
        return self.base.step(u, t, h) + self.corr.apply(self._dest(t), u)

    def step_apply(self, u, t, h, V):
        y, W = self.base.step_apply(u, t, h, V)
        i = self._dest(t)
        return y + self.corr.apply(i, u), W + self.corr.apply(i, V)


def modified_fas_residual(w, coarse_prop, corr: Correction, g_c, tau, v, grid: TimeGrid):
    """Residual of the modified coarse equation at ``w``.

    The global correction has ``-Delta_i`` on the block subdiagonal, so row
    ``i`` of ``[A_c + Delta](w) = g_c + tau(v) + [Delta] v`` reads
    ``w_i - Phi_c(w_{i-1}) - Delta_i w_{i-1} = g_i + tau_i - Delta_i v_{i-1}``
    with the plain ``tau_i = Phi^m(v_{i-1}) - Phi_c(v_{i-1})``.
    """
    w = np.asarray(w)
    r = np.empty_like(w)
    r[0] = g_c[0] - w[0]
    for i in range(1, len(w)):
        lhs = w[i] - coarse_prop.step(w[i - 1], grid.time(i - 1), grid.h) - corr.apply(i, w[i - 1])
        r[i] = g_c[i] + tau[i - 1] - corr.apply(i, v[i - 1]) - lhs
    return r


def newton_mode_solve(g, prop: Propagator, grid: TimeGrid, m: int, tol: float = 1e-10,
                      max_iter: int = 20, initial_guess: str = "zero", workers: int = 1):
    """Two-level Delta-corrected MGRIT with ``Phi_c == 0``.

    The C-point iterates of each cycle are kept in ``report.iterates``.
    """
    from .mgrit import CycleConfig, LevelDescriptor, MGRITSolver, TimeHierarchy

    hier = TimeHierarchy(grid, [LevelDescriptor(prop, m, delta_mode="full"),
                                LevelDescriptor(ZeroPropagator(prop.n))])
    cfg = CycleConfig(cycle="V", relaxation="F", halt_tol=tol, max_iter=max_iter,
                      initial_guess=initial_guess, workers=workers)
    solver = MGRITSolver(hier, cfg)
    iterates = []

    def grab(it, s):
        iterates.append(s.levels[0].u[::m].copy())

    report = solver.solve(g, callback=grab)
    report.iterates = iterates
    return report
