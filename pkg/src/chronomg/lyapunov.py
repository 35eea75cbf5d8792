"""Backward Lyapunov vectors and exponents, and the low-rank Delta correction.

QR iteration ``Psi_{i+1} R_i = D Phi(u_i) Psi_i`` converges to the leading
backward Lyapunov vectors; the log-averaged diagonals of ``R_i`` give the
exponents.  Inside MGRIT the same basis is relaxed alongside the states and
used to build ``Delta_i Psi Psi^T`` from ``k`` directional derivatives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from ._pykernels import DegenerateBasisError
from .core import Propagator
from .kernels import Correction

__all__ = [
    "DegenerateBasisError", "LVBasis", "LyapunovEstimate", "LowRankDelta",
    "mgs_qr", "qr_iterate", "lowrank_delta", "lowrank_delta_from_tangents", "lv_tau",
    "lv_relax", "lv_coarse_propagate", "sequential_psi", "random_orthonormal",
    "principal_angle", "write_exponents_csv", "write_psi_csv", "backward_lv_path",
    "manifold_errors",
]


@dataclass
class LVBasis:
    psi: np.ndarray

    @property
    def k(self) -> int:
        return self.psi.shape[-1]

    def orthonormality_error(self) -> float:
        P = self.psi.reshape(-1, *self.psi.shape[-2:])
        eye = np.eye(self.k)
        return float(max(np.abs(p.T @ p - eye).max() for p in P))


@dataclass
class LyapunovEstimate:
    """Exponents in the order of the basis columns (descending once converged)."""

    exponents: np.ndarray
    window: float


@dataclass
class LowRankDelta:
    """``Delta_hat = P Q^T`` with ``P = Delta Psi`` and ``Q = Psi``."""

    P: np.ndarray
    Q: np.ndarray

    def apply(self, x):
        return self.P @ (self.Q.T @ x)

    def dense(self) -> np.ndarray:
        return self.P @ self.Q.T


def mgs_qr(W):
    """``(Q, diag R)`` by modified Gram-Schmidt with positive diagonal."""
    return kernels.mgs_qr(W)


def random_orthonormal(n: int, k: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


def qr_iterate(prop: Propagator, u_traj, psi0, normalize_every: int = 1, h: float | None = None,
               n_steps: int | None = None, discard: float = 0.5, t0: float = 0.0):
    """QR iteration for the leading ``k`` backward Lyapunov vectors.

    Parameters
    ----------
    prop : Propagator
        Stepper whose tangents are iterated.
    u_traj : ndarray
        Either a trajectory of shape ``(N + 1, n)`` (tangents are taken at its
        points) or a single initial state, in which case ``n_steps`` steps are
        integrated on the fly.
    psi0 : ndarray
        Orthonormal ``n x k`` starting basis.
    normalize_every : int
        Steps between Gram-Schmidt normalizations.
    h : float
        Step size.
    discard : float
        Fraction of the window dropped as transient before averaging.

    Returns
    -------
    (LVBasis, LyapunovEstimate)
        Final basis and the exponent estimate.
    """
    if h is None or not h > 0:
        raise ValueError("a positive step size h is required")
    u_traj = np.asarray(u_traj, dtype=float)
    psi0 = np.asarray(psi0, dtype=float)
    if np.abs(psi0.T @ psi0 - np.eye(psi0.shape[1])).max() > 1e-10:
        raise ValueError("psi0 must have orthonormal columns")
    if u_traj.ndim == 2:
        traj = u_traj
        n_steps = len(traj) - 1
        x0 = traj[0]
    else:
        if n_steps is None or n_steps < 1:
            raise ValueError("n_steps is required when starting from a single state")
        traj = None
        x0 = u_traj
    every = max(1, int(normalize_every))
    skip = int(round(discard * n_steps / every)) * every
    _, Q, logsum, counted = kernels.qr_run(prop, h, x0, psi0, n_steps, every, skip, traj, t0)
    if counted == 0:
        raise ValueError("averaging window is empty; lower discard or add steps")
    return LVBasis(Q), LyapunovEstimate(logsum / (counted * h), counted * h)


def lowrank_delta(fine_prop: Propagator, coarse_prop: Propagator, v, psi, m: int, h: float,
                  t0: float = 0.0, g=None) -> LowRankDelta:
    """``Delta Psi`` from ``k`` directional derivatives; no n x n matrix is formed."""
    from .delta import fine_chain
    psi = np.asarray(psi, dtype=float)
    _, FmPsi = fine_chain(fine_prop, v, m, h, V=psi, t0=t0, g=g)
    _, FcPsi = coarse_prop.step_apply(np.asarray(v, dtype=float), t0, m * h, psi)
    return LowRankDelta(FmPsi - FcPsi, psi.copy())


def lowrank_delta_from_tangents(FmPsi: np.ndarray, FcPsi: np.ndarray, psi: np.ndarray) -> Correction:
    """Correction indexed by coarse destination point from per-interval products."""
    nint, n, k = FmPsi.shape
    P = np.zeros((nint + 1, n, k))
    P[1:] = FmPsi - FcPsi
    Q = np.zeros((nint + 1, n, k))
    Q[1:] = psi[:-1]
    return Correction("lowrank", P=P, Q=Q)


def _apply_op(op, psi):
    return op(psi) if callable(op) else np.asarray(op) @ psi


def lv_tau(fine_tangent_m, coarse_tangent, lowrank: LowRankDelta, psi) -> np.ndarray:
    """``(F^m - (F_c + P Q^T)) Psi``; zero whenever ``P = (F^m - F_c) Psi``, ``Q = Psi``.

    The tangents may be matrices or callables acting on an ``n x k`` block.
    """
    psi = np.asarray(psi, dtype=float)
    return _apply_op(fine_tangent_m, psi) - _apply_op(coarse_tangent, psi) - lowrank.apply(psi)


def lv_relax(level, m: int, workers: int = 1, mode: str = "FCF"):
    """F- (and C-) relaxation of the states together with the LV basis.

    ``level.psi`` holds the basis at the level's C-points.  The F-sweep
    carries ``Psi`` through each interval with the step tangents; with
    ``mode="FCF"`` the C-relaxation then updates states and bases,
    ``Psi_{k+1} = GS(F^m Psi_k)``, with QR only at C-points.  Returns the
    ``phi`` values of the F-sweep.  ``level.lv_logr`` receives
    ``log diag R`` per interval.
    """
    from .mgrit import c_relax, f_relax
    psi = level.psi
    V = np.ascontiguousarray(psi[:-1])
    W = np.empty_like(V)
    phi = f_relax(level, m, workers, with_phi=True, V=V, W=W)
    if mode == "FCF":
        c_relax(level, m, workers, phi)
        logr = np.empty((len(W), W.shape[2]))
        new = np.array(psi, copy=True)
        for k in range(len(W)):
            new[k + 1], rd = kernels.mgs_qr(W[k])
            logr[k] = np.log(rd)
        level.psi = new
        level.lv_logr = logr
    return phi


def lv_coarse_propagate(coarse, psi, enabled: bool = True):
    """Sequential LV propagation on a coarse grid with the corrected stepper.

    ``Psi_i = GS((D Phi_c(v_{i-1}) + Delta_hat_i) Psi_{i-1})``; when disabled
    the basis is returned untouched.
    """
    if not enabled:
        return psi
    out = np.array(psi, copy=True)
    n, k = out.shape[1:]
    W = np.empty((1, n, k))
    for i in range(1, coarse.grid.n_points):
        kernels.propagate(coarse.prop, coarse.grid, coarse.u, coarse.g, [i - 1], 1, False, None,
                          coarse.corr, out[i - 1:i], W)
        out[i], _ = kernels.mgs_qr(W[0])
    return out


def sequential_psi(level, m: int, psi0) -> np.ndarray:
    """Bases at the C-points from QR iteration along the level's current states."""
    nc = (level.grid.n_points - 1) // m + 1
    n, k = psi0.shape
    out = np.empty((nc, n, k))
    out[0] = psi0
    W = np.empty((1, n, k))
    for c in range(1, nc):
        kernels.propagate(level.prop, level.grid, level.u, level.g, [(c - 1) * m], m, False,
                          None, level.corr, out[c - 1:c], W)
        out[c], _ = kernels.mgs_qr(W[0])
    return out


def backward_lv_path(prop: Propagator, traj, psi0, h: float, t0: float = 0.0) -> np.ndarray:
    """Gram-Schmidt bases at every point of ``traj``, shape ``(N + 1, n, k)``."""
    traj = np.asarray(traj, dtype=float)
    out = np.empty((len(traj),) + np.shape(psi0))
    out[0] = psi0
    for i in range(len(traj) - 1):
        _, W = kernels.step(prop, traj[i], t0 + i * h, h, out[i])
        out[i + 1], _ = kernels.mgs_qr(W)
    return out


def manifold_errors(err, bases, scale: float = 1.0) -> np.ndarray:
    """Norms of the error components along each basis column.

    ``err`` is ``(N + 1, n)`` and ``bases`` ``(N + 1, n, k)``; entry ``j`` of
    the result is ``sqrt(sum_i (psi_j(t_i) . e_i)^2) / scale``.
    """
    coeff = np.einsum("ink,in->ik", bases, np.asarray(err, dtype=float))
    return np.sqrt((coeff ** 2).sum(axis=0)) / scale


def principal_angle(a, b) -> float:
    """Angle in degrees between the spans of ``a`` and ``b`` (largest principal angle)."""
    qa = np.linalg.qr(np.atleast_2d(np.asarray(a, float).T).T)[0]
    qb = np.linalg.qr(np.atleast_2d(np.asarray(b, float).T).T)[0]
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s.min(), -1.0, 1.0))))


def write_exponents_csv(path, rows, k: int) -> None:
    """``rows`` are ``(t, lambda_1, ..., lambda_k)`` tuples."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"lambda_{j + 1}" for j in range(k)])
        for row in rows:
            wr.writerow([repr(float(v)) for v in row])


def write_psi_csv(path, times, psi, stride: int = 1) -> None:
    """Flattened bases at every ``stride``-th point: columns ``t, j, psi_0j, psi_1j, ...``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        n = psi.shape[1]
        wr.writerow(["t", "vector"] + [f"x{i}" for i in range(n)])
        for idx in range(0, len(psi), stride):
            for j in range(psi.shape[2]):
                wr.writerow([repr(float(times[idx])), j + 1] + [repr(float(v)) for v in psi[idx, :, j]])
