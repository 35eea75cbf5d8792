"""Pure-Python bulk kernels.

Reference implementation of the interval sweeps and the QR iteration; the
compiled module mirrors these functions one to one.
"""

from __future__ import annotations

import math

import numpy as np

from .core import DivergenceError, StepperError

REORTH_TOL = 1e-10
DEGENERATE_TOL = 1e-300


class DegenerateBasisError(ArithmeticError):
    pass


def mgs_qr(W: np.ndarray):
    """Modified Gram-Schmidt ``W = Q R`` with positive ``diag(R)``.

    A second pass is made when ``|Q^T Q - I|_max`` exceeds 1e-10; the returned
    diagonal is then that of the product of both triangular factors.
    """
    Q = np.array(W, dtype=float, copy=True)
    k = Q.shape[1]
    rdiag = _mgs_pass(Q)
    if np.abs(Q.T @ Q - np.eye(k)).max() > REORTH_TOL:
        rdiag *= _mgs_pass(Q)
    return Q, rdiag


def _mgs_pass(Q):
    k = Q.shape[1]
    rdiag = np.empty(k)
    for j in range(k):
        for i in range(j):
            Q[:, j] -= np.dot(Q[:, i], Q[:, j]) * Q[:, i]
        r = math.sqrt(np.dot(Q[:, j], Q[:, j]))
        if not r > DEGENERATE_TOL:
            raise DegenerateBasisError(f"rank-deficient basis (column {j}, R_jj = {r:.3e})")
        Q[:, j] /= r
        rdiag[j] = r
    return rdiag


def _apply_corr(corr, i, x):
    if corr is None:
        return 0.0
    if corr.kind == "full":
        return corr.D[i] @ x
    return corr.P[i] @ (corr.Q[i].T @ x)


def propagate(prop, grid, U, G, starts, m, write=True, phi=None, corr=None,
              V=None, W=None):
    """Propagate ``m`` steps from each ``U[s]``, ``s`` in ``starts``.

    Points ``s+1 .. s+m-1`` receive ``Phi(x) + G`` and are stored in ``U`` when
    ``write``.  The unforced final value ``Phi(x_{m-1})`` goes to ``phi[k]``.
    With ``V`` given, the tangent product along the path is applied to
    ``V[k]`` and stored in ``W[k]``.  ``corr`` adds ``Delta_i x`` at every
    destination point ``i``.
    """
    h = grid.h
    tan = V is not None
    for k, s in enumerate(starts):
        s = int(s)
        x = U[s].copy()
        Vk = V[k].copy() if tan else None
        for j in range(1, m + 1):
            i = s + j
            t = grid.time(i - 1)
            try:
                if tan:
                    y, Wn = prop.step_apply(x, t, h, Vk)
                    if corr is not None:
                        Wn = Wn + _apply_corr(corr, i, Vk)
                    Vk = Wn
                else:
                    y = prop.step(x, t, h)
            except StepperError as exc:
                exc.index = i
                raise
            if corr is not None:
                y = y + _apply_corr(corr, i, x)
            if j < m:
                y = y + G[i]
                if not np.all(np.isfinite(y)):
                    raise DivergenceError(f"non-finite state at index {i}", index=i)
                if write:
                    U[i] = y
            x = y
        if phi is not None:
            phi[k] = x
        if tan:
            W[k] = Vk


def qr_run(prop, h, x, Q, n_steps, every=1, discard=0, traj=None, t0=0.0):
    """QR iteration along a trajectory.

    Marches ``x`` (or linearizes about ``traj[i]`` when a trajectory is given)
    and re-orthonormalizes ``Q`` every ``every`` steps.  ``log(diag R)`` is
    accumulated for normalizations ending after step ``discard``.

    Returns ``(x, Q, logsum, n_accumulated_steps)``.
    """
    x = np.array(x, dtype=float, copy=True)
    Q = np.array(Q, dtype=float, copy=True)
    logsum = np.zeros(Q.shape[1])
    counted = 0
    last = 0
    for i in range(n_steps):
        xi = traj[i] if traj is not None else x
        try:
            y, Q = prop.step_apply(xi, t0 + i * h, h, Q)
        except StepperError as exc:
            exc.index = i + 1
            raise
        x = y
        if (i + 1) % every == 0 or i + 1 == n_steps:
            Q, rd = mgs_qr(Q)
            if last >= discard:
                logsum += np.log(rd)
                counted += i + 1 - last
            last = i + 1
    if traj is not None:
        x = np.array(traj[n_steps], dtype=float, copy=True)
    return x, Q, logsum, counted
