"""Time grids, propagators and the all-at-once residual.

A discrete IVP ``u_0 = g_0, u_{i+1} = Phi(u_i) + g_{i+1}`` is stored as two
``(n_points, n_s)`` arrays: the states ``u`` and the forcing ``g``.  Row 0 of
the forcing carries the initial condition.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np


class ChronoError(RuntimeError):
    """Base class for solver errors."""


class DivergenceError(ChronoError):
    """A non-finite value appeared at time index ``index``."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class StepperError(ChronoError):
    """An implicit step failed to converge."""

    def __init__(self, message: str, index: int | None = None,
                 iterations: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.index = index
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = t0 + (i * stride) * h``.

    ``h`` is the finest step the grid was derived from; ``stride`` is the
    accumulated coarsening factor.  Keeping the two apart makes the times of
    coinciding points bit-identical across levels.
    """

    t0: float
    h_base: float
    n_points: int
    stride: int = 1

    def __post_init__(self):
        if not self.h_base > 0:
            raise ValueError(f"step size must be positive, got {self.h_base}")
        if self.n_points < 2:
            raise ValueError(f"a grid needs at least 2 points, got {self.n_points}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def h(self) -> float:
        return self.stride * self.h_base

    @property
    def n_steps(self) -> int:
        return self.n_points - 1

    @property
    def t_final(self) -> float:
        return self.time(self.n_points - 1)

    def time(self, i: int) -> float:
        return self.t0 + (i * self.stride) * self.h_base

    @property
    def times(self) -> np.ndarray:
        return self.t0 + (np.arange(self.n_points) * self.stride) * self.h_base

    def coarsen(self, m: int) -> "TimeGrid":
        if m < 1 or self.n_steps % m:
            raise ValueError(f"cannot coarsen {self.n_steps} steps by factor {m}")
        return TimeGrid(self.t0, self.h_base, self.n_steps // m + 1, self.stride * m)


class Propagator(ABC):
    """One step of a time integrator, ``u -> Phi(u)``, and its linearization.

    Subclasses implement :meth:`step` and at least one of :meth:`step_apply`
    or :meth:`tangent`.  ``tangent_apply`` is the directional derivative
    ``D_u Phi(u) @ V`` for an ``(n, k)`` block ``V``.
    """

    n: int

    @abstractmethod
    def step(self, u: np.ndarray, t: float, h: float) -> np.ndarray:
        ...

    def tangent(self, u, t, h) -> np.ndarray:
        return self.tangent_apply(u, t, h, np.eye(self.n))

    def tangent_apply(self, u, t, h, V) -> np.ndarray:
        return self.step_apply(u, t, h, V)[1]

    def step_apply(self, u, t, h, V):
        """Return ``(Phi(u), D_u Phi(u) @ V)`` sharing work where possible."""
        if type(self).tangent is Propagator.tangent:
            raise NotImplementedError(f"{type(self).__name__} has no tangent")
        return self.step(u, t, h), self.tangent(u, t, h) @ V

    def ckernel(self):
        """Compiled counterpart for the fast kernels, or None."""
        return None


class IdentityPropagator(Propagator):
    def __init__(self, n: int):
        self.n = n

    def step(self, u, t, h):
        return np.array(u, dtype=float, copy=True)

    def step_apply(self, u, t, h, V):
        return self.step(u, t, h), np.array(V, dtype=float, copy=True)


class ZeroPropagator(Propagator):
    """``Phi == 0``; as a coarse operator it turns Delta-corrected MGRIT into Newton."""

    def __init__(self, n: int):
        self.n = n

    def step(self, u, t, h):
        return np.zeros(self.n)

    def step_apply(self, u, t, h, V):
        V = np.asarray(V)
        return np.zeros(self.n), np.zeros((self.n, V.shape[1]))


class RepeatedStep(Propagator):
    """``m`` unforced steps of ``base`` with step ``h / m``.

    Used as the ideal coarse operator when the forcing vanishes on F-points.
    """

    def __init__(self, base: Propagator, m: int):
        self.base = base
        self.m = m
        self.n = base.n

    def step(self, u, t, h):
        hf = h / self.m
        for j in range(self.m):
            u = self.base.step(u, t + j * hf, hf)
        return u

    def step_apply(self, u, t, h, V):
        hf = h / self.m
        W = np.array(V, dtype=float, copy=True)
        for j in range(self.m):
            u, W = self.base.step_apply(u, t + j * hf, hf, W)
        return u, W


def ivp_forcing(u0, n_points: int) -> np.ndarray:
    """Forcing of a plain IVP: ``g_0 = u0`` and zero elsewhere."""
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    g = np.zeros((n_points, u0.size))
    g[0] = u0
    return g


def check_finite(x: np.ndarray, what: str = "state") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.reshape(x, (len(x), -1))))[0, 0]
        raise DivergenceError(f"non-finite {what} at index {bad}", index=int(bad))


def global_norm(r: np.ndarray) -> float:
    """Euclidean norm of the concatenated space-time vector.

    Accumulated point by point in index order so the value does not depend on
    how the residual was produced.
    """
    r = np.reshape(r, (len(r), -1))
    per_point = np.einsum("ij,ij->i", r, r)
    total = 0.0
    for v in per_point:
        total += v
    return float(np.sqrt(total))


def block_residual(states, prop: Propagator, g, grid: TimeGrid):
    """Residual of the block system ``A(u) = g``.

    Returns ``(r, norm)`` with ``r_0 = g_0 - u_0`` and
    ``r_i = g_i + Phi(u_{i-1}) - u_i``.
    """
    u = np.asarray(states, dtype=float)
    g = np.asarray(g, dtype=float)
    if u.shape != g.shape or len(u) < 2:
        raise ValueError("states and forcing must share a shape with >= 2 points")
    from . import kernels
    u = np.ascontiguousarray(u)
    r = np.empty_like(u)
    r[0] = g[0] - u[0]
    phi = np.empty((len(u) - 1, u.shape[1]))
    kernels.propagate(prop, grid, u, g, np.arange(len(u) - 1), 1, False, phi)
    r[1:] = g[1:] + phi - u[1:]
    check_finite(r, "residual")
    return r, global_norm(r)


def sequential_solve(prop: Propagator, g, grid: TimeGrid) -> np.ndarray:
    """Forward substitution, i.e. ordinary time marching."""
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if len(g) != grid.n_points:
        raise ValueError("forcing length must equal the number of grid points")
    if not np.all(np.isfinite(g[0])):
        raise DivergenceError("non-finite initial condition", index=0)
    from . import kernels
    g = np.ascontiguousarray(g)
    u = np.empty_like(g)
    u[0] = g[0]
    phi = np.empty((1, g.shape[1]))
    kernels.propagate(prop, grid, u, g, [0], len(g) - 1, True, phi)
    u[-1] = phi[0] + g[-1]
    check_finite(u[-1:], "state")
    return u
