"""Right-hand sides: Dahlquist test equation, Lorenz-63 and 1-D Kuramoto-Sivashinsky.

Every model exposes ``rhs(u)``, ``jacobian_apply(u, V)`` and the structure the
implicit steppers need to assemble Newton matrices: a dense ``jacobian(u)``
for small systems, or periodic row-offset bands ``jacobian_rows(u)`` for the
KS discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


def lorenz_rhs(u, p: LorenzParams = LorenzParams()) -> np.ndarray:
    x, y, z = u
    return np.array([p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z])


def lorenz_jacobian(u, p: LorenzParams = LorenzParams()) -> np.ndarray:
    x, y, z = u
    return np.array([[-p.sigma, p.sigma, 0.0],
                     [p.rho - z, -1.0, -x],
                     [y, x, -p.beta]])


class Dahlquist:
    """Scalar linear test equation ``u' = lam * u``."""

    n = 1
    banded = False

    def __init__(self, lam: float = -1.0):
        self.lam = float(lam)

    def rhs(self, u):
        return self.lam * np.asarray(u, dtype=float)

    def jacobian(self, u):
        return np.array([[self.lam]])

    def jacobian_apply(self, u, V):
        return self.lam * np.asarray(V, dtype=float)

    def cspec(self):
        return ("dahlquist", self.lam)


class Lorenz:
    n = 3
    banded = False
    # greatest Lyapunov exponent of the classical attractor
    lambda_max = 0.9

    def __init__(self, params: LorenzParams = LorenzParams()):
        self.params = params

    @property
    def lyapunov_time(self) -> float:
        return math.log(10.0) / self.lambda_max

    def rhs(self, u):
        return lorenz_rhs(u, self.params)

    def jacobian(self, u):
        return lorenz_jacobian(u, self.params)

    def jacobian_apply(self, u, V):
        return lorenz_jacobian(u, self.params) @ V

    def cspec(self):
        p = self.params
        return ("lorenz", p.sigma, p.rho, p.beta)

    def attractor_point(self) -> np.ndarray:
        """A point well inside the attractor (long transient)."""
        return LORENZ_ATTRACTOR_POINT.copy()

    def initial_condition(self) -> np.ndarray:
        """Default start for the MGRIT studies, see :data:`LORENZ_DEFAULT_IC`."""
        return LORENZ_DEFAULT_IC.copy()

    def spin_up(self, x0, t: float, h: float = 1e-3) -> np.ndarray:
        """Forward Euler from ``x0`` for ``round(t / h)`` steps."""
        x = np.array(x0, dtype=float)
        for _ in range(int(round(t / h))):
            x = x + h * self.rhs(x)
        return x


# 4th-order central stencils; offsets -3..3, entries scaled by 1/dx^k at use
STENCIL_D1 = np.array([0.0, 1.0, -8.0, 0.0, 8.0, -1.0, 0.0]) / 12.0
STENCIL_D2 = np.array([0.0, -1.0, 16.0, -30.0, 16.0, -1.0, 0.0]) / 12.0
STENCIL_D4 = np.array([-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0]) / 6.0
OFFSETS = np.arange(-3, 4)


def _circulant_apply(coeffs, v):
    out = np.zeros_like(v, dtype=float)
    for o, c in zip(OFFSETS, coeffs):
        if c != 0.0:
            out += c * np.roll(v, -o, axis=0)
    return out


def circulant_dense(coeffs, n: int) -> np.ndarray:
    D = np.zeros((n, n))
    for i in range(n):
        for o, c in zip(OFFSETS, coeffs):
            D[i, (i + o) % n] += c
    return D


@dataclass(frozen=True)
class KSDiscretization:
    """Periodic 4th-order finite differences on ``n_x`` points of ``[0, L)``."""

    L: float = 64.0
    n_x: int = 64
    c1: np.ndarray = field(init=False, repr=False, compare=False)
    c2: np.ndarray = field(init=False, repr=False, compare=False)
    c4: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_x < 7:
            raise ValueError("the 7-point stencil needs n_x >= 7")
        dx = self.dx
        object.__setattr__(self, "c1", STENCIL_D1 / dx)
        object.__setattr__(self, "c2", STENCIL_D2 / dx**2)
        object.__setattr__(self, "c4", STENCIL_D4 / dx**4)

    @property
    def dx(self) -> float:
        return self.L / self.n_x

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    def d1(self, v):
        return _circulant_apply(self.c1, v)

    def d2(self, v):
        return _circulant_apply(self.c2, v)

    def d4(self, v):
        return _circulant_apply(self.c4, v)

    def dense(self, which: str) -> np.ndarray:
        coeffs = {"D1": self.c1, "D2": self.c2, "D4": self.c4}[which]
        return circulant_dense(coeffs, self.n_x)


def ks_rhs(u, d: KSDiscretization) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return -d.d2(u) - d.d4(u) - u * d.d1(u)


def ks_jacobian_apply(u, V, d: KSDiscretization) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    V = np.asarray(V, dtype=float)
    lin = -d.d2(V) - d.d4(V)
    du = d.d1(u)
    if V.ndim == 1:
        return lin - du * V - u * d.d1(V)
    return lin - du[:, None] * V - u[:, None] * d.d1(V)


class KuramotoSivashinsky:
    banded = True
    half_bandwidth = 3
    lambda_max = 0.1

    def __init__(self, disc: KSDiscretization = KSDiscretization()):
        self.disc = disc
        self.n = disc.n_x

    @property
    def lyapunov_time(self) -> float:
        return math.log(10.0) / self.lambda_max

    def initial_condition(self) -> np.ndarray:
        return np.sin(2 * np.pi * self.disc.x / self.disc.L)

    def rhs(self, u):
        return ks_rhs(u, self.disc)

    def jacobian_apply(self, u, V):
        return ks_jacobian_apply(u, V, self.disc)

    def jacobian_rows(self, u) -> np.ndarray:
        """Periodic row-offset bands: ``rows[i, o + 3] = J[i, (i + o) % n]``."""
        d = self.disc
        u = np.asarray(u, dtype=float)
        rows = np.empty((self.n, 7))
        rows[:] = -(d.c2 + d.c4)
        rows -= u[:, None] * d.c1[None, :]
        rows[:, 3] -= d.d1(u)
        return rows

    def jacobian(self, u):
        from .linalg import rows_to_dense
        return rows_to_dense(self.jacobian_rows(u))

    def cspec(self):
        return ("ks", self.disc.n_x, self.disc.dx)


# (1, 1, 1) marched for 20 time units with classical RK4, h = 1e-3
LORENZ_ATTRACTOR_POINT = np.array([13.7932290895289, 12.951847113228158, 34.901636990552234])

# (1, 1, 1) after a 3 time-unit transient of forward Euler with h = 1e-3;
# Lorenz.spin_up((1, 1, 1), 3.0) reproduces it
LORENZ_DEFAULT_IC = np.array([-7.648012574062733, -6.7216742912591645, 27.222646750398678])
