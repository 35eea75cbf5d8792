"""One-step integrators and the coarse-propagator construction.

Two families are provided:

* :class:`ThetaEuler` -- ``u1 = u0 + h [theta f(u0) + (1 - theta) f(u1)]``;
  ``theta = 1`` is forward Euler, ``theta = 0`` backward Euler.
* :class:`TwoStageRK` -- two-stage Runge-Kutta with ``b = (1/2, 1/2)``.
  :class:`ThetaLobatto` parameterizes its tableau by weights on the Lobatto
  IIIA, IIIB, IIIC and IIIC* tableaux.

Coarse members of either family are chosen by matching Taylor coefficients
of stability functions (:func:`match_stability`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import Propagator, StepperError
from .linalg import DenseLU, PeriodicBandedLU

log = logging.getLogger(__name__)


class MatchingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NewtonConfig:
    """Stopping rule for the stage equations: ``|G|_inf <= tol (1 + |u|_inf)``.

    ``predictor`` is ``"auto"`` (explicit Euler predictor when ``h |J|_inf <= 1``,
    the old state otherwise), ``"euler"`` or ``"none"``.
    """

    tol: float = 1e-12
    max_iter: int = 20
    predictor: str = "auto"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")
        if self.predictor not in ("auto", "euler", "none"):
            raise ValueError(f"unknown predictor {self.predictor!r}")


@dataclass
class NewtonInfo:
    converged: bool
    iterations: int
    residual: float


# ---------------------------------------------------------------------------
# power series and stability functions


def series_div(num, den, order: int) -> np.ndarray:
    num = np.concatenate([np.asarray(num, float), np.zeros(order + 1)])
    den = np.concatenate([np.asarray(den, float), np.zeros(order + 1)])
    c = np.zeros(order + 1)
    for k in range(order + 1):
        c[k] = (num[k] - np.dot(den[1:k + 1], c[k - 1::-1][:k])) / den[0]
    return c


def series_mul(a, b, order: int) -> np.ndarray:
    return np.convolve(a[:order + 1], b[:order + 1])[:order + 1]


def series_pow(a, m: int, order: int) -> np.ndarray:
    out = np.zeros(order + 1)
    out[0] = 1.0
    base = np.asarray(a, float)[:order + 1]
    while m:
        if m & 1:
            out = series_mul(out, base, order)
        base = series_mul(base, base, order)
        m >>= 1
    return out


@dataclass(frozen=True)
class StabilityFunction:
    """``phi(z) = (N(scale z) / D(scale z)) ** power`` for polynomials N, D.

    ``power = m`` gives the m-step function of a one-step method; ``scale = m``
    gives one step of size ``m h`` written in the fine variable ``z = h lam``.
    """

    num: tuple
    den: tuple
    power: int = 1
    scale: float = 1.0

    def __call__(self, z):
        return self.eval(z)

    def eval(self, z):
        w = self.scale * np.asarray(z, dtype=complex)
        val = np.polyval(self.num[::-1], w) / np.polyval(self.den[::-1], w)
        return val ** self.power

    def taylor(self, order: int) -> np.ndarray:
        c = series_div(self.num, self.den, order)
        c = series_pow(c, self.power, order)
        return c * self.scale ** np.arange(order + 1)

    def with_power(self, m: int) -> "StabilityFunction":
        return StabilityFunction(self.num, self.den, self.power * m, self.scale)

    def with_scale(self, s: float) -> "StabilityFunction":
        return StabilityFunction(self.num, self.den, self.power, self.scale * s)

    @property
    def stiff_limit(self) -> float:
        """``lim_{z -> -inf} phi(z)``."""
        num = np.trim_zeros(np.asarray(self.num, float), "b")
        den = np.trim_zeros(np.asarray(self.den, float), "b")
        if len(num) < len(den):
            return 0.0
        if len(num) > len(den):
            return math.inf
        return (num[-1] / den[-1]) ** self.power


# ---------------------------------------------------------------------------
# steppers


class _ImplicitBase(Propagator):
    def __init__(self, model, newton: NewtonConfig | None = None):
        self.model = model
        self.n = model.n if model is not None else None
        self.newton = newton or NewtonConfig()
        self._ck = None

    def _factor(self, rows_or_dense):
        if self.model.banded:
            return PeriodicBandedLU(rows_or_dense)
        return DenseLU(rows_or_dense)

    def _stiffness(self, x) -> float:
        if self.model.banded:
            return float(np.abs(self.model.jacobian_rows(x)).sum(axis=1).max())
        return float(np.abs(self.model.jacobian(x)).sum(axis=1).max())

    def _use_predictor(self, x, h) -> bool:
        mode = self.newton.predictor
        if mode == "auto":
            return h * self._stiffness(x) <= 1.0
        return mode == "euler"

    def step(self, u, t, h):
        return self._solve(np.asarray(u, dtype=float), h)[0]

    def step_apply(self, u, t, h, V):
        u = np.asarray(u, dtype=float)
        y, state, _ = self._solve(u, h)
        return y, self._apply_tangent(u, y, state, h, np.asarray(V, dtype=float))

    def ckernel(self):
        from . import kernels
        if self._ck is None:
            self._ck = kernels.compile_stepper(self)
        return self._ck or None


class ThetaEuler(_ImplicitBase):
    """``u1 = u0 + h [theta f(u0) + (1 - theta) f(u1)]``."""

    def __init__(self, model, theta: float, newton: NewtonConfig | None = None):
        if not 0.0 <= theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {theta}")
        super().__init__(model, newton)
        self.theta = float(theta)

    def __repr__(self):
        return f"ThetaEuler(theta={self.theta!r})"

    def stability_function(self) -> StabilityFunction:
        return StabilityFunction((1.0, self.theta), (1.0, -(1.0 - self.theta)))

    def _matrix(self, y, h):
        c = h * (1.0 - self.theta)
        if self.model.banded:
            rows = -c * self.model.jacobian_rows(y)
            rows[:, rows.shape[1] // 2] += 1.0
            return rows
        return np.eye(self.n) - c * self.model.jacobian(y)

    def _solve(self, x, h):
        f = self.model.rhs
        fx = f(x)
        if self.theta == 1.0:
            return x + h * fx, None, NewtonInfo(True, 0, 0.0)
        cfg = self.newton
        base = x + (h * self.theta) * fx
        y = x + h * fx if self._use_predictor(x, h) else x.copy()
        scale = cfg.tol * (1.0 + np.abs(x).max())
        c = h * (1.0 - self.theta)
        res = math.inf
        for it in range(cfg.max_iter + 1):
            G = y - base - c * f(y)
            res = float(np.abs(G).max())
            if res <= scale:
                return y, None, NewtonInfo(True, it, res)
            if not np.isfinite(res) or it == cfg.max_iter:
                break
            y = y - self._factor(self._matrix(y, h)).solve(G)
        raise StepperError(f"theta-Euler Newton failed after {it} iterations "
                           f"(residual {res:.3e})", iterations=it, residual=res)

    def _apply_tangent(self, x, y, state, h, V):
        JV = self.model.jacobian_apply(x, V)
        rhs = V + (h * self.theta) * JV
        if self.theta == 1.0:
            return rhs
        return self._factor(self._matrix(y, h)).solve(rhs)

    def cspec(self):
        cfg = self.newton
        return ("theta", self.model.cspec(), self.theta, cfg.tol, cfg.max_iter,
                cfg.predictor)


def forward_euler(model, newton=None) -> ThetaEuler:
    return ThetaEuler(model, 1.0, newton)


def backward_euler(model, newton=None) -> ThetaEuler:
    return ThetaEuler(model, 0.0, newton)


LOBATTO_B = np.array([0.5, 0.5])
LOBATTO_IIIA = np.array([[0.0, 0.0], [0.5, 0.5]])
LOBATTO_IIIB = np.array([[0.5, 0.0], [0.5, 0.0]])
LOBATTO_IIIC = np.array([[0.5, -0.5], [0.5, 0.5]])
LOBATTO_IIIC_STAR = np.array([[0.0, 0.0], [1.0, 0.0]])


def lobatto_tableau(theta_A: float, theta_B: float, theta_C: float) -> np.ndarray:
    """Affine blend; the corners (1,0,0), (0,1,0), (0,0,1), (0,0,0) are IIIA, IIIB, IIIC, IIIC*."""
    rest = 1.0 - theta_A - theta_B - theta_C
    return (theta_A * LOBATTO_IIIA + theta_B * LOBATTO_IIIB
            + theta_C * LOBATTO_IIIC + rest * LOBATTO_IIIC_STAR)


def rk2_stability(A, b=LOBATTO_B) -> StabilityFunction:
    A = np.asarray(A, float)
    B = A - np.outer(np.ones(2), b)
    num = (1.0, -np.trace(B), float(np.linalg.det(B)))
    den = (1.0, -np.trace(A), float(np.linalg.det(A)))
    return StabilityFunction(num, den)


class TwoStageRK(_ImplicitBase):
    """Two-stage Runge-Kutta method for autonomous systems.

    Stage values ``Y_i = u0 + h sum_j a_ij f(Y_j)`` are found by Newton on the
    coupled ``2 n`` system; ``u1 = u0 + h sum_j b_j f(Y_j)``.
    """

    def __init__(self, model, A, b=LOBATTO_B, newton: NewtonConfig | None = None):
        super().__init__(model, newton)
        self.A = np.array(A, dtype=float)
        self.b = np.array(b, dtype=float)
        if self.A.shape != (2, 2) or self.b.shape != (2,):
            raise ValueError("two-stage tableau expected")

    def __repr__(self):
        return f"TwoStageRK(A={self.A.tolist()!r})"

    @property
    def c(self) -> np.ndarray:
        return self.A.sum(axis=1)

    def stability_function(self) -> StabilityFunction:
        return rk2_stability(self.A, self.b)

    def _matrix(self, Y, h):
        A = self.A
        n = self.n
        if self.model.banded:
            J = [self.model.jacobian_rows(Y[0]), self.model.jacobian_rows(Y[1])]
            p = J[0].shape[1] // 2
            P = 2 * p + 1
            rows = np.zeros((2 * n, 2 * P + 1))
            for i in range(2):
                for j in range(2):
                    if A[i, j] == 0.0:
                        continue
                    for k in range(2 * p + 1):
                        o = k - p
                        rows[i::2, 2 * o + (j - i) + P] -= h * A[i, j] * J[j][:, k]
            rows[:, P] += 1.0
            return rows
        J0, J1 = self.model.jacobian(Y[0]), self.model.jacobian(Y[1])
        M = np.eye(2 * n)
        M[:n, :n] -= h * A[0, 0] * J0
        M[:n, n:] -= h * A[0, 1] * J1
        M[n:, :n] -= h * A[1, 0] * J0
        M[n:, n:] -= h * A[1, 1] * J1
        return M

    def _pack(self, Y):
        # banded systems interleave the two stages, dense ones stack them
        if self.model.banded:
            return np.ascontiguousarray(np.swapaxes(Y, 0, 1)).reshape(2 * self.n, *Y.shape[2:])
        return Y.reshape(2 * self.n, *Y.shape[2:])

    def _unpack(self, z):
        if self.model.banded:
            return np.swapaxes(z.reshape(self.n, 2, *z.shape[1:]), 0, 1)
        return z.reshape(2, self.n, *z.shape[1:])

    def _solve(self, x, h):
        f = self.model.rhs
        A, cfg = self.A, self.newton
        if self._use_predictor(x, h):
            fx = f(x)
            Y = np.stack([x + (h * ci) * fx for ci in self.c])
        else:
            Y = np.stack([x, x])
        scale = cfg.tol * (1.0 + np.abs(x).max())
        res = math.inf
        for it in range(cfg.max_iter + 1):
            F = np.stack([f(Y[0]), f(Y[1])])
            G = Y - x - h * (A @ F)
            res = float(np.abs(G).max())
            if res <= scale:
                y = x + h * (self.b @ F)
                return y, Y, NewtonInfo(True, it, res)
            if not np.isfinite(res) or it == cfg.max_iter:
                break
            lu = self._factor(self._matrix(Y, h))
            Y = Y - self._unpack(lu.solve(self._pack(G)))
        raise StepperError(f"two-stage RK Newton failed after {it} iterations "
                           f"(residual {res:.3e})", iterations=it, residual=res)

    def _apply_tangent(self, x, y, Y, h, V):
        lu = self._factor(self._matrix(Y, h))
        Z = self._unpack(lu.solve(self._pack(np.stack([V, V]))))
        W = V.copy()
        for j in range(2):
            if self.b[j] != 0.0:
                W += (h * self.b[j]) * self.model.jacobian_apply(Y[j], Z[j])
        return W

    def cspec(self):
        cfg = self.newton
        return ("rk2", self.model.cspec(), tuple(self.A.ravel()), tuple(self.b),
                cfg.tol, cfg.max_iter, cfg.predictor)


def lobatto_iiic(model, newton=None) -> TwoStageRK:
    return TwoStageRK(model, LOBATTO_IIIC, LOBATTO_B, newton)


class ThetaLobatto(TwoStageRK):
    def __init__(self, model, theta_A: float, theta_B: float, theta_C: float,
                 newton: NewtonConfig | None = None):
        super().__init__(model, lobatto_tableau(theta_A, theta_B, theta_C), LOBATTO_B, newton)
        self.theta_A, self.theta_B, self.theta_C = float(theta_A), float(theta_B), float(theta_C)

    def __repr__(self):
        return (f"ThetaLobatto(theta_A={self.theta_A!r}, theta_B={self.theta_B!r}, "
                f"theta_C={self.theta_C!r})")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.theta_A, self.theta_B, self.theta_C])

    def bind(self, model, newton=None) -> "ThetaLobatto":
        return ThetaLobatto(model, self.theta_A, self.theta_B, self.theta_C,
                            newton or self.newton)


def implicit_step(stepper, u, t, h, cfg: NewtonConfig | None = None):
    """One step of ``stepper`` with an explicit Newton configuration.

    Returns ``(u_next, NewtonInfo)``.
    """
    if cfg is not None and cfg != stepper.newton:
        saved, stepper.newton = stepper.newton, cfg
        try:
            y, _, info = stepper._solve(np.asarray(u, dtype=float), h)
        finally:
            stepper.newton = saved
    else:
        y, _, info = stepper._solve(np.asarray(u, dtype=float), h)
    return y, info


# ---------------------------------------------------------------------------
# stability matching


def theta_for_euler(m: int) -> float:
    """theta such that one theta-Euler step of size m h matches m forward-Euler
    steps through second order."""
    if m < 1:
        raise ValueError(f"coarsening factor must be >= 1, got {m}")
    return (m + 1) / (2 * m)


@dataclass(frozen=True)
class StepperFamily:
    """A parameterized family: ``stability(params)`` gives one step's function."""

    name: str
    n_params: int
    stability: callable = field(repr=False)
    start: tuple = ()


EULER_THETA_FAMILY = StepperFamily(
    "theta-euler", 1,
    lambda th: StabilityFunction((1.0, th[0]), (1.0, -(1.0 - th[0]))),
    start=(1.0,),
)

LOBATTO_FAMILY = StepperFamily(
    "theta-lobatto", 3,
    lambda th: rk2_stability(lobatto_tableau(*th)),
    start=(0.0, 0.0, 1.0),
)


def _coefficient_residual(family, params, target, m, lo, hi):
    # measured in powers of m z so the entries stay O(1) for large m
    coarse = family.stability(params).with_scale(m)
    scale = float(m) ** -np.arange(lo, hi + 1)
    return (coarse.taylor(hi)[lo:hi + 1] - target[lo:hi + 1]) * scale


def _newton_min_norm(fun, x0, tol, max_iter, extra=None):
    """Damped Gauss-Newton with minimum-norm steps and a central-difference Jacobian."""
    x = np.array(x0, dtype=float)
    for _ in range(max_iter):
        r = fun(x)
        if np.abs(r).max() <= tol:
            return x, r
        J = np.empty((len(r), len(x)))
        for j in range(len(x)):
            e = np.zeros(len(x))
            e[j] = 1e-6 * max(1.0, abs(x[j]))
            J[:, j] = (fun(x + e) - fun(x - e)) / (2 * e[j])
        dx = np.linalg.lstsq(J, r, rcond=None)[0]
        # backtrack until the residual norm drops
        nr = np.linalg.norm(r)
        step = 1.0
        while step > 1e-4:
            xn = x - step * dx
            if np.linalg.norm(fun(xn)) < nr:
                break
            step *= 0.5
        x = xn
    r = fun(x)
    return x, r


def match_stability(phi_m: StabilityFunction, family: StepperFamily, p: int, k: int,
                    m: int | None = None, x0=None, tol: float = 1e-13,
                    max_iter: int = 50) -> np.ndarray:
    """Parameters making one coarse step match ``phi_m`` through order ``p + k``.

    The residual is the vector of Taylor coefficients of ``phi_theta(m z) -
    phi_m(z)`` at orders ``0..p+k``; it is driven to zero by minimum-norm Newton
    starting from ``x0`` (by default the family's fine member).
    """
    m = phi_m.power if m is None else m
    order = p + k
    target = phi_m.taylor(order)
    fun = lambda th: _coefficient_residual(family, th, target, m, 0, order)
    start = family.start if x0 is None else x0
    x, r = _newton_min_norm(fun, start, tol, max_iter)
    if not np.all(np.isfinite(x)) or np.abs(r).max() > 1e-12:
        raise MatchingError(f"{family.name}: no parameters match order {order} "
                            f"(residual {np.abs(r).max():.2e})")
    return x


def is_a_stable(phi: StabilityFunction, radius: float = 1e4, n: int = 400) -> bool:
    """Sampled check of ``|phi| <= 1`` on the imaginary axis and the left half-plane."""
    y = np.concatenate([-np.geomspace(1e-4, radius, n), [0.0], np.geomspace(1e-4, radius, n)])
    if np.any(np.abs(phi.eval(1j * y)) > 1 + 1e-12):
        return False
    re = -np.geomspace(1e-4, radius, n // 4)
    zz = re[:, None] + 1j * y[None, ::8]
    return bool(np.all(np.abs(phi.eval(zz)) <= 1 + 1e-12))


def theta_lobatto_coarse(m: int, model=None, newton: NewtonConfig | None = None,
                         tol: float = 1e-13) -> ThetaLobatto:
    """Coarse two-stage method for ``m`` steps of Lobatto IIIC.

    Three conditions fix the three weights: the step's stability function
    vanishes at ``z -> -inf`` (zero ``z^2`` numerator coefficient), matches the
    m-step IIIC function through third order in ``m z``, and ``theta_A = theta_B``.
    """
    if m < 2:
        raise ValueError("coarse construction needs m >= 2")
    target = rk2_stability(LOBATTO_IIIC).with_power(m).taylor(3)

    def fun(th):
        phi = rk2_stability(lobatto_tableau(*th))
        coeff = _coefficient_residual(LOBATTO_FAMILY, th, target, m, 3, 3)
        return np.array([coeff[0], phi.num[2], th[0] - th[1]])

    x, r = _newton_min_norm(fun, LOBATTO_FAMILY.start, tol, 50)
    ok = np.all(np.isfinite(x)) and np.abs(r).max() <= 1e-12
    if ok:
        phi = rk2_stability(lobatto_tableau(*x))
        ok = is_a_stable(phi) and abs(phi.eval(-1e6)) <= 1e-4
    if not ok:
        log.warning("theta-Lobatto matching failed for m=%d; using Lobatto IIIC", m)
        x = np.array(LOBATTO_FAMILY.start)
    return ThetaLobatto(model, *x, newton=newton)

