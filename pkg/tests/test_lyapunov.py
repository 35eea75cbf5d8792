import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chronomg.core import TimeGrid, ivp_forcing, sequential_solve
from chronomg.delta import compute_delta, fine_chain
from chronomg.lyapunov import (LVBasis, backward_lv_path, lowrank_delta, lv_tau, manifold_errors,
                               mgs_qr, principal_angle, qr_iterate, random_orthonormal)
from chronomg.mgrit import CycleConfig, LevelDescriptor, TimeHierarchy, mgrit_solve
from chronomg.models import KSDiscretization, KuramotoSivashinsky, Lorenz
from chronomg.steppers import ThetaEuler, forward_euler, lobatto_iiic, theta_lobatto_coarse

LOR = Lorenz()


class Diagonal:
    """``u' = diag(a) u``; no compiled counterpart, so it runs in Python."""

    banded = False

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)
        self.n = len(a)

    def rhs(self, u):
        return self.a * u

    def jacobian(self, u):
        return np.diag(self.a)

    def jacobian_apply(self, u, V):
        return self.a[:, None] * V


@given(st.integers(2, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_mgs_qr_properties(n, k, seed):
    k = min(n, k)
    W = np.random.default_rng(seed).standard_normal((n, k))
    Q, rd = mgs_qr(W)
    assert np.abs(Q.T @ Q - np.eye(k)).max() < 1e-12
    R = Q.T @ W
    assert np.allclose(np.tril(R, -1), 0, atol=1e-10)
    assert np.allclose(np.diag(R), rd) and np.all(rd > 0)


def test_diagonal_system_exponents(backend):
    # forward Euler multiplies mode i by 1 + h a_i each step
    a = np.array([-2.0, 0.5, -0.5])
    h = 0.01
    prop = forward_euler(Diagonal(a))
    _, est = qr_iterate(prop, np.ones(3), random_orthonormal(3, 3, 0), h=h, n_steps=4000)
    expected = np.sort(np.log(np.abs(1 + h * a)) / h)[::-1]
    assert np.allclose(est.exponents, expected, atol=2e-3)
    assert est.window == pytest.approx(20.0)


def test_qr_iterate_trajectory_and_state_agree():
    h = 1e-3
    x0 = LOR.initial_condition()
    traj = sequential_solve(forward_euler(LOR), ivp_forcing(x0, 2001), TimeGrid(0.0, h, 2001))
    b1, e1 = qr_iterate(forward_euler(LOR), traj, np.eye(3), h=h)
    b2, e2 = qr_iterate(forward_euler(LOR), x0, np.eye(3), h=h, n_steps=2000)
    assert np.allclose(e1.exponents, e2.exponents, atol=1e-10)
    assert b1.orthonormality_error() < 1e-12


def test_qr_iterate_input_checks():
    with pytest.raises(ValueError):
        qr_iterate(forward_euler(LOR), np.ones(3), np.ones((3, 2)), h=0.01, n_steps=10)
    with pytest.raises(ValueError):
        qr_iterate(forward_euler(LOR), np.ones(3), np.eye(3), h=None, n_steps=10)


def test_backward_lv_path_matches_qr_iterate():
    h = 1e-3
    x0 = LOR.initial_condition()
    traj = sequential_solve(forward_euler(LOR), ivp_forcing(x0, 501), TimeGrid(0.0, h, 501))
    psi0 = np.eye(3)[:, :2]
    path = backward_lv_path(forward_euler(LOR), traj, psi0, h)
    assert path.shape == (501, 3, 2)
    basis, _ = qr_iterate(forward_euler(LOR), traj, psi0, h=h)
    assert np.allclose(path[-1], basis.psi, atol=1e-12)
    assert LVBasis(path).orthonormality_error() < 1e-12


def test_manifold_errors():
    bases = np.zeros((4, 3, 2))
    bases[:, 0, 0] = 1.0
    bases[:, 1, 1] = 1.0
    err = np.tile([3.0, 4.0, 12.0], (4, 1))
    out = manifold_errors(err, bases, scale=2.0)
    assert np.allclose(out, [np.sqrt(4 * 9) / 2, np.sqrt(4 * 16) / 2])


def test_principal_angle():
    assert principal_angle(np.eye(3)[:, :2], np.eye(3)[:, [1, 0]]) == pytest.approx(0.0, abs=1e-6)
    assert principal_angle(np.eye(3)[:, 0], np.eye(3)[:, 1]) == pytest.approx(90.0)


def _lv_tau_norm(fine, coarse, v, psi, m, h):
    d = lowrank_delta(fine, coarse, v, psi, m, h)
    _, Fm = fine_chain(fine, v, m, h)
    Fc = coarse.tangent(v, 0.0, m * h)
    return np.abs(lv_tau(Fm, Fc, d, psi)).max() / max(1.0, np.abs(Fm).max())


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_lv_tau_identity_lorenz(seed, k):
    rng = np.random.default_rng(seed)
    v = LOR.attractor_point() + rng.standard_normal(3)
    psi = random_orthonormal(3, k, rng)
    assert _lv_tau_norm(forward_euler(LOR), ThetaEuler(LOR, 0.75), v, psi, 2, 5e-3) <= 1e-12


def test_lowrank_delta_is_full_delta_on_the_basis(rng):
    ks = KuramotoSivashinsky(KSDiscretization(n_x=32))
    v = ks.initial_condition() + 0.1 * rng.standard_normal(32)
    psi = random_orthonormal(32, 4, rng)
    fine, coarse = lobatto_iiic(ks), theta_lobatto_coarse(4, ks)
    d = lowrank_delta(fine, coarse, v, psi, 4, 0.05)
    full = compute_delta(fine, coarse, v, 4, 0.05)
    assert np.allclose(d.P, full.D @ psi, atol=1e-10)
    # Delta_hat agrees with Delta on span(Psi) and vanishes on its complement
    x = rng.standard_normal(32)
    x_perp = x - psi @ (psi.T @ x)
    assert np.abs(d.apply(x_perp)).max() < 1e-12


def test_lowrank_mgrit_reports_exponent_estimates():
    lor = Lorenz()
    nt = 2048
    grid = TimeGrid(0.0, 4 * lor.lyapunov_time / nt, nt + 1)
    hier = TimeHierarchy(grid, [
        LevelDescriptor(forward_euler(lor), 2, delta_mode="lowrank", rank=2),
        LevelDescriptor(ThetaEuler(lor, 0.75))])
    rep = mgrit_solve(hier, ivp_forcing(lor.initial_condition(), nt + 1),
                      CycleConfig(relaxation="FCF", halt_tol=1e-10))
    assert rep.status == "converged"
    assert rep.psi.shape == (nt // 2 + 1, 3, 2)
    assert LVBasis(rep.psi).orthonormality_error() < 1e-10
    assert rep.lyapunov_estimates is not None and len(rep.lyapunov_estimates) == 2
