"""The compiled kernels and the Python fallback must agree to round-off."""

import numpy as np
import pytest

from chronomg import kernels
from chronomg.core import StepperError, TimeGrid
from chronomg.kernels import Correction
from chronomg.models import KSDiscretization, KuramotoSivashinsky, Lorenz
from chronomg.steppers import (ThetaEuler, backward_euler, forward_euler, lobatto_iiic,
                               theta_lobatto_coarse)

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled kernels not built")


def _both(fn):
    out = {}
    for be in ("python", "compiled"):
        with kernels.use_backend(be):
            out[be] = fn()
    return out["python"], out["compiled"]


def _propagate(prop, n, N, m, h, x0, k, corr, seed=0, workers=1):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(0.0, h, N)
    U0 = np.zeros((N, n))
    U0[::m] = x0 + 0.01 * rng.standard_normal((len(U0[::m]), n))
    G = 1e-3 * rng.standard_normal((N, n))
    starts = np.arange(0, N - 1, m)

    def run():
        U = U0.copy()
        phi = np.zeros((len(starts), n))
        V = np.ascontiguousarray(np.broadcast_to(np.eye(n)[:, :k], (len(starts), n, k)))
        W = np.zeros_like(V)
        kernels.propagate(prop, grid, U, G, starts, m, True, phi, corr, V, W, workers)
        return U, phi, W

    return run


def _close(a, b, tol=1e-12):
    for x, y in zip(a, b):
        assert np.abs(x - y).max() <= tol * max(1.0, np.abs(x).max())


LOR = Lorenz()
KS = KuramotoSivashinsky()


@needs_compiled
@pytest.mark.parametrize("make", [forward_euler, backward_euler, lobatto_iiic,
                                  lambda m: ThetaEuler(m, 0.75),
                                  lambda m: theta_lobatto_coarse(4, m)])
def test_lorenz_propagate_parity(make):
    _close(*_both(_propagate(make(LOR), 3, 65, 4, 0.01, LOR.attractor_point(), 3, None)))


@needs_compiled
@pytest.mark.parametrize("make", [lobatto_iiic, backward_euler, lambda m: ThetaEuler(m, 0.6),
                                  lambda m: theta_lobatto_coarse(4, m)])
def test_ks_propagate_parity(make):
    _close(*_both(_propagate(make(KS), 64, 17, 4, 0.1, KS.initial_condition(), 9, None)))


@needs_compiled
def test_small_ks_grid_uses_dense_path():
    ks = KuramotoSivashinsky(KSDiscretization(L=20, n_x=12))
    _close(*_both(_propagate(lobatto_iiic(ks), 12, 9, 4, 0.05, np.sin(np.arange(12)), 3, None)))


@needs_compiled
def test_corrections_parity(rng):
    N = 65
    full = Correction("full", D=0.01 * rng.standard_normal((N, 3, 3)))
    _close(*_both(_propagate(ThetaEuler(LOR, 0.75), 3, N, 4, 0.01, LOR.attractor_point(), 3, full)))
    Q = np.linalg.qr(rng.standard_normal((3, 2)))[0]
    low = Correction("lowrank", P=0.01 * rng.standard_normal((N, 3, 2)),
                     Q=np.ascontiguousarray(np.broadcast_to(Q, (N, 3, 2))))
    _close(*_both(_propagate(ThetaEuler(LOR, 0.75), 3, N, 4, 0.01, LOR.attractor_point(), 2, low)))


@needs_compiled
def test_qr_run_and_mgs_parity(rng):
    x = LOR.initial_condition()
    a, b = _both(lambda: kernels.qr_run(forward_euler(LOR), 1e-3, x, np.eye(3), 5000, 1, 2500))
    _close(a[:3], b[:3], 1e-11)
    assert a[3] == b[3] == 2500
    W = rng.standard_normal((40, 9))
    _close(*_both(lambda: kernels.mgs_qr(W)))


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_workers_do_not_change_results(backend, workers):
    args = (lobatto_iiic(KS), 64, 33, 4, 0.1, KS.initial_condition(), 2, None)
    ref = _propagate(*args)()
    out = _propagate(*args, workers=workers)()
    assert all(np.array_equal(a, b) for a, b in zip(ref, out))


def test_newton_failure_is_reported(backend):
    grid = TimeGrid(0.0, 50.0, 3)
    U = np.zeros((3, 64))
    U[0] = 40 * KS.initial_condition()
    with pytest.raises(StepperError):
        kernels.propagate(lobatto_iiic(KS), grid, U, np.zeros((3, 64)), [0], 2, True,
                          np.zeros((1, 64)))


def test_backend_switching():
    prev = kernels.backend()
    with kernels.use_backend("python"):
        assert kernels.backend() == "python"
    assert kernels.backend() == prev
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
