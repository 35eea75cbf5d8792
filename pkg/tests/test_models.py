import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chronomg.models import (LORENZ_DEFAULT_IC, KSDiscretization, KuramotoSivashinsky, Lorenz,
                             LorenzParams, circulant_dense, lorenz_jacobian, lorenz_rhs)

finite = st.floats(-30, 30, allow_nan=False)


def test_lorenz_rhs_by_hand():
    # sigma = 10, rho = 28, beta = 8/3 at (1, 2, 3)
    f = lorenz_rhs(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(f, [10.0, 1 * (28 - 3) - 2, 1 * 2 - 8.0])


def test_lorenz_parameters():
    p = LorenzParams()
    assert (p.sigma, p.rho) == (10.0, 28.0)
    assert p.beta == pytest.approx(8 / 3)
    assert Lorenz().lyapunov_time == pytest.approx(np.log(10) / 0.9)


@given(arrays(float, 3, elements=finite))
def test_lorenz_jacobian_matches_differences(u):
    eps = 1e-6
    J = np.column_stack([(lorenz_rhs(u + eps * e) - lorenz_rhs(u - eps * e)) / (2 * eps)
                         for e in np.eye(3)])
    assert np.allclose(lorenz_jacobian(u), J, atol=1e-6)


def test_default_ic_is_reproducible():
    x = Lorenz().spin_up([1.0, 1.0, 1.0], 3.0)
    assert np.array_equal(x, LORENZ_DEFAULT_IC)


@pytest.mark.parametrize("which,k,order", [("d1", 1, 4), ("d2", 2, 4), ("d4", 4, 4)])
def test_ks_stencil_order(which, k, order):
    # error on sin(x) should drop like dx^order
    errs = []
    for n in (32, 64):
        d = KSDiscretization(L=2 * np.pi, n_x=n)
        exact = np.imag((1j) ** k * np.exp(1j * d.x))
        errs.append(np.abs(getattr(d, which)(np.sin(d.x)) - exact).max())
    assert np.log2(errs[0] / errs[1]) == pytest.approx(order, abs=0.2)


def test_ks_dense_operators_match_apply(rng):
    d = KSDiscretization(n_x=16)
    v = rng.standard_normal(16)
    for which in ("d1", "d2", "d4"):
        assert np.allclose(d.dense(which.upper()) @ v, getattr(d, which)(v))


def test_circulant_dense_wraps():
    c = np.array([0, 0, 1.0, 0, 0, 0, 0])  # offset -1
    D = circulant_dense(c, 5)
    assert D[0, 4] == 1.0 and D[1, 0] == 1.0


@given(arrays(float, 16, elements=st.floats(-3, 3)))
def test_ks_jacobian_matches_differences(u):
    ks = KuramotoSivashinsky(KSDiscretization(L=22.0, n_x=16))
    eps = 1e-6
    J = np.column_stack([(ks.rhs(u + eps * e) - ks.rhs(u - eps * e)) / (2 * eps)
                         for e in np.eye(16)])
    scale = max(1.0, np.abs(J).max())
    assert np.allclose(ks.jacobian(u), J, atol=1e-6 * scale)
    V = np.eye(16)[:, :3]
    assert np.allclose(ks.jacobian_apply(u, V), ks.jacobian(u) @ V)


def test_ks_small_grid_rejected():
    with pytest.raises(ValueError):
        KSDiscretization(n_x=6)


def test_ks_initial_condition():
    ks = KuramotoSivashinsky()
    u = ks.initial_condition()
    assert u.shape == (64,)
    assert u[0] == 0.0 and u[16] == pytest.approx(1.0)
