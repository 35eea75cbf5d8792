import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chronomg.core import TimeGrid, ZeroPropagator, ivp_forcing, sequential_solve
from chronomg.delta import (CorrectedPropagator, compute_delta, delta_step, delta_step_tangent,
                            fine_chain, full_delta_from_tangents, modified_fas_residual,
                            newton_mode_solve)
from chronomg.mgrit import CycleConfig, LevelDescriptor, TimeHierarchy, mgrit_solve
from chronomg.models import Dahlquist, Lorenz
from chronomg.steppers import ThetaEuler, backward_euler, forward_euler, theta_for_euler

LOR = Lorenz()
state = arrays(float, 3, elements=st.floats(-20, 20)).map(lambda x: x + [0, 0, 25])


def block_newton_oracle(g, h, m, n_iter):
    """Newton on the C-point system ``w_i = F^m(w_{i-1})`` with hand-rolled
    forward Euler and its Jacobian; starts from the zero guess."""
    nc = (len(g) - 1) // m + 1
    w = np.zeros((nc, 3))
    w[0] = g[0]

    def fm(x):
        W = np.eye(3)
        for _ in range(m):
            W = (np.eye(3) + h * LOR.jacobian(x)) @ W
            x = x + h * LOR.rhs(x)
        return x, W

    out = []
    for _ in range(n_iter):
        new = w.copy()
        e = np.zeros(3)
        for i in range(1, nc):
            y, F = fm(w[i - 1])
            e = F @ e - (w[i] - y)
            new[i] = w[i] + e
        w = new
        out.append(w.copy())
    return out


def test_newton_mode_matches_block_newton(backend):
    h, m, nt = 1e-3, 2, 64
    grid = TimeGrid(0.0, h, nt + 1)
    g = ivp_forcing(LOR.initial_condition(), nt + 1)
    rep = newton_mode_solve(g, forward_euler(LOR), grid, m, tol=1e-13, max_iter=20)
    assert rep.status == "converged"
    oracle = block_newton_oracle(g, h, m, len(rep.iterates))
    for a, b in zip(rep.iterates, oracle):
        assert np.abs(a - b).max() <= 1e-10


@given(state, st.sampled_from([2, 4, 8]))
def test_corrected_step_has_the_fine_tangent(v, m):
    h = 2e-3
    fe = forward_euler(LOR)
    coarse = ThetaEuler(LOR, theta_for_euler(m))
    d = compute_delta(fe, coarse, v, m, h)
    _, Fm = fine_chain(fe, v, m, h)
    assert np.allclose(delta_step_tangent(coarse, d, v, 0.0, m * h), Fm, atol=1e-10)
    assert np.allclose(delta_step(coarse, d, v, 0.0, m * h),
                       coarse.step(v, 0.0, m * h) + d.D @ v)


def test_full_delta_indexing():
    Fm = np.arange(2 * 9.0).reshape(2, 3, 3)
    Fc = np.ones((2, 3, 3))
    corr = full_delta_from_tangents(Fm, Fc)
    assert not corr.D[0].any()
    assert np.array_equal(corr.D[2], Fm[1] - 1)
    grid = TimeGrid(0.0, 0.5, 3)
    cp = CorrectedPropagator(ZeroPropagator(3), corr, grid)
    x = np.array([1.0, 0.0, 0.0])
    # a step starting at t = 0.5 lands on point 2
    assert np.array_equal(cp.step(x, 0.5, 0.5), corr.D[2] @ x)


def test_linear_problem_converges_in_one_cycle(backend):
    # Delta makes the coarse operator exact for a linear problem
    dq = Dahlquist(-3.0)
    nt, m = 64, 4
    grid = TimeGrid(0.0, 0.02, nt + 1)
    hier = TimeHierarchy(grid, [LevelDescriptor(forward_euler(dq), m, delta_mode="full"),
                                LevelDescriptor(backward_euler(dq))])
    rep = mgrit_solve(hier, ivp_forcing(1.0, nt + 1), CycleConfig(halt_tol=1e-13))
    assert rep.status == "converged" and rep.iterations == 1


def test_modified_fas_residual_vanishes_at_the_fine_solution():
    h, m, nt = 2e-3, 4, 32
    grid = TimeGrid(0.0, h, nt + 1)
    fe = forward_euler(LOR)
    g = ivp_forcing(LOR.initial_condition(), nt + 1)
    u = sequential_solve(fe, g, grid)
    cgrid = grid.coarsen(m)
    coarse = ThetaEuler(LOR, theta_for_euler(m))
    v = u[::m]
    nint = len(v) - 1
    Fm = np.empty((nint, 3, 3))
    Fc = np.empty((nint, 3, 3))
    tau = np.empty((nint, 3))
    for i in range(nint):
        y, Fm[i] = fine_chain(fe, v[i], m, h)
        yc = coarse.step(v[i], cgrid.time(i), cgrid.h)
        Fc[i] = coarse.tangent(v[i], cgrid.time(i), cgrid.h)
        tau[i] = y - yc
    corr = full_delta_from_tangents(Fm, Fc)
    r = modified_fas_residual(v, coarse, corr, g[::m], tau, v, cgrid)
    assert np.abs(r).max() < 1e-12
    # but not at a perturbed state
    w = v + 1e-3
    r2 = modified_fas_residual(w, coarse, corr, g[::m], tau, v, cgrid)
    assert np.abs(r2).max() > 1e-4


def test_full_delta_size_limit():
    big = np.zeros((1, 65, 65))
    with pytest.raises(ValueError):
        full_delta_from_tangents(big, big)
