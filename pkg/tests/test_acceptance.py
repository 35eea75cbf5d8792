"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -s`` (or
``python tests/test_acceptance.py``); the lines are also collected into an
"acceptance criteria" section at the end of any pytest run.  Tolerances are
the pinned ones; a criterion that does not hold here fails rather than being
loosened.
"""

import os
import sys
import time

import numpy as np
import pytest

from chronomg.config import RunConfig, build_cycle
from chronomg.core import TimeGrid, ivp_forcing, sequential_solve
from chronomg.delta import fine_chain, newton_mode_solve
from chronomg.lyapunov import lowrank_delta, lv_tau, qr_iterate, random_orthonormal
from chronomg.mgrit import MGRITSolver
from chronomg.models import KSDiscretization, KuramotoSivashinsky, Lorenz
from chronomg.runner import setup, solve
from chronomg.steppers import (EULER_THETA_FAMILY, LOBATTO_B, LOBATTO_IIIC, ThetaEuler,
                               backward_euler, forward_euler, lobatto_iiic, match_stability,
                               rk2_stability, theta_for_euler, theta_lobatto_coarse)

LOR = Lorenz()

# iteration counts to reproduce; None marks a cell that is not a criterion
TABLE2 = {
    "MGRIT": {2: 10, 4: 13, 6: 17, 8: 64},
    "MGRIT+theta": {2: 4, 4: 5, 6: 6, 8: 7},
    "MGRIT+Delta": {2: 5, 4: 6, 6: 7, 8: 8, 10: 9},
    "MGRIT+Delta+theta": {2: 3, 4: 4, 6: 4, 8: 5},
}
TABLE3_DELTA_THETA_L7 = {2: 9, 4: 15, 6: 20, 8: 23}
ALGOS = {
    "MGRIT": {},
    "MGRIT+theta": {"theta": True},
    "MGRIT+Delta": {"delta": "full"},
    "MGRIT+Delta+theta": {"theta": True, "delta": "full"},
}


def lorenz_cfg(t_final, n_t=None, **kw):
    base = dict(problem="lorenz", t_final=t_final, n_t=n_t or int(2048 * t_final),
                coarsening=[2], tol=1e-10, max_iter=100, relaxation="F", cycle="V",
                initial_guess="zero")
    base.update(kw)
    return RunConfig(**base).validate()


def ks_cfg(**kw):
    base = dict(problem="ks", n_x=64, length=64.0, t_final=1, n_t=1024, levels=3,
                coarsening=[16, 4], relaxation="FCF", cycle="V", tol=1e-8, max_iter=100,
                theta=True, delta="lowrank", rank=9, delta_from=1,
                initial_guess="coarse-sequential-interpolated")
    base.update(kw)
    return RunConfig(**base).validate()


def cell(rep):
    if rep.status == "converged":
        return rep.iterations
    return "-" if rep.status == "stalled" else "*"


@pytest.fixture
def verdict(record_property):
    def record(n, ok, detail, skip=None):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        if skip:
            line += f"; SKIPPED part: {skip}"
        record_property("acceptance", line)
        print(line)
        assert ok, line
        if skip:
            pytest.skip(skip)
    return record


def test_c01_lorenz_spectrum(verdict):
    t0 = time.perf_counter()
    _, est = qr_iterate(forward_euler(LOR), LOR.initial_condition(), np.eye(3), h=1e-3,
                        n_steps=5_000_000)
    wall = time.perf_counter() - t0
    lam = est.exponents
    target, tol = np.array([0.9, 0.0, -14.0]), np.array([0.05, 0.05, 0.5])
    ok_each = np.abs(lam - target) <= tol
    ok_sum = abs(lam.sum() + 41 / 3) <= 0.5
    verdict(1, bool(ok_each.all() and ok_sum and wall < 120),
            f"lambda = ({lam[0]:.3f}, {lam[1]:.3f}, {lam[2]:.3f}), sum {lam.sum():.3f}, "
            f"within tol {ok_each.tolist()}, {wall:.1f} s")


def test_c02_theta_euler(verdict):
    fe = ThetaEuler(None, 1.0).stability_function()
    ok = theta_for_euler(2) == 0.75
    matched = match_stability(fe.with_power(2), EULER_THETA_FAMILY, p=1, k=1)[0]
    ok &= abs(matched - 0.75) <= 1e-12
    worst = 0.0
    for m in (2, 4, 8, 16):
        th = ThetaEuler(None, theta_for_euler(m)).stability_function().with_scale(m)
        worst = max(worst, np.abs(th.taylor(2) - fe.with_power(m).taylor(2)).max())
    ok &= worst <= 1e-12
    verdict(2, bool(ok), f"theta(2) = {theta_for_euler(2)}, matched {matched:.15f}, "
                         f"max coefficient gap {worst:.1e}")


def test_c03_table2(verdict):
    got, bad = {}, []
    for algo, cols in TABLE2.items():
        for tf, want in cols.items():
            rep, _ = solve(lorenz_cfg(tf, **ALGOS[algo]))
            got[algo, tf] = cell(rep)
            if not (isinstance(got[algo, tf], int) and abs(got[algo, tf] - want) <= 2):
                bad.append(f"{algo}@{tf}: {got[algo, tf]} vs {want}")
    for tf in (10, 12):
        rep, _ = solve(lorenz_cfg(tf))
        got["MGRIT", tf] = cell(rep)
        if rep.status != "stalled":
            bad.append(f"MGRIT@{tf}: {got['MGRIT', tf]} vs -")
    rows = "; ".join(f"{a}: " + "/".join(str(got[a, t]) for t in sorted(c) + ([10, 12] if a == "MGRIT" else []))
                     for a, c in TABLE2.items())
    verdict(3, not bad, rows + ("" if not bad else "  mismatches: " + ", ".join(bad)))


def test_c04_table3_multilevel(verdict):
    naive, dt, bad = [], [], []
    for tf, want in TABLE3_DELTA_THETA_L7.items():
        rep, _ = solve(lorenz_cfg(tf, levels=7))
        naive.append(cell(rep))
        if rep.status != "diverged":
            bad.append(f"MGRIT7@{tf}: {cell(rep)}")
        rep, _ = solve(lorenz_cfg(tf, levels=7, theta=True, delta="full"))
        dt.append(cell(rep))
        if not (rep.status == "converged" and abs(rep.iterations - want) <= 3):
            bad.append(f"MGRIT7+theta+Delta@{tf}: {cell(rep)} vs {want}")
    verdict(4, not bad, f"MGRIT7 {naive}; MGRIT7+theta+Delta {dt} (want 9/15/20/23 +-3)"
            + ("" if not bad else "  " + ", ".join(bad)))


def _block_newton(g, h, m, n_iter):
    nc = (len(g) - 1) // m + 1
    w = np.zeros((nc, 3))
    w[0] = g[0]
    out = []
    for _ in range(n_iter):
        new, e = w.copy(), np.zeros(3)
        for i in range(1, nc):
            x, F = w[i - 1], np.eye(3)
            for _ in range(m):
                F = (np.eye(3) + h * LOR.jacobian(x)) @ F
                x = x + h * LOR.rhs(x)
            e = F @ e - (w[i] - x)
            new[i] = w[i] + e
        w = new
        out.append(w.copy())
    return out


def test_c05_newton_equivalence(verdict):
    h, m, nt = 1e-3, 2, 64
    g = ivp_forcing(LOR.initial_condition(), nt + 1)
    rep = newton_mode_solve(g, forward_euler(LOR), TimeGrid(0.0, h, nt + 1), m,
                            tol=1e-13, max_iter=20)
    oracle = _block_newton(g, h, m, len(rep.iterates))
    gap = max(np.abs(a - b).max() for a, b in zip(rep.iterates, oracle))
    # order estimate log(r_{k+1}/r_k) / log(r_k/r_{k-1}) for every step that
    # starts below 1e-2; the 1e-13 halting tolerance stops the iteration
    # before the residual reaches round-off, so no step ends on the floor
    lr = np.log(rep.residuals)
    ratios = [(lr[k + 1] - lr[k]) / (lr[k] - lr[k - 1]) for k in range(1, len(lr) - 1)
              if rep.residuals[k] < 1e-2]
    ok = rep.status == "converged" and gap <= 1e-10 and ratios and all(1.7 < q < 2.3 for q in ratios)
    verdict(5, bool(ok), f"max iterate gap {gap:.1e}, residuals "
            + " ".join(f"{r:.1e}" for r in rep.residuals)
            + ", order estimates " + ", ".join(f"{q:.2f}" for q in ratios))


def _fixed_point_change(cfg):
    prob = setup(cfg)
    exact = sequential_solve(prob.hier.levels[0].stepper, prob.g, prob.grid)
    solver = MGRITSolver(prob.hier, build_cycle(cfg))
    solver.initialize(prob.g, exact)
    solver.cycle()
    return np.abs(solver.levels[0].u - exact).max() / np.abs(exact).max()


def fixed_point_matrix():
    for algo, opts in ALGOS.items():
        for levels in (2, 3):
            for relax in ("F", "FCF"):
                for cyc in ("V", "F"):
                    yield (f"lorenz {algo} L{levels} {relax} {cyc}",
                           lorenz_cfg(2, n_t=1024, levels=levels, relaxation=relax, cycle=cyc, **opts))
    yield "lorenz lowrank-2 L2", lorenz_cfg(2, n_t=1024, theta=True, delta="lowrank", rank=2)
    yield "ks naive L3", ks_cfg(theta=False, delta="off")
    yield "ks theta L3", ks_cfg(delta="off")
    yield "ks theta+Delta9 L3", ks_cfg()
    yield "ks theta+Delta9 L3 4,4", ks_cfg(coarsening=[4, 4])
    yield "ks theta+Delta9 L3 F-cycle", ks_cfg(cycle="F", lv_coarse=True)


def test_c06_fas_fixed_point(verdict):
    worst, name = 0.0, ""
    for label, cfg in fixed_point_matrix():
        change = _fixed_point_change(cfg)
        if change >= worst:
            worst, name = change, label
    verdict(6, worst <= 1e-12, f"largest relative change {worst:.1e} ({name}) over "
                               f"{sum(1 for _ in fixed_point_matrix())} configurations")


def test_c07_lv_tau_identity(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    fe, th = forward_euler(LOR), ThetaEuler(LOR, theta_for_euler(4))
    x = LOR.initial_condition()
    for _ in range(20):
        x = sequential_solve(fe, ivp_forcing(x, 400), TimeGrid(0.0, 1e-3, 400))[-1]
        psi = random_orthonormal(3, 2, rng)
        d = lowrank_delta(fe, th, x, psi, 4, 2e-3)
        _, Fm = fine_chain(fe, x, 4, 2e-3)
        worst = max(worst, np.linalg.norm(lv_tau(Fm, th.tangent(x, 0.0, 8e-3), d, psi)))
    ks = KuramotoSivashinsky(KSDiscretization(n_x=64))
    fine, coarse = lobatto_iiic(ks), theta_lobatto_coarse(4, ks)
    u = ks.initial_condition()
    for _ in range(5):
        u = sequential_solve(fine, ivp_forcing(u, 41), TimeGrid(0.0, 0.05, 41))[-1]
        psi = random_orthonormal(64, 9, rng)
        d = lowrank_delta(fine, coarse, u, psi, 4, 0.05)
        _, FmPsi = fine_chain(fine, u, 4, 0.05, V=psi)
        _, FcPsi = coarse.step_apply(u, 0.0, 0.2, psi)
        worst = max(worst, np.linalg.norm(lv_tau(lambda p: FmPsi, lambda p: FcPsi, d, psi)))
    verdict(7, worst <= 1e-12, f"max ||(F^m - F_c - Delta_hat) Psi|| = {worst:.1e} "
                               "over 20 Lorenz and 5 KS C-points")


def test_c08_stall_signature(verdict):
    naive, _ = solve(lorenz_cfg(8, n_t=16384, max_iter=30))
    r = np.array(naive.residuals)
    stall = [k for k in range(len(r) - 5)
             if r[k:k + 6].max() / r[k:k + 6].min() < 10 and r[k:k + 6].min() > 1e-6]
    fixed, _ = solve(lorenz_cfg(8, n_t=16384, max_iter=30, theta=True, delta="full"))
    ok = bool(stall) and fixed.status == "converged"
    verdict(8, ok, f"naive stalls from iteration {stall[0] if stall else None} "
                   f"(residual {r[stall[0]] if stall else float('nan'):.2e}); "
                   f"Delta+theta {fixed.status} in {fixed.iterations}")


def test_c09_ks_desk(verdict):
    on, _ = solve(ks_cfg())
    off, _ = solve(ks_cfg(delta="off"))
    ok = (on.status == "converged" and on.iterations <= 20
          and (off.status != "converged" or off.iterations > on.iterations))
    verdict(9, ok, f"theta+Delta9 {on.status} in {on.iterations}; "
                   f"Delta off {off.status} in {off.iterations}")


def _contour_taylor(f, order, r=0.05, n=64):
    w = r * np.exp(2j * np.pi * np.arange(n) / n)
    vals = np.array([f(x) for x in w])
    return np.array([np.real(np.mean(vals * w ** -j)) for j in range(order + 1)])


def test_c10_theta_lobatto(verdict):
    st_ = theta_lobatto_coarse(4)
    A = st_.A
    phi = rk2_stability(A)
    R = lambda A_, z: 1 + z * LOBATTO_B @ np.linalg.solve(np.eye(2) - z * A_, np.ones(2))
    coarse = _contour_taylor(lambda z: R(A, 4 * z), 3, r=0.01)
    fine = _contour_taylor(lambda z: R(LOBATTO_IIIC, z) ** 4, 3, r=0.01)
    gap = np.abs(coarse - fine).max()
    gap_series = np.abs(phi.with_scale(4).taylor(3)
                        - rk2_stability(LOBATTO_IIIC).with_power(4).taylor(3)).max()
    stiff = abs(phi.eval(-1e6))
    ok = abs(st_.theta_A - st_.theta_B) <= 1e-10 and stiff <= 1e-4 and max(gap, gap_series) <= 1e-10
    verdict(10, bool(ok), f"theta = ({st_.theta_A:.6f}, {st_.theta_B:.6f}, {st_.theta_C:.6f}), "
                          f"|phi(-1e6)| = {stiff:.1e}, Taylor gap {max(gap, gap_series):.1e}")


def test_c11_determinism_and_scaling(verdict):
    cfg = ks_cfg()
    hist, walls = {}, {}
    for w in (1, 2, 4, 8):
        t0 = time.perf_counter()
        rep, _ = solve(cfg, workers=w)
        walls[w] = time.perf_counter() - t0
        hist[w] = rep.residuals
    same = all(hist[w] == hist[1] for w in hist)
    cores = os.cpu_count() or 1
    if cores < 8:
        verdict(11, same, f"identical residual histories for workers 1/2/4/8: {same}",
                skip=f"wall-time comparison needs >= 8 cores, host has {cores}")
    verdict(11, same and walls[8] < walls[1],
            f"identical histories {same}; wall 1 worker {walls[1]:.2f} s, 8 workers {walls[8]:.2f} s")


def test_c12_theta_lyapunov(verdict):
    T = 5000.0
    x0 = LOR.initial_condition()
    lam = {"fe": [], "be": [], "theta": []}
    for m in (1, 2, 4, 8, 16):
        h = 1e-3 * m
        n = int(round(T / h))
        for key, st_ in (("fe", forward_euler(LOR)), ("be", backward_euler(LOR)),
                         ("theta", ThetaEuler(LOR, theta_for_euler(m)))):
            _, est = qr_iterate(st_, x0, np.eye(3)[:, :1], h=h, n_steps=n)
            lam[key].append(float(est.exponents[0]))
    ref = lam["fe"][0]
    theta_ok = all(abs(v - ref) <= 0.1 for v in lam["theta"])
    fe_up = all(b > a for a, b in zip(lam["fe"], lam["fe"][1:]))
    be_down = all(b < a for a, b in zip(lam["be"], lam["be"][1:]))
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)
    verdict(12, theta_ok and fe_up and be_down,
            f"h = 1e-3 x (1,2,4,8,16): theta {fmt(lam['theta'])} (ref {ref:.3f}), "
            f"FE {fmt(lam['fe'])}, BE {fmt(lam['be'])}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
