"""Compare the compiled kernels with the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--csv out.csv]

Each case runs once per backend on identical inputs; the table reports the
best wall time over ``--repeat`` runs, the speedup of the compiled backend,
and the largest relative difference between the two outputs.
"""

from __future__ import annotations

import argparse
import csv
import time

import numpy as np

from chronomg import kernels
from chronomg.core import TimeGrid
from chronomg.models import KSDiscretization, KuramotoSivashinsky, Lorenz
from chronomg.steppers import forward_euler, lobatto_iiic, theta_lobatto_coarse


def _propagate_case(stepper, x0, n_points, m, h, k):
    n = len(x0)
    grid = TimeGrid(0.0, h, n_points)
    starts = np.arange(0, n_points - 1, m)
    rng = np.random.default_rng(1)
    U0 = np.tile(x0, (n_points, 1)) + 1e-3 * rng.standard_normal((n_points, n))
    G = np.zeros((n_points, n))
    V = None
    if k:
        q = np.linalg.qr(rng.standard_normal((n, k)))[0]
        V = np.ascontiguousarray(np.broadcast_to(q, (len(starts), n, k)))

    def run():
        U = U0.copy()
        phi = np.empty((len(starts), n))
        W = None if V is None else np.empty_like(V)
        kernels.propagate(stepper, grid, U, G, starts, m, True, phi, None, V, W)
        return U if W is None else np.concatenate([U.ravel(), W.ravel()])

    return run


def _qr_case(stepper, x0, h, n_steps, k):
    Q0 = np.eye(len(x0))[:, :k]

    def run():
        x, Q, logsum, _ = kernels.qr_run(stepper, h, x0, Q0, n_steps)
        return np.concatenate([x, logsum])

    return run


def _mgs_case(n, k, count):
    rng = np.random.default_rng(2)
    Ws = rng.standard_normal((count, n, k))

    def run():
        return np.concatenate([kernels.mgs_qr(W)[0].ravel() for W in Ws])

    return run


def cases():
    lor = Lorenz()
    x = lor.initial_condition()
    ks = KuramotoSivashinsky(KSDiscretization(n_x=64))
    u = ks.initial_condition()
    return {
        "propagate lorenz FE (4097 pts)": _propagate_case(forward_euler(lor), x, 4097, 2, 1e-3, 0),
        "propagate lorenz FE + 3 tangents": _propagate_case(forward_euler(lor), x, 4097, 2, 1e-3, 3),
        "propagate KS Lobatto IIIC (257 pts)": _propagate_case(lobatto_iiic(ks), u, 257, 16, 0.02, 0),
        "propagate KS theta-Lobatto + 9 tangents": _propagate_case(
            theta_lobatto_coarse(4, ks), u, 65, 4, 0.08, 9),
        "qr_run lorenz FE (20000 steps)": _qr_case(forward_euler(lor), x, 1e-3, 20000, 3),
        "mgs_qr 64x9 (2000 bases)": _mgs_case(64, 9, 2000),
    }


def bench(repeat: int = 3):
    rows = []
    for name, fn in cases().items():
        times, outs = {}, {}
        for be in kernels.available_backends():
            with kernels.use_backend(be):
                best = np.inf
                for _ in range(repeat):
                    t0 = time.perf_counter()
                    outs[be] = fn()
                    best = min(best, time.perf_counter() - t0)
                times[be] = best
        py, c = times["python"], times.get("compiled", np.nan)
        diff = np.nan
        if "compiled" in outs:
            a, b = outs["python"], outs["compiled"]
            diff = float(np.abs(a - b).max() / max(1.0, np.abs(a).max()))
        rows.append((name, py, c, py / c, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    if "compiled" not in kernels.available_backends():
        print("compiled kernels are not built; only the Python timings are shown")
    rows = bench(args.repeat)
    print(f"{'case':42s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s} {'max rel diff':>13s}")
    for name, py, c, sp, d in rows:
        print(f"{name:42s} {py:10.4f} {c:11.5f} {sp:8.1f} {d:13.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["case", "python_s", "compiled_s", "speedup", "max_rel_diff"])
            wr.writerows(rows)


if __name__ == "__main__":
    main()
