"""Bulk kernels with a compiled backend and a pure-Python fallback.

The compiled module is used when it imports and the propagator has a native
counterpart (``Propagator.ckernel()``); everything else runs through
:mod:`chronomg._pykernels`.  Set ``CHRONOMG_BACKEND=python`` to force the
fallback, or switch at runtime with :func:`use_backend`.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _pykernels
from ._pykernels import DegenerateBasisError
from .core import DivergenceError, StepperError

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None
    log.info("compiled kernels unavailable, using the Python fallback")

_STATUS = {1: "Newton iteration did not converge", 2: "singular Newton matrix",
           3: "non-finite state", 4: "rank-deficient basis"}


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def _initial_backend() -> str:
    want = os.environ.get("CHRONOMG_BACKEND", "").strip().lower()
    if want == "python" or _ckernels is None:
        return "python"
    return "compiled"


_backend = _initial_backend()


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("python", "compiled"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _ckernels is None:
        raise RuntimeError("the compiled kernels are not built")
    _backend = name


@contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def compile_stepper(stepper):
    """Native handle for ``stepper`` or False when there is none."""
    if _ckernels is None:
        return False
    try:
        return _ckernels.CStepper(stepper.cspec())
    except (AttributeError, ValueError, TypeError):
        return False


def _native(prop):
    if _backend != "compiled":
        return None
    return prop.ckernel()


@dataclass
class Correction:
    """Per-point linear correction ``x -> Delta_i x`` added to a coarse step.

    ``kind`` is ``"full"`` (``D[i]`` is n x n) or ``"lowrank"``
    (``Delta_i = P[i] Q[i]^T`` with n x k factors).  Entries are indexed by
    the destination point of the step.
    """

    kind: str
    D: np.ndarray | None = None
    P: np.ndarray | None = None
    Q: np.ndarray | None = None

    def apply(self, i: int, x):
        if self.kind == "full":
            return self.D[i] @ x
        return self.P[i] @ (self.Q[i].T @ x)


def _raise_status(status, index, its, res):
    if status == 3:
        raise DivergenceError(f"non-finite state at index {index}", index=int(index))
    if status == 4:
        raise DegenerateBasisError(f"rank-deficient basis at index {index}")
    raise StepperError(f"{_STATUS.get(status, 'stepper failure')} at index {index} "
                       f"(after {its} iterations, residual {res:.3e})",
                       index=int(index), iterations=int(its), residual=float(res))


def _propagate_chunk(prop, grid, U, G, starts, m, write, phi, corr, V, W):
    ck = _native(prop)
    if ck is None:
        _pykernels.propagate(prop, grid, U, G, starts, m, write, phi, corr, V, W)
        return
    kind = 0 if corr is None else (1 if corr.kind == "full" else 2)
    status, index, its, res = _ckernels.propagate(
        ck, grid.h, U, G, np.ascontiguousarray(starts, dtype=np.int64), m, write, phi, kind,
        None if corr is None else corr.D, None if corr is None else corr.P,
        None if corr is None else corr.Q, V, W)
    if status:
        _raise_status(status, index, its, res)


_pools: dict[int, ThreadPoolExecutor] = {}


def _pool(workers: int) -> ThreadPoolExecutor:
    if workers not in _pools:
        _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="chronomg")
    return _pools[workers]


def propagate(prop, grid, U, G, starts, m: int, write: bool = True, phi=None,
              corr: Correction | None = None, V=None, W=None, workers: int = 1):
    """Run ``m`` steps from each start point; intervals are independent.

    ``starts`` is split into contiguous chunks, one per worker.  No two
    chunks write the same point, so the result does not depend on
    ``workers``.  The first failure in interval order is re-raised.
    """
    starts = np.asarray(starts, dtype=np.int64)
    nint = len(starts)
    if nint == 0 or m == 0:
        return
    workers = max(1, min(int(workers), nint))
    if workers == 1:
        _propagate_chunk(prop, grid, U, G, starts, m, write, phi, corr, V, W)
        return
    bounds = np.linspace(0, nint, workers + 1).round().astype(int)
    futures = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if a == b:
            continue
        futures.append(_pool(workers).submit(
            _propagate_chunk, prop, grid, U, G, starts[a:b], m, write,
            None if phi is None else phi[a:b], corr,
            None if V is None else V[a:b], None if W is None else W[a:b]))
    errors = [f.exception() for f in futures]
    for e in errors:
        if e is not None:
            raise e


def step(prop, x, t, h, V=None):
    """A single step ``(Phi(x), D Phi(x) V)``; ``V`` may be None."""
    ck = _native(prop)
    x = np.ascontiguousarray(x, dtype=float)
    if ck is None:
        if V is None:
            return prop.step(x, t, h), None
        return prop.step_apply(x, t, h, V)
    y, W, status, its, res = ck.step(x, h, None if V is None else np.ascontiguousarray(V, dtype=float))
    if status:
        _raise_status(status, 1, its, res)
    return y, W


def mgs_qr(W):
    if _backend == "compiled":
        Q, rd, status = _ckernels.mgs_qr(np.ascontiguousarray(W, dtype=float))
        if status:
            raise DegenerateBasisError("rank-deficient basis in Gram-Schmidt")
        return Q, rd
    return _pykernels.mgs_qr(W)


def qr_run(prop, h, x, Q, n_steps, every=1, discard=0, traj=None, t0=0.0):
    ck = _native(prop)
    if ck is None:
        return _pykernels.qr_run(prop, h, x, Q, n_steps, every, discard, traj, t0)
    out = _ckernels.qr_run(ck, h, np.ascontiguousarray(x, dtype=float),
                           np.ascontiguousarray(Q, dtype=float), int(n_steps), int(every),
                           int(discard),
                           None if traj is None else np.ascontiguousarray(traj, dtype=float))
    x, Q, logsum, counted, status, index = out
    if status:
        _raise_status(status, index, 0, float("nan"))
    return x, Q, logsum, counted
