"""Periodic banded LU and the small helpers around it.

Periodic band matrices are stored row-wise: ``rows[i, o + p] = A[i, (i + o) % N]``
for offsets ``-p <= o <= p``.  The factorization splits off the last ``p``
unknowns; the leading ``(N - p)`` block is then an ordinary band matrix
(LAPACK ``gbtrf``) and the wrap-around corners end up in a ``p x p`` Schur
complement.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def rows_to_dense(rows: np.ndarray) -> np.ndarray:
    N, w = rows.shape
    p = w // 2
    A = np.zeros((N, N))
    idx = np.arange(N)
    for k in range(w):
        np.add.at(A, (idx, (idx + k - p) % N), rows[:, k])
    return A


def dense_to_rows(A: np.ndarray, p: int) -> np.ndarray:
    N = A.shape[0]
    idx = np.arange(N)
    return np.stack([A[idx, (idx + o) % N] for o in range(-p, p + 1)], axis=1)


class DenseLU:
    def __init__(self, A: np.ndarray):
        self.n = A.shape[0]
        self._lu = sla.lu_factor(A, check_finite=False)
        if np.any(np.diag(self._lu[0]) == 0.0):
            raise SingularMatrixError("singular matrix in dense LU")

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self._lu, b, check_finite=False)


class PeriodicBandedLU:
    """LU of a periodic band matrix with half-bandwidth ``p``."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=float)
        N, w = rows.shape
        p = w // 2
        self.N, self.p = N, p
        if N < 4 * p + 2:
            # too small for the corner split to pay off
            self._dense = DenseLU(rows_to_dense(rows))
            return
        self._dense = None
        M = N - p
        kl = ku = p
        ab = np.zeros((2 * kl + ku + 1, M))
        for k in range(w):
            o = k - p
            # A[i, i + o] -> ab[kl + ku - o, i + o]
            i = np.arange(max(0, -o), min(M, M - o))
            ab[kl + ku - o, i + o] = rows[i, k]
        lu, piv, info = lapack.dgbtrf(ab, kl, ku)
        if info > 0:
            raise SingularMatrixError("singular band block in periodic LU")
        self._ab, self._piv = lu, piv
        # border blocks, dense
        A12 = np.zeros((M, p))
        A21 = np.zeros((p, M))
        A22 = np.zeros((p, p))
        for i in range(N):
            for k in range(w):
                j = (i + k - p) % N
                if i < M and j >= M:
                    A12[i, j - M] += rows[i, k]
                elif i >= M and j < M:
                    A21[i - M, j] += rows[i, k]
                elif i >= M and j >= M:
                    A22[i - M, j - M] += rows[i, k]
        X = self._band_solve(A12)
        self._X, self._A21 = X, A21
        self._S = DenseLU(A22 - A21 @ X)

    def _band_solve(self, b):
        x, info = lapack.dgbtrs(self._ab, self.p, self.p, b, self._piv)
        return x

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense.solve(b)
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        B = b[:, None] if vec else b
        M = self.N - self.p
        y1 = self._band_solve(np.ascontiguousarray(B[:M]))
        x2 = self._S.solve(B[M:] - self._A21 @ y1)
        x1 = y1 - self._X @ x2
        x = np.vstack([x1, x2])
        return x[:, 0] if vec else x
