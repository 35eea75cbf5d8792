import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chronomg.linalg import PeriodicBandedLU, dense_to_rows, rows_to_dense


@given(st.integers(7, 60), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_periodic_banded_solve_matches_dense(N, p, seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((N, 2 * p + 1))
    rows[:, p] += 4 * (2 * p + 1)  # diagonally dominant
    b = rng.standard_normal((N, 3))
    x = PeriodicBandedLU(rows).solve(b)
    assert np.allclose(x, np.linalg.solve(rows_to_dense(rows), b), rtol=1e-10, atol=1e-12)


def test_rows_roundtrip(rng):
    rows = rng.standard_normal((12, 7))
    assert np.array_equal(dense_to_rows(rows_to_dense(rows), 3), rows)


def test_ks_like_system(rng):
    # the shifted KS Jacobian is not diagonally dominant; pivoting must cope
    from chronomg.models import KuramotoSivashinsky
    ks = KuramotoSivashinsky()
    u = rng.standard_normal(64)
    rows = -0.05 * ks.jacobian_rows(u)
    rows[:, 3] += 1.0
    b = rng.standard_normal(64)
    x = PeriodicBandedLU(rows).solve(b)
    assert np.allclose(rows_to_dense(rows) @ x, b, atol=1e-9)


def test_singular_raises():
    rows = np.zeros((20, 7))
    with pytest.raises(np.linalg.LinAlgError):
        PeriodicBandedLU(rows).solve(np.ones(20))
