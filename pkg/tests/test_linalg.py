import numpy as np
import pytest

from duobeam.linalg import (SingularMatrix, condition_number, herm_inverse,
                            herm_solve, hermitianize, is_psd, min_eigval,
                            outer, trace)


def gauss_solve(A, b):
    """Independent dense-solve oracle: elimination with partial pivoting."""
    A = np.array(A, dtype=np.complex128)
    b = np.array(b, dtype=np.complex128)
    n = A.shape[0]
    x = b.copy()
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        for row in range(col + 1, n):
            f = A[row, col] / A[col, col]
            A[row, col:] -= f * A[col, col:]
            x[row] -= f * x[col]
    for col in range(n - 1, -1, -1):
        x[col] -= A[col, col + 1:] @ x[col + 1:]
        x[col] /= A[col, col]
    return x


def random_hpd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (A @ A.conj().T + n * np.eye(n))


def test_identity_solve():
    b = np.zeros(3, dtype=np.complex128)
    b[1] = 1.0
    x = herm_solve(np.eye(3, dtype=np.complex128), b, loading=0.0)
    np.testing.assert_allclose(x, b, atol=1e-14)


def test_scalar_diagonal_solve():
    x = herm_solve(2.0 * np.eye(2), np.array([1.0, 1.0]), loading=0.0)
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-14)


def test_solve_matches_elimination_oracle():
    rng = np.random.default_rng(7)
    A = random_hpd(rng, 5)
    b = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    expected = gauss_solve(A, b)
    got = herm_solve(A, b, loading=0.0)
    np.testing.assert_allclose(got, expected, rtol=1e-8)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 10])
def test_solve_recovers_known_solution(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        A = random_hpd(rng, n)
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        got = herm_solve(A, A @ x, loading=0.0)
        np.testing.assert_allclose(got, x, rtol=1e-8)


def test_solve_matrix_rhs_and_batch():
    rng = np.random.default_rng(3)
    A = np.stack([random_hpd(rng, 4) for _ in range(6)])
    B = rng.standard_normal((6, 4, 2)) + 1j * rng.standard_normal((6, 4, 2))
    X = herm_solve(A, B, loading=0.0)
    np.testing.assert_allclose(A @ X, B, rtol=0, atol=1e-9 * np.abs(B).max())


def test_loading_is_relative_to_mean_diagonal():
    rng = np.random.default_rng(5)
    A = random_hpd(rng, 4)
    b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    loading = 0.01
    x = herm_solve(A, b, loading=loading)
    d = np.mean(np.abs(np.diag(A)))
    expected = np.linalg.solve(A + loading * d * np.eye(4), b)
    np.testing.assert_allclose(x, expected, rtol=1e-10)


def test_loading_invariant_to_signal_level():
    # The same system scaled by 1e6 must give the scaled solution.
    rng = np.random.default_rng(6)
    A = random_hpd(rng, 4)
    b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    x1 = herm_solve(A, b, loading=1e-4)
    x2 = herm_solve(1e6 * A, b, loading=1e-4)
    np.testing.assert_allclose(x1, 1e6 * x2, rtol=1e-10)


def test_singular_raises():
    A = np.zeros((3, 3), dtype=np.complex128)
    with pytest.raises(SingularMatrix):
        herm_solve(A, np.ones(3), loading=0.0)


def test_singular_rescued_by_loading():
    A = np.zeros((3, 3), dtype=np.complex128)
    x = herm_solve(A + np.diag([1.0, 1.0, 0.0]), np.array([1.0, 1.0, 0.0]),
                   loading=1e-3)
    assert np.all(np.isfinite(x))


def test_herm_inverse():
    rng = np.random.default_rng(11)
    A = random_hpd(rng, 5)
    Ainv = herm_inverse(A)
    np.testing.assert_allclose(A @ Ainv, np.eye(5), atol=1e-9)


def test_hermitianize_definition():
    A = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=np.complex128)
    np.testing.assert_allclose(hermitianize(A),
                               [[0.0, 0.5], [0.5, 0.0]], atol=0)


def test_hermitianize_fixes_and_preserves():
    rng = np.random.default_rng(13)
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    H = hermitianize(A)
    np.testing.assert_array_equal(H, H.conj().T)
    # Idempotent, and Hermitian inputs survive to the last ulp.
    np.testing.assert_array_equal(hermitianize(H), H)


def test_trace_and_outer():
    rng = np.random.default_rng(17)
    x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    xx = outer(x)
    np.testing.assert_allclose(np.asarray(trace(xx)),
                               np.vdot(x, x), rtol=1e-12)
    np.testing.assert_allclose(xx, np.outer(x, x.conj()), rtol=1e-12)


def test_psd_checks():
    rng = np.random.default_rng(19)
    A = random_hpd(rng, 4)
    assert bool(is_psd(A))
    assert min_eigval(A) > 0
    B = A - 10.0 * np.trace(A).real / 4 * np.eye(4)
    assert not bool(is_psd(B))


def test_condition_number():
    d = np.diag([1.0, 10.0, 100.0]).astype(np.complex128)
    assert np.isclose(condition_number(d), 100.0)
