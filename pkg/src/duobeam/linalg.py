"""Small dense complex-matrix kernels shared by every stage of the engine.

All routines operate on the last two axes, so a stack of per-frequency
matrices with shape [F, M, M] is handled in a single call.  Matrices stay
tiny (M <= 8, MK <= 64) and everything runs in double precision complex.
"""

import numpy as np

__all__ = [
    "SingularMatrix",
    "hermitianize",
    "herm_solve",
    "herm_inverse",
    "trace",
    "outer",
    "min_eigval",
    "is_psd",
    "condition_number",
]

# Relative residual accepted from a linear solve before the system is
# declared singular.
_RESIDUAL_TOL = 1e-8
_CONDITION_LIMIT = 1e12


class SingularMatrix(np.linalg.LinAlgError):
    """The (loaded) system is numerically singular."""


def hermitianize(A):
    """Return (A + A^H) / 2 for the last two axes of ``A``."""
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def trace(A):
    """Trace over the last two axes."""
    return np.einsum("...ii->...", A)


def outer(x, y=None):
    """Outer product x y^H over the last axis; y defaults to x."""
    if y is None:
        y = x
    return np.einsum("...i,...j->...ij", x, np.conj(y))


def min_eigval(A):
    """Smallest eigenvalue of Hermitian ``A`` (last two axes)."""
    return np.linalg.eigvalsh(A)[..., 0]


def is_psd(A, rtol=1e-10):
    """True where Hermitian ``A`` has min eigenvalue >= -rtol * trace."""
    return min_eigval(A) >= -rtol * np.real(trace(A))


def condition_number(A):
    """2-norm condition estimate of Hermitian ``A`` via its eigenvalues."""
    ev = np.abs(np.linalg.eigvalsh(A))
    small = ev[..., 0]
    large = ev[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(small > 0.0, large / small, np.inf)


def _load(A, loading):
    """Add ``loading * mean(|diag A|)`` to the diagonal (per matrix)."""
    if loading == 0.0:
        return A
    d = np.mean(np.abs(np.einsum("...ii->...i", A)), axis=-1)
    eye = np.eye(A.shape[-1], dtype=A.dtype)
    return A + (loading * d)[..., None, None] * eye


def herm_solve(A, b, loading=0.0):
    """Solve (A + loading * mean(|diag A|) * I) X = b for Hermitian A.

    Args:
        A: Hermitian matrices, shape [..., K, K].
        b: right-hand sides, shape [..., K] or [..., K, R].
        loading: nonnegative relative diagonal loading.

    Returns:
        X with the shape of ``b``, relative residual <= 1e-8.

    Raises:
        SingularMatrix: the loaded system is still numerically singular
            (condition estimate above 1e12).
    """
    if loading < 0.0:
        raise ValueError("loading must be nonnegative")
    A = np.asarray(A, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    vector_rhs = b.ndim == A.ndim - 1
    rhs = b[..., None] if vector_rhs else b

    Al = _load(A, loading)
    try:
        x = np.linalg.solve(Al, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("non-finite solution")

    # One refinement pass keeps the residual at working precision even for
    # moderately conditioned systems; failing that, fall back to the
    # condition estimate to decide whether the system was solvable at all.
    resid = rhs - Al @ x
    scale = np.maximum(_norm(rhs), np.finfo(np.float64).tiny)
    if np.any(_norm(resid) > _RESIDUAL_TOL * scale):
        x = x + np.linalg.solve(Al, resid)
        resid = rhs - Al @ x
        if np.any(_norm(resid) > _RESIDUAL_TOL * scale):
            cond = condition_number(hermitianize(Al))
            if np.any(cond > _CONDITION_LIMIT) or np.any(~np.isfinite(cond)):
                raise SingularMatrix("condition estimate above 1e12")
            raise SingularMatrix("residual did not converge")

    return x[..., 0] if vector_rhs else x


def herm_inverse(A, loading=0.0):
    """Inverse of Hermitian ``A`` with relative diagonal loading."""
    eye = np.broadcast_to(np.eye(A.shape[-1], dtype=np.complex128), A.shape)
    return herm_solve(A, eye, loading=loading)


def _norm(x):
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=(-2, -1)))
