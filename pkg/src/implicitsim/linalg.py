"""Symmetric eigendecomposition by cyclic Jacobi rotations, and helpers built on it."""

import numpy as np

_MAX_SWEEPS = 100


class NotConvergedError(RuntimeError):
    pass


def check_symmetric(A, tol=1e-10, name="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    asym = np.max(np.abs(A - A.T)) if A.size else 0.0
    if asym > tol:
        raise ValueError(f"{name} is not symmetric (max |A - A^T| = {asym:.3g})")
    return A


def jacobi_eigh(A, rtol=1e-12):
    """Eigenvalues and eigenvectors of a symmetric matrix.

    Cyclic Jacobi with a fixed row-major sweep order, so the result is
    bit-for-bit reproducible. Iteration stops once the largest off-diagonal
    magnitude drops below ``rtol * ||A||_F``.

    Parameters
    ----------
    A : ndarray of shape (d, d)
        Symmetric input. Only ``(A + A.T) / 2`` is used.
    rtol : float
        Relative off-diagonal tolerance.

    Returns
    -------
    eigvals : ndarray of shape (d,)
        Ascending eigenvalues.
    eigvecs : ndarray of shape (d, d)
        Orthonormal eigenvectors stored column-wise, matching ``eigvals``.
    """
    A = np.array(A, dtype=float)
    d = A.shape[0]
    A = 0.5 * (A + A.T)
    V = np.eye(d)
    if d <= 1:
        return np.diag(A).copy(), V
    tol = rtol * np.linalg.norm(A)
    off = np.abs(A - np.diag(np.diag(A)))
    sweeps = 0
    while off.max() >= tol and tol > 0:
        if sweeps >= _MAX_SWEEPS:
            raise NotConvergedError(f"Jacobi did not converge in {_MAX_SWEEPS} sweeps")
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) < tol * 1e-3:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q]
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :]
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        sweeps += 1
        off = np.abs(A - np.diag(np.diag(A)))
    eigvals = np.diag(A).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], V[:, order]


def spd_sqrt(A):
    """Symmetric positive-definite square root ``B`` with ``B @ B == A``."""
    A = check_symmetric(A, tol=1e-10, name="A")
    eigvals, eigvecs = jacobi_eigh(A)
    if eigvals.size and eigvals[0] <= 0:
        raise ValueError(f"A is not positive definite (min eigenvalue {eigvals[0]:.3g})")
    B = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return 0.5 * (B + B.T)
