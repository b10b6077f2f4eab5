"""Dependency-light numerical kernels used by the optimizer.

The eigensolver is a cyclic Jacobi iteration: the symmetric matrices here
are at most code-length sized (k <= 64 in practice), where Jacobi is cheap,
simple, and accurate.
"""

import numpy as np

from .exceptions import NumericError

__all__ = ["jacobi_eigh", "orthonormal_complement", "segment_sums"]


def jacobi_eigh(a: np.ndarray, off_tol: float = None, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending
    and eigenvectors in matching columns.  Sweeps stop once every
    off-diagonal magnitude falls below ``off_tol`` times the Frobenius
    norm; the default keeps that above the rotation rounding floor, which
    grows with the matrix size.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix must be symmetric")
    m = a.shape[0]
    v = np.eye(m)
    if m == 1:
        return a.diagonal().copy(), v
    fro = np.linalg.norm(a)
    if fro == 0.0:
        return np.zeros(m), v
    if off_tol is None:
        off_tol = max(1e-14, 8.0 * m * np.finfo(np.float64).eps)
    thresh = off_tol * fro
    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(a.diagonal())).max()
        if off <= thresh:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if abs(apq) <= thresh:
                    continue
                # symmetric Schur rotation: A <- J^T A J zeroes a[p, q]
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                else:
                    t = np.sign(tau) / (abs(tau) + np.hypot(tau, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                jl = np.array([[c, -s], [s, c]])
                jr = np.array([[c, s], [-s, c]])
                a[[p, q], :] = jl @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ jr
                v[:, [p, q]] = v[:, [p, q]] @ jr
    else:
        raise NumericError("jacobi eigensolver did not converge")
    evals = a.diagonal().copy()
    order = np.argsort(evals)[::-1]
    return evals[order], v[:, order]


def orthonormal_complement(
    basis: np.ndarray, count: int, rng: np.random.Generator, min_norm: float = 1e-8
) -> np.ndarray:
    """Draw ``count`` orthonormal columns orthogonal to an orthonormal basis.

    Random candidates are projected against the basis and already-accepted
    columns, re-orthogonalized twice, and rejected when the remainder norm
    drops below ``min_norm`` (fresh draws replace rejects).
    """
    n, b = basis.shape
    if b + count > n:
        raise ValueError(f"no room for {count} extra directions in R^{n}")
    out = np.empty((n, count))
    accepted = 0
    attempts = 0
    while accepted < count:
        attempts += 1
        if attempts > 100 * max(count, 1):
            raise NumericError("orthonormal complement: too many rejected draws")
        cand = rng.standard_normal(n)
        for _ in range(2):  # twice is enough
            cand = cand - basis @ (basis.T @ cand)
            if accepted:
                done = out[:, :accepted]
                cand = cand - done @ (done.T @ cand)
        norm = np.linalg.norm(cand)
        if norm < min_norm:
            continue
        out[:, accepted] = cand / norm
        accepted += 1
    return out


def segment_sums(flat: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Row-wise segment sums of a ragged layout given CSR boundaries.

    ``flat`` is (d, total) or (total,); returns (d, n_segments).  Empty
    segments sum to zero (reduceat alone would misreport them).
    """
    flat = np.atleast_2d(flat)
    starts = indptr[:-1]
    total = flat.shape[1]
    out = np.zeros((flat.shape[0], starts.size))
    if total == 0 or starts.size == 0:
        return out
    # starts == total can only occur for trailing empty segments
    n_in = int(np.searchsorted(starts, total, side="left"))
    if n_in:
        out[:, :n_in] = np.add.reduceat(flat, starts[:n_in], axis=1)
    empty = indptr[1:] == starts
    if np.any(empty):
        out[:, empty] = 0.0
    return out
