"""Independent cross-checks for the linear algebra, used by ``pome verify`` and the tests.

Nothing here calls into :mod:`pome.linalg`'s factorizations.
"""

import math

import numba
import numpy as np

from .linalg import ConvergenceError, as_matrix


@numba.njit(cache=True, nogil=True)
def _jacobi_sweeps(a, vt, max_sweeps):
    n = a.shape[0]
    eps = 2.220446049250313e-16
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += a[i, j] * a[i, j]
    floor = eps * eps * math.sqrt(total)
    for sweep in range(max_sweeps):
        rotations = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                # negligible against its diagonal pair, or against the whole matrix
                if abs(apq) <= eps * math.sqrt(abs(a[p, p] * a[q, q])) or abs(apq) <= floor:
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                rotations += 1
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rows p, q of J^T A J; columns follow by symmetry
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        a[k, p] = a[p, k]
                        a[k, q] = a[q, k]
                # vt holds eigenvectors as rows
                for k in range(n):
                    vpk = vt[p, k]
                    vqk = vt[q, k]
                    vt[p, k] = c * vpk - s * vqk
                    vt[q, k] = s * vpk + c * vqk
        if rotations == 0:
            return sweep, 0.0
    off = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                off += a[i, j] * a[i, j]
    return -1, math.sqrt(off)


def jacobi_eigh(sym, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue.
    """
    a = as_matrix(sym, "symmetric matrix")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    vt = np.eye(a.shape[0])
    sweeps, off = _jacobi_sweeps(a, vt, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError("Jacobi eigensolver did not converge", off)
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], vt.T[:, order]


def gram_singular_values(a):
    """Singular values of ``a`` from the eigen-decomposition of its Gram matrix.

    The smaller of ``A^T A`` / ``A A^T`` is diagonalized by :func:`jacobi_eigh`;
    each eigenvalue is then re-evaluated as the Rayleigh quotient ``||A v||^2``,
    which keeps the zero and tiny singular values at float64 absolute accuracy
    instead of the ``sqrt(eps)`` floor of ``sqrt(lambda)``.
    """
    a = as_matrix(a)
    tall = a.shape[0] >= a.shape[1]
    gram = a.T @ a if tall else a @ a.T
    _, vecs = jacobi_eigh(gram)
    images = a @ vecs if tall else a.T @ vecs
    return np.sort(np.linalg.norm(images, axis=0))[::-1]


def rms_ratio(a, x):
    """``||A x||_RMS / ||x||_RMS`` for every column of ``x``."""
    d_out, d_in = a.shape
    num = np.linalg.norm(a @ x, axis=0) / math.sqrt(d_out)
    den = np.linalg.norm(x, axis=0) / math.sqrt(d_in)
    return num / den


def max_rms_ratio_search(a, n_vectors=10_000, seed=0, ascent_steps=30):
    """Lower bound on the RMS->RMS operator norm by direct search.

    Draws ``n_vectors`` random unit inputs, then pushes each one uphill with
    ``x <- A^T A x`` (the ratio never decreases along this map). Pure random
    search stalls far below the maximum once the fan-in exceeds a handful of
    dimensions. Every evaluated point is a genuine input vector, so the
    result can only under-estimate the true maximum.
    """
    a = as_matrix(a)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((a.shape[1], n_vectors))
    x /= np.linalg.norm(x, axis=0)
    best = float(np.max(rms_ratio(a, x)))
    gram = a.T @ a
    for _ in range(ascent_steps):
        x = gram @ x
        norms = np.linalg.norm(x, axis=0)
        keep = norms > 0
        if not keep.any():
            break
        x = x[:, keep] / norms[keep]
        best = max(best, float(np.max(rms_ratio(a, x))))
    return best
