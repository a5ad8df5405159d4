"""Dense linear algebra in float64: thin SVD, Newton-Schulz polar iteration, norms.

The SVD is Golub-Kahan: Householder bidiagonalization followed by
implicit-shift QR sweeps on the bidiagonal. Columns are sign-normalized
so that results are bit-stable for a given input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

EPS = np.finfo(np.float64).eps
# effective-rank cutoff, relative to the largest singular value
RANK_TOL = 1e-12


class NonFiniteError(ValueError):
    """Input contains NaN or Inf."""


class ConvergenceError(ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class PolarUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``A = U @ diag(sigma) @ V.T`` with descending ``sigma``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return effective_rank(self.sigma)

    def reconstruct(self, k=None):
        k = len(self.sigma) if k is None else k
        return (self.U[:, :k] * self.sigma[:k]) @ self.V[:, :k].T


def as_matrix(a, name="matrix"):
    """Validate ``a`` as a finite, non-empty 2-D array and return a float64 copy."""
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name}: empty matrix of shape {m.shape}")
    if not np.isfinite(m).all():
        bad = int(np.count_nonzero(~np.isfinite(m)))
        raise NonFiniteError(f"{name}: {bad} non-finite entries")
    return m


def effective_rank(sigma):
    sigma = np.asarray(sigma)
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    return int(np.count_nonzero(sigma > RANK_TOL * sigma[0]))


def _frozen(a):
    a.flags.writeable = False
    return a


def _reflector(x):
    """Unit ``v`` with ``(I - 2 v v^T) x = alpha e_1``; ``v`` is None when x is zero."""
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return None, 0.0
    alpha = -math.copysign(norm, x[0])
    v = x.copy()
    v[0] -= alpha
    return v / np.linalg.norm(v), alpha


def _bidiagonalize(a, compute_uv):
    """Reduce tall ``a`` (m >= n) to upper bidiagonal form ``a = U B V^T``."""
    b = a.copy()
    m, n = b.shape
    d = np.zeros(n)
    e = np.zeros(max(n - 1, 0))
    left, right = [], []
    for k in range(n):
        v, alpha = _reflector(b[k:, k])
        if v is not None:
            b[k:, k:] -= 2.0 * np.outer(v, v @ b[k:, k:])
        d[k] = alpha if v is not None else b[k, k]
        left.append(v)
        if k < n - 1:
            w, beta = _reflector(b[k, k + 1:])
            if w is not None:
                b[k:, k + 1:] -= 2.0 * np.outer(b[k:, k + 1:] @ w, w)
            e[k] = beta if w is not None else b[k, k + 1]
            right.append(w)
    if not compute_uv:
        return d, e, np.zeros((0, n)), np.zeros((0, n))

    u = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v = left[k]
        if v is not None:
            u[k:, k:] -= 2.0 * np.outer(v, v @ u[k:, k:])
    vmat = np.eye(n)
    for k in range(n - 2, -1, -1):
        w = right[k]
        if w is not None:
            vmat[k + 1:, k + 1:] -= 2.0 * np.outer(w, w @ vmat[k + 1:, k + 1:])
    return d, e, u, vmat


@numba.njit(cache=True, nogil=True)
def _givens(f, g):
    if g == 0.0:
        return 1.0, 0.0, f
    r = math.hypot(f, g)
    return f / r, g / r, r


@numba.njit(cache=True, nogil=True)
def _rotate(xt, i, j, c, s):
    # rows of the transposed factor, i.e. columns (i, j) <- (c*xi + s*xj, -s*xi + c*xj)
    a = xt[i]
    b = xt[j]
    for r in range(a.shape[0]):
        ai = a[r]
        bj = b[r]
        a[r] = c * ai + s * bj
        b[r] = -s * ai + c * bj


@numba.njit(cache=True, nogil=True)
def _bidiagonal_qr(d, e, ut, vt, max_steps):
    """Diagonalize the upper bidiagonal (d, e) in place, accumulating into ut and vt
    (the transposed singular-vector factors).

    Returns (converged, largest remaining off-diagonal).
    """
    n = d.shape[0]
    eps = 2.220446049250313e-16
    anorm = 0.0
    for i in range(n):
        t = abs(d[i])
        if i < n - 1:
            t += abs(e[i])
        anorm = max(anorm, t)
    zero_tol = eps * anorm
    q = n - 1
    steps = 0
    while True:
        for i in range(n - 1):
            if abs(e[i]) <= eps * (abs(d[i]) + abs(d[i + 1])) or abs(e[i]) <= eps * zero_tol:
                e[i] = 0.0
        while q > 0 and e[q - 1] == 0.0:
            q -= 1
        if q == 0:
            return True, 0.0
        if steps >= max_steps:
            worst = 0.0
            for i in range(n - 1):
                worst = max(worst, abs(e[i]))
            return False, worst
        steps += 1
        p = q - 1
        while p > 0 and e[p - 1] != 0.0:
            p -= 1

        # a zero on the diagonal splits the block once its row/column is chased out
        zero_at = -1
        for i in range(p, q + 1):
            if abs(d[i]) <= zero_tol:
                d[i] = 0.0
                zero_at = i
                break
        if zero_at >= 0 and zero_at < q:
            k = zero_at
            f = e[k]
            e[k] = 0.0
            for j in range(k + 1, q + 1):
                c, s, r = _givens(d[j], f)
                d[j] = r
                if j < q:
                    f = -s * e[j]
                    e[j] = c * e[j]
                _rotate(ut, j, k, c, s)
            continue
        if zero_at == q:
            f = e[q - 1]
            e[q - 1] = 0.0
            for j in range(q - 1, p - 1, -1):
                c, s, r = _givens(d[j], f)
                d[j] = r
                if j > p:
                    f = -s * e[j - 1]
                    e[j - 1] = c * e[j - 1]
                _rotate(vt, j, q, c, s)
            continue

        # Wilkinson shift from the trailing 2x2 of B^T B
        t11 = d[q - 1] * d[q - 1]
        if q - 1 > p:
            t11 += e[q - 2] * e[q - 2]
        t12 = d[q - 1] * e[q - 1]
        t22 = d[q] * d[q] + e[q - 1] * e[q - 1]
        half = 0.5 * (t11 - t22)
        if half == 0.0:
            mu = t22 - abs(t12)
        else:
            mu = t22 - t12 * t12 / (half + math.copysign(math.hypot(half, t12), half))

        f = d[p] * d[p] - mu
        g = d[p] * e[p]
        for i in range(p, q):
            c, s, r = _givens(f, g)
            if i > p:
                e[i - 1] = r
            f = c * d[i] + s * e[i]
            e[i] = c * e[i] - s * d[i]
            g = s * d[i + 1]
            d[i + 1] = c * d[i + 1]
            _rotate(vt, i, i + 1, c, s)
            c, s, r = _givens(f, g)
            d[i] = r
            f = c * e[i] + s * d[i + 1]
            d[i + 1] = c * d[i + 1] - s * e[i]
            if i < q - 1:
                g = s * e[i + 1]
                e[i + 1] = c * e[i + 1]
            _rotate(ut, i, i + 1, c, s)
        e[q - 1] = f


def _svd_tall(a, compute_uv):
    n = a.shape[1]
    d, e, u, v = _bidiagonalize(a, compute_uv)
    ut = np.ascontiguousarray(u.T)
    vt = np.ascontiguousarray(v.T)
    converged, residual = _bidiagonal_qr(d, e, ut, vt, max(100, 50 * n))
    u, v = ut.T, vt.T
    if not converged:
        raise ConvergenceError("SVD: bidiagonal QR did not converge", residual)
    if compute_uv:
        v[:, d < 0] *= -1.0
    d = np.abs(d)
    order = np.argsort(-d, kind="stable")
    if compute_uv:
        return d[order], u[:, order], v[:, order]
    return d[order], None, None


def svd(a, name="matrix"):
    """Thin SVD of a finite matrix.

    Sign convention: the largest-magnitude entry of every column of U is
    positive (first such row on ties), with V flipped to match.
    """
    a = as_matrix(a, name)
    m, n = a.shape
    peak = np.max(np.abs(a))
    # power-of-two rescale keeps every squared quantity in range and is exact
    scale = math.ldexp(1.0, math.frexp(peak)[1]) if peak > 0 else 1.0
    if m >= n:
        sigma, u, v = _svd_tall(a / scale, True)
    else:
        sigma, v, u = _svd_tall(a.T / scale, True)
    sigma = sigma * scale
    pivots = np.argmax(np.abs(u), axis=0)
    flip = u[pivots, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    u += 0.0  # no negative zeros
    v += 0.0
    return SvdResult(_frozen(u), _frozen(sigma), _frozen(v))


def singular_values(a, name="matrix"):
    a = as_matrix(a, name)
    peak = np.max(np.abs(a))
    scale = math.ldexp(1.0, math.frexp(peak)[1]) if peak > 0 else 1.0
    tall = a if a.shape[0] >= a.shape[1] else a.T
    sigma, _, _ = _svd_tall(tall / scale, False)
    return sigma * scale


def spectral_norm(a, name="matrix"):
    return float(singular_values(a, name)[0])


def frobenius_norm(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name}: non-finite entries")
    return float(np.sqrt(np.sum(a * a)))


def newton_schulz(m, max_iters=100, tol=1e-7, name="matrix"):
    """Polar factor ``U V^T`` of ``m`` by the cubic Newton-Schulz iteration.

    ``X <- 1.5 X - 0.5 X X^T X`` starting from ``m / ||m||_F``; stops once
    the Frobenius change between iterates drops below ``tol``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = as_matrix(m, name)
    fro = frobenius_norm(x)
    if fro == 0.0:
        raise PolarUndefinedError(f"{name}: polar factor undefined for the zero matrix")
    x = x / fro
    wide = x.shape[0] < x.shape[1]
    change = math.inf
    for _ in range(max_iters):
        if wide:
            nxt = 1.5 * x - 0.5 * ((x @ x.T) @ x)
        else:
            nxt = 1.5 * x - 0.5 * (x @ (x.T @ x))
        change = frobenius_norm(nxt - x)
        x = nxt
        if change < tol:
            return x
    raise ConvergenceError(f"{name}: Newton-Schulz did not converge in {max_iters} iterations", change)
