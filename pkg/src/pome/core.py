"""The POME edit: truncate the fine-tuning delta's spectrum and equalize what is kept.

For a delta ``dW = W_ft - W_pre`` with thin SVD ``U diag(s) V^T`` the edit keeps
the leading ``k`` singular directions, sets their singular values to one and
rescales::

    dW_perp = U_k V_k^T
    dW_hat  = alpha * dW_perp,   alpha = beta * ||dW||_F / sqrt(k)
    W_E     = W_pre + dW_hat

The same ``U_k V_k^T`` is, up to the factor ``tau``, the maximizer of
``<dW, P>`` over rank-``k`` matrices with spectral norm at most ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .linalg import RANK_TOL, as_matrix, effective_rank, frobenius_norm, spectral_norm, svd


class ShapeMismatchError(ValueError):
    pass


class NoUpdateError(ValueError):
    """The delta is identically zero; there is nothing to edit."""


class RankError(ValueError):
    pass


@dataclass(frozen=True)
class PomeParams:
    k_ratio: float = 0.5
    beta: float = 1.0
    explicit_k: int | None = None

    def __post_init__(self):
        if not 0.0 < self.k_ratio <= 1.0:
            raise ValueError(f"k_ratio must lie in (0, 1], got {self.k_ratio}")
        if not self.beta > 0.0 or not math.isfinite(self.beta):
            raise ValueError(f"beta must be a positive finite number, got {self.beta}")
        if self.explicit_k is not None and (isinstance(self.explicit_k, bool) or self.explicit_k < 1):
            raise ValueError(f"explicit_k must be a positive integer, got {self.explicit_k}")


@dataclass(frozen=True)
class EditedDelta:
    delta_hat: np.ndarray
    delta_hat_perp: np.ndarray
    k: int
    alpha: float
    sigma_retained: np.ndarray
    sigma_dropped: np.ndarray


@dataclass(frozen=True)
class RmsBudget:
    """RMS->RMS norm budget ``eta`` for a ``fan_out x fan_in`` operator."""

    eta: float
    fan_in: int
    fan_out: int
    tau: float = field(init=False)

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("fan_in and fan_out must be positive")
        object.__setattr__(self, "tau", self.eta * math.sqrt(self.fan_out / self.fan_in))

    @classmethod
    def for_matrix(cls, a, eta):
        rows, cols = np.shape(a)
        return cls(eta=eta, fan_in=cols, fan_out=rows)


def delta(w_ft, w_pre, name="tensor"):
    w_ft = np.asarray(w_ft, dtype=np.float64)
    w_pre = np.asarray(w_pre, dtype=np.float64)
    if w_ft.shape != w_pre.shape:
        raise ShapeMismatchError(
            f"{name}: fine-tuned shape {w_ft.shape} does not match pretrained shape {w_pre.shape}")
    return w_ft - w_pre


def resolve_k(m, n, params):
    """Number of singular directions to keep for an ``m x n`` delta.

    ``explicit_k`` wins; otherwise ``K * min(m, n)`` rounded half-up, at least 1.
    """
    r = min(m, n)
    if params.explicit_k is not None:
        if params.explicit_k > r:
            raise RankError(f"explicit k={params.explicit_k} exceeds min(m, n)={r} for a {m}x{n} matrix")
        return params.explicit_k
    # decimal arithmetic on the shortest repr, so 0.5 * 5 is exactly 2.5
    scaled = Decimal(repr(params.k_ratio)) * r
    k = int(scaled.to_integral_value(rounding=ROUND_HALF_UP))
    return min(max(1, k), r)


def orthogonalize(delta_w, params, factors=None, name="delta"):
    """Truncate ``delta_w`` to rank k, equalize the kept spectrum and rescale.

    ``factors`` may carry a precomputed :func:`pome.linalg.svd` of ``delta_w``
    (reused across a beta sweep).
    """
    d = as_matrix(delta_w, name)
    f = svd(d, name) if factors is None else factors
    if f.sigma[0] == 0.0:
        raise NoUpdateError(f"{name}: no update to edit (delta is zero)")
    k = resolve_k(*d.shape, params)
    if f.sigma[k - 1] <= RANK_TOL * f.sigma[0]:
        raise RankError(
            f"{name}: singular value {k} is numerically zero (effective rank "
            f"{effective_rank(f.sigma)}); choose a smaller k")
    perp = f.U[:, :k] @ f.V[:, :k].T
    alpha = params.beta * frobenius_norm(d) / math.sqrt(k)
    return EditedDelta(
        delta_hat=alpha * perp,
        delta_hat_perp=perp,
        k=k,
        alpha=alpha,
        sigma_retained=f.sigma[:k].copy(),
        sigma_dropped=f.sigma[k:].copy(),
    )


def apply_edit(w_pre, edited, name="tensor"):
    w_pre = np.asarray(w_pre, dtype=np.float64)
    if w_pre.shape != edited.delta_hat.shape:
        raise ShapeMismatchError(
            f"{name}: pretrained shape {w_pre.shape} does not match edit shape {edited.delta_hat.shape}")
    return w_pre + edited.delta_hat


def rms_to_rms_norm(a, name="matrix"):
    """Largest RMS->RMS amplification: ``sqrt(fan_in / fan_out) * ||A||_2``."""
    a = as_matrix(a, name)
    rows, cols = a.shape
    return math.sqrt(cols / rows) * spectral_norm(a, name)


def _p_star(factors, k, tau):
    return tau * (factors.U[:, :k] @ factors.V[:, :k].T)


def _check_budget(shape, budget):
    if (budget.fan_out, budget.fan_in) != tuple(shape):
        raise ShapeMismatchError(
            f"budget is for a {budget.fan_out}x{budget.fan_in} operator, matrix is {shape[0]}x{shape[1]}")


def optimal_p_star(delta_w, k, budget):
    """Maximizer of ``<delta_w, P>`` subject to ``rank(P) <= k`` and ``||P||_RMS->RMS <= eta``."""
    d = as_matrix(delta_w, "delta")
    _check_budget(d.shape, budget)
    f = svd(d)
    rank = effective_rank(f.sigma)
    if not 1 <= k <= rank:
        raise RankError(f"k={k} must lie in [1, effective rank {rank}]")
    return _p_star(f, k, budget.tau)


@dataclass(frozen=True)
class BudgetBoundCheck:
    optimum: float
    p_star_value: float
    max_sampled: float
    trials: int
    violations: tuple[int, ...]
    tol: float

    @property
    def gap(self):
        return self.optimum - self.max_sampled

    @property
    def passed(self):
        return not self.violations


def _orthonormal_columns(g):
    # batched QR with a positive R diagonal, so Q tracks g's column directions
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return q * signs[..., None, :]


def _sample_feasible(rng, factors, k, tau, count):
    """Random ``P = Q_u diag(s) Q_v^T`` with rank <= k and ``max(s) <= tau``.

    A third of the draws are perturbations of the optimizer's own subspace at
    log-uniform scales, so the sampler also probes the neighbourhood of the optimum.
    """
    m, n = factors.U.shape[0], factors.V.shape[0]
    gu = rng.standard_normal((count, m, k))
    gv = rng.standard_normal((count, n, k))
    near = np.arange(count) % 3 == 0
    eps = 10.0 ** rng.uniform(-4, 0, size=(count, 1, 1))
    gu[near] = factors.U[:, :k] + eps[near] * gu[near]
    gv[near] = factors.V[:, :k] + eps[near] * gv[near]
    s = tau * rng.uniform(0.0, 1.0, size=(count, k))
    saturate = rng.uniform(size=count) < 0.5
    s[saturate | near] = tau
    return _orthonormal_columns(gu), s, _orthonormal_columns(gv)


def verify_theorem_bound(delta_w, k, budget, trials, seed, tol=1e-9, batch=2048):
    """Check by sampling that no feasible rank-k ``P`` beats ``<delta_w, P*>``.

    Sample 0 is ``P*`` itself; the rest come from :func:`_sample_feasible`.
    """
    d = as_matrix(delta_w, "delta")
    _check_budget(d.shape, budget)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    f = svd(d)
    r = len(f.sigma)
    if not 1 <= k <= r:
        raise RankError(f"k={k} must lie in [1, {r}]")
    tau = budget.tau
    optimum = tau * float(np.sum(f.sigma[:k]))
    p_star_value = float(np.sum(d * _p_star(f, k, tau)))

    rng = np.random.default_rng(seed)
    best = p_star_value
    violations = []
    if p_star_value > optimum + tol:
        violations.append(0)
    start = 1
    while start < trials:
        count = min(batch, trials - start)
        qu, s, qv = _sample_feasible(rng, f, k, tau, count)
        # <D, Qu diag(s) Qv^T> = sum_i s_i (Qu^T D Qv)_ii
        diag = np.sum((d.T @ qu) * qv, axis=1)
        values = np.sum(diag * s, axis=1)
        best = max(best, float(values.max()))
        violations.extend((start + np.flatnonzero(values > optimum + tol)).tolist())
        start += count
    return BudgetBoundCheck(optimum=optimum, p_star_value=p_star_value, max_sampled=best,
                        trials=trials, violations=tuple(violations), tol=tol)
