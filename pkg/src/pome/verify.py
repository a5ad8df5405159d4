"""Seeded self-check suite: SVD vs. Gram oracle, polar agreement, the RMS->RMS
norm closed form, the rank-k spectral-budget optimum and edit identities.

Each check returns a :class:`CheckResult`; ``fault`` names one check whose
claimed side is deliberately perturbed, as a negative control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import PomeParams, RmsBudget, optimal_p_star, orthogonalize, rms_to_rms_norm, verify_theorem_bound
from .linalg import frobenius_norm, newton_schulz, spectral_norm, svd
from .oracles import gram_singular_values, max_rms_ratio_search

CHECKS = ("svd_oracle", "polar_agreement", "rms_norm", "rank_k_optimum", "edit_laws")
FAULT_SIZE = 0.05


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _shape(rng, size, low=1):
    return int(rng.integers(low, size + 1)), int(rng.integers(low, size + 1))


def _bump(x, on):
    return x * (1.0 + FAULT_SIZE) + FAULT_SIZE if on else x


def check_svd_oracle(rng, size, count=8, fault=False):
    worst_rec = worst_orth = worst_sig = 0.0
    for i in range(count):
        a = rng.standard_normal(_shape(rng, size))
        if i % 4 == 3:  # rank-deficient
            r = max(1, min(a.shape) // 2)
            a = rng.standard_normal((a.shape[0], r)) @ rng.standard_normal((r, a.shape[1]))
        f = svd(a)
        sigma = _bump(f.sigma, fault)
        r = len(f.sigma)
        worst_rec = max(worst_rec, frobenius_norm(f.reconstruct() - a) / max(1.0, frobenius_norm(a)))
        worst_orth = max(worst_orth, np.abs(f.U.T @ f.U - np.eye(r)).max(), np.abs(f.V.T @ f.V - np.eye(r)).max())
        worst_sig = max(worst_sig, np.abs(sigma - gram_singular_values(a)).max() / max(f.sigma[0], 1e-300))
    ok = worst_rec <= 1e-10 and worst_orth <= 1e-10 and worst_sig <= 1e-8
    return CheckResult("svd_oracle", ok,
                       f"reconstruction {worst_rec:.2e}, orthonormality {worst_orth:.2e}, oracle sigma {worst_sig:.2e}")


def check_polar(rng, size, count=6, fault=False):
    worst = 0.0
    for _ in range(count):
        m, n = _shape(rng, size)
        a = rng.standard_normal((m, n)) + 0.5 * np.eye(m, n)
        f = svd(a)
        polar = f.U @ f.V.T
        worst = max(worst, frobenius_norm(_bump(newton_schulz(a), fault) - polar))
    return CheckResult("polar_agreement", worst <= 1e-5, f"max ||NS - U V^T||_F {worst:.2e}")


def check_rms_norm(rng, size, count=6, fault=False):
    worst_hi = 0.0
    worst_lo = 0.0
    for _ in range(count):
        m, n = _shape(rng, size)
        a = rng.standard_normal((m, n))
        closed = _bump(rms_to_rms_norm(a), fault)
        searched = max_rms_ratio_search(a, n_vectors=10_000, seed=int(rng.integers(2**31)))
        worst_hi = max(worst_hi, searched - closed)
        worst_lo = max(worst_lo, (closed - searched) / closed)
    ok = worst_hi <= 1e-6 and worst_lo <= 0.02
    return CheckResult("rms_norm", ok, f"search above closed form by {worst_hi:.2e}, below by {100 * worst_lo:.3f}%")


def check_rank_k_optimum(rng, size, trials, count=2, fault=False):
    size = min(size, 16)
    worst_gap = -math.inf
    worst_opt = worst_norm = 0.0
    failed = []
    for _ in range(count):
        m, n = _shape(rng, size)
        d = rng.standard_normal((m, n))
        eta = float(rng.uniform(0.5, 2.0))
        budget = RmsBudget.for_matrix(d, eta)
        sigma = svd(d).sigma
        for k in range(1, len(sigma) + 1):
            rep = verify_theorem_bound(d, k, budget, trials=trials, seed=int(rng.integers(2**31)))
            p_star = optimal_p_star(d, k, budget)
            value = _bump(rep.p_star_value, fault)
            worst_opt = max(worst_opt, abs(value - rep.optimum) / rep.optimum)
            worst_norm = max(worst_norm, abs(rms_to_rms_norm(p_star) - eta) / eta)
            worst_gap = max(worst_gap, rep.max_sampled - rep.optimum)
            if not rep.passed:
                failed.append(f"{m}x{n} k={k} sample {rep.violations[0]}")
    ok = not failed and worst_opt <= 1e-10 and worst_norm <= 1e-8
    detail = (f"max sampled - optimum {worst_gap:.2e}, <D,P*> vs tau*sum(sigma) {worst_opt:.2e}, "
              f"rms norm of P* vs eta {worst_norm:.2e}")
    if failed:
        detail += "; violations: " + ", ".join(failed[:3])
    return CheckResult("rank_k_optimum", ok, detail)


def check_edit_laws(rng, size, count=6, fault=False):
    worst = 0.0
    for _ in range(count):
        m, n = _shape(rng, size)
        d = rng.standard_normal((m, n))
        params = PomeParams(k_ratio=float(rng.uniform(0.05, 1.0)), beta=float(rng.uniform(0.5, 3.0)))
        e = orthogonalize(d, params)
        perp_fro = _bump(frobenius_norm(e.delta_hat_perp), fault)
        errs = (
            abs(perp_fro - math.sqrt(e.k)) / math.sqrt(e.k),
            abs(spectral_norm(e.delta_hat_perp) - 1.0),
            abs(frobenius_norm(e.delta_hat) - params.beta * frobenius_norm(d)) / (params.beta * frobenius_norm(d)),
        )
        worst = max(worst, *errs)
    example = orthogonalize(np.diag([4.0, 2.0, 1.0]), PomeParams(k_ratio=2 / 3))
    alpha_err = abs(example.alpha - math.sqrt(21) / math.sqrt(2))
    ok = worst <= 1e-8 and alpha_err <= 1e-10
    return CheckResult("edit_laws", ok, f"worst relative identity error {worst:.2e}, worked alpha error {alpha_err:.2e}")


def run_suite(size=12, trials=2000, seed=0, fault=None):
    if size < 1:
        raise ValueError("size must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"unknown check {fault!r}")
    rng = np.random.default_rng(seed)
    return [
        check_svd_oracle(rng, size, fault=fault == "svd_oracle"),
        check_polar(rng, size, fault=fault == "polar_agreement"),
        check_rms_norm(rng, size, fault=fault == "rms_norm"),
        check_rank_k_optimum(rng, size, trials, fault=fault == "rank_k_optimum"),
        check_edit_laws(rng, size, fault=fault == "edit_laws"),
    ]
