import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pome.linalg import (
    ConvergenceError,
    NonFiniteError,
    PolarUndefinedError,
    effective_rank,
    frobenius_norm,
    newton_schulz,
    singular_values,
    spectral_norm,
    svd,
)
from pome.oracles import gram_singular_values


def check_factors(a, f, tol=1e-10):
    r = min(a.shape)
    assert f.U.shape == (a.shape[0], r) and f.V.shape == (a.shape[1], r) and f.sigma.shape == (r,)
    assert np.all(np.diff(f.sigma) <= 0) and np.all(f.sigma >= 0)
    assert np.abs(f.U.T @ f.U - np.eye(r)).max() <= tol
    assert np.abs(f.V.T @ f.V - np.eye(r)).max() <= tol
    assert frobenius_norm(f.reconstruct() - a) <= tol * max(1.0, frobenius_norm(a))


def test_svd_diagonal():
    f = svd(np.diag([3.0, 1.0]))
    np.testing.assert_array_equal(f.sigma, [3.0, 1.0])
    np.testing.assert_array_equal(f.U, np.eye(2))
    np.testing.assert_array_equal(f.V, np.eye(2))


def test_svd_zero():
    f = svd(np.zeros((2, 2)))
    np.testing.assert_array_equal(f.sigma, [0.0, 0.0])
    check_factors(np.zeros((2, 2)), f)


def test_svd_random_4x3_matches_gram_oracle():
    a = np.random.default_rng(7).standard_normal((4, 3))
    f = svd(a)
    check_factors(a, f)
    np.testing.assert_allclose(f.sigma, gram_singular_values(a), rtol=0, atol=1e-10)
    # singular vectors agree with the oracle's up to sign (distinct sigma)
    lam, vecs = np.linalg.eigh(a.T @ a)
    for i in range(3):
        v = vecs[:, ::-1][:, i]
        assert abs(abs(v @ f.V[:, i]) - 1.0) < 1e-10


def test_svd_sign_convention():
    a = np.random.default_rng(3).standard_normal((6, 4))
    f = svd(a)
    pivots = np.argmax(np.abs(f.U), axis=0)
    assert np.all(f.U[pivots, np.arange(4)] > 0)
    f2 = svd(a.copy())
    assert np.array_equal(f.U, f2.U) and np.array_equal(f.V, f2.V) and np.array_equal(f.sigma, f2.sigma)


def test_svd_outputs_are_read_only():
    f = svd(np.eye(2))
    with pytest.raises(ValueError):
        f.U[0, 0] = 5.0


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (7, 3), (3, 7), (20, 20), (64, 9)])
def test_svd_shapes(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    check_factors(a, svd(a))


def test_svd_rank_deficient_and_tied():
    rng = np.random.default_rng(1)
    low = rng.standard_normal((30, 3)) @ rng.standard_normal((3, 20))
    f = svd(low)
    check_factors(low, f)
    assert effective_rank(f.sigma) == 3
    q1, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    q2, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    tied = q1 @ np.diag([2.0] * 6 + [1.0] * 6) @ q2.T
    f = svd(tied)
    check_factors(tied, f)
    np.testing.assert_allclose(f.sigma, [2.0] * 6 + [1.0] * 6, atol=1e-13)


def test_svd_extreme_scales():
    a = np.random.default_rng(2).standard_normal((6, 5))
    for scale in (1e-300, 1e-150, 1e150, 1e300):
        f = svd(a * scale)
        np.testing.assert_allclose(f.sigma / scale, svd(a).sigma, rtol=1e-13)


def test_svd_graded_matrix():
    # entries spanning many orders of magnitude
    a = np.diag(10.0 ** -np.arange(0, 16, 1.5)) @ np.random.default_rng(4).standard_normal((11, 11))
    f = svd(a)
    check_factors(a, f)


def test_svd_rejects_non_finite():
    with pytest.raises(NonFiniteError, match="w_q"):
        svd(np.array([[1.0, np.nan]]), name="w_q")
    with pytest.raises(NonFiniteError):
        svd(np.array([[np.inf]]))


def test_svd_rejects_bad_shapes():
    with pytest.raises(ValueError):
        svd(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        svd(np.zeros(3))


def test_singular_values_only():
    a = np.random.default_rng(5).standard_normal((9, 4))
    np.testing.assert_allclose(singular_values(a), svd(a).sigma, rtol=1e-13)
    np.testing.assert_allclose(singular_values(a.T), svd(a).sigma, rtol=1e-13)


def test_convergence_error_carries_residual():
    err = ConvergenceError("stuck", 1.5e-3)
    assert err.residual == 1.5e-3 and "1.500e-03" in str(err)


@pytest.mark.parametrize("m,expected", [(np.eye(3), 1.0), (np.zeros((2, 3)), 0.0), (np.diag([4.0, 2.0, 1.0]), 4.0)])
def test_spectral_norm(m, expected):
    assert spectral_norm(m) == expected


@pytest.mark.parametrize("m,expected", [(np.eye(2), math.sqrt(2)), (np.diag([4.0, 2.0, 1.0]), math.sqrt(21)),
                                        (np.zeros((3, 3)), 0.0)])
def test_frobenius_norm(m, expected):
    assert frobenius_norm(m) == pytest.approx(expected, rel=1e-15)


def test_newton_schulz_rotation_fixed_point():
    t = math.radians(30)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    assert frobenius_norm(newton_schulz(rot) - rot) <= 1e-7


def test_newton_schulz_diagonal():
    np.testing.assert_allclose(newton_schulz(np.diag([4.0, 2.0])), np.eye(2), atol=1e-6)


def test_newton_schulz_random_8x5():
    m = np.random.default_rng(11).standard_normal((8, 5))
    f = svd(m)
    assert frobenius_norm(newton_schulz(m) - f.U @ f.V.T) <= 1e-5


def test_newton_schulz_rank_deficient_restricts_to_range():
    rng = np.random.default_rng(12)
    m = rng.standard_normal((7, 2)) @ rng.standard_normal((2, 5))
    f = svd(m)
    r = effective_rank(f.sigma)
    assert r == 2
    assert frobenius_norm(newton_schulz(m) - f.U[:, :r] @ f.V[:, :r].T) <= 1e-5


def test_newton_schulz_errors():
    with pytest.raises(PolarUndefinedError, match="undefined"):
        newton_schulz(np.zeros((3, 2)))
    with pytest.raises(ConvergenceError) as info:
        newton_schulz(np.random.default_rng(0).standard_normal((6, 6)), max_iters=2)
    assert info.value.residual > 0
    with pytest.raises(ValueError):
        newton_schulz(np.eye(2), max_iters=0)


matrices = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_property_svd_invariants(spec):
    m, n, seed = spec
    a = np.random.default_rng(seed).standard_normal((m, n))
    check_factors(a, svd(a))


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_property_svd_matches_gram_oracle(spec):
    m, n, seed = spec
    a = np.random.default_rng(seed).standard_normal((m, n))
    sigma = svd(a).sigma
    assert np.abs(sigma - gram_singular_values(a)).max() <= 1e-8 * sigma[0]


@settings(max_examples=30, deadline=None)
@given(matrices, st.floats(1e-3, 1e3))
def test_property_polar_scale_invariance(spec, c):
    m, n, seed = spec
    a = np.random.default_rng(seed).standard_normal((m, n)) + np.eye(m, n)
    f = svd(a)
    x = newton_schulz(a)
    assert frobenius_norm(x - f.U @ f.V.T) <= 1e-5
    assert frobenius_norm(newton_schulz(c * a) - x) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_property_transpose_symmetry(spec):
    m, n, seed = spec
    a = np.random.default_rng(seed).standard_normal((m, n))
    np.testing.assert_allclose(svd(a.T).sigma, svd(a).sigma, rtol=1e-12, atol=1e-14)
