import math

import numpy as np
import pytest

from src.linalg import (
    DimensionError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    as_matrix,
    batch_sigma_min,
    batch_spectral_norm,
    logdet_spd,
    mat_mul,
    matrix_power,
    pinv,
    sigma_min,
    spectral_norm,
    sym_eig_bounds,
)


def test_norms_of_diagonal_matrix():
    m = np.diag([3.0, -4.0])
    assert spectral_norm(m) == pytest.approx(4.0)
    assert sigma_min(m) == pytest.approx(3.0)


def test_sigma_min_of_wide_matrix_uses_min_dimension():
    m = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert sigma_min(m) == pytest.approx(1.0)


def test_pinv_truncates_tiny_singular_values():
    out = pinv(np.diag([1.0, 1e-12]))
    assert np.allclose(out, np.diag([1.0, 0.0]))


def test_pinv_of_invertible_matrix_is_inverse():
    m = np.array([[2.0, 1.0], [1.0, 3.0]])
    assert np.allclose(pinv(m) @ m, np.eye(2))


def test_pinv_handles_stacks():
    stack = np.stack([np.diag([1.0, 2.0]), np.diag([4.0, 0.0])])
    out = pinv(stack)
    assert np.allclose(out[0], np.diag([1.0, 0.5]))
    assert np.allclose(out[1], np.diag([0.25, 0.0]))


def test_sym_eig_bounds():
    lo, hi = sym_eig_bounds([[2.0, 1.0], [1.0, 2.0]])
    assert lo == pytest.approx(1.0)
    assert hi == pytest.approx(3.0)


def test_sym_eig_bounds_rejects_asymmetric():
    with pytest.raises(NotSymmetricError):
        sym_eig_bounds([[1.0, 2.0], [0.0, 1.0]])


def test_logdet_spd():
    assert logdet_spd(np.diag([2.0, 3.0])) == pytest.approx(math.log(6.0))
    with pytest.raises(NotPositiveDefiniteError):
        logdet_spd([[1.0, 2.0], [2.0, 1.0]])


def test_shape_errors():
    with pytest.raises(DimensionError):
        mat_mul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        as_matrix(np.ones((2, 2, 2)))
    with pytest.raises(DimensionError):
        matrix_power(np.ones((2, 3)), 2)
    with pytest.raises(ValueError):
        as_matrix([[np.nan]])


def test_batched_norms_match_single():
    rng = np.random.default_rng(0)
    stack = rng.standard_normal((20, 3, 2))
    assert np.allclose(batch_spectral_norm(stack), [spectral_norm(m) for m in stack])
    assert np.allclose(batch_sigma_min(stack), [sigma_min(m) for m in stack])


ROT_R = np.array([[0.0, math.sqrt(2) / 2], [1.0, math.sqrt(2) / 2]])


def _random_matrix(rows, cols, rank, seed):
    rng = np.random.default_rng(seed)
    if rank == 0:
        return np.zeros((rows, cols))
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


@pytest.mark.parametrize(
    "rows,cols,rank,seed",
    [
        (1, 1, 1, 0),
        (2, 3, 2, 1),
        (4, 2, 2, 2),
        (5, 5, 5, 3),
        (6, 6, 6, 4),
        (6, 4, 2, 5),
        (3, 6, 1, 6),
        (5, 5, 3, 7),
        (4, 4, 0, 8),
    ],
)
def test_pinv_satisfies_moore_penrose_identities(rows, cols, rank, seed):
    a = _random_matrix(rows, cols, rank, seed)
    p = pinv(a)
    tol = 1e-9 * max(1.0, spectral_norm(a)) * max(1.0, spectral_norm(p))
    assert p.shape == (cols, rows)
    assert np.allclose(a @ p @ a, a, atol=tol)
    assert np.allclose(p @ a @ p, p, atol=tol)
    assert np.allclose((a @ p).T, a @ p, atol=tol)
    assert np.allclose((p @ a).T, p @ a, atol=tol)


def test_pinv_of_zero_is_zero():
    assert np.array_equal(pinv(np.zeros((3, 2))), np.zeros((2, 3)))


def test_pinv_of_two_step_reachability_matrix():
    expected = np.array([[-1.0, 1.0], [math.sqrt(2), 0.0]])
    assert np.allclose(pinv(ROT_R), expected, atol=1e-12)


def test_two_by_two_singular_values_match_characteristic_polynomial():
    gram = ROT_R.T @ ROT_R
    tr, det = np.trace(gram), np.linalg.det(gram)
    disc = math.sqrt(tr * tr - 4 * det)
    assert spectral_norm(ROT_R) == pytest.approx(math.sqrt((tr + disc) / 2), rel=1e-12)
    assert sigma_min(ROT_R) == pytest.approx(math.sqrt((tr - disc) / 2), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("shape", [(1, 4), (3, 3), (6, 2), (5, 6)])
def test_spectral_norm_is_transpose_invariant(seed, shape):
    a = np.random.default_rng(seed).standard_normal(shape)
    assert spectral_norm(a.T) == pytest.approx(spectral_norm(a), rel=1e-12)


def test_logdet_of_scaled_identity():
    assert logdet_spd(7.0 * np.eye(3)) == pytest.approx(3 * math.log(7.0), rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("dim", [1, 3, 6])
def test_logdet_matches_slogdet(seed, dim):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    m = g @ g.T + 0.1 * np.eye(dim)
    sign, expected = np.linalg.slogdet(m)
    assert sign == 1.0
    assert logdet_spd(m) == pytest.approx(expected, rel=1e-10, abs=1e-12)
