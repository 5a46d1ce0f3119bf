import numpy as np
import pytest

from orthoaug.errors import InvalidInputError
from orthoaug.linalg import finite_diff_gradient, finite_diff_jacobian, make_rng, reduced_svd


def test_svd_identity():
    q, sigma, v = reduced_svd(np.eye(3))
    assert np.allclose(sigma, [1.0, 1.0, 1.0])
    # columns defined up to sign
    assert np.allclose(np.abs(q), np.eye(3), atol=1e-14)
    assert np.allclose(np.abs(v), np.eye(3), atol=1e-14)


def test_svd_rank_deficient_column_dropped():
    a = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    q, sigma, v = reduced_svd(a, rank_tol=1e-12)
    assert q.shape == (3, 1)
    assert np.allclose(sigma, [2.0])
    assert np.allclose(np.abs(q[:, 0]), [1.0, 0.0, 0.0], atol=1e-14)


def test_svd_reconstruction_random():
    a = make_rng(42).standard_normal((12, 3))
    q, sigma, v = reduced_svd(a)
    recon = q @ np.diag(sigma) @ v.T
    assert np.linalg.norm(a - recon) / np.linalg.norm(a) < 1e-12


def test_svd_invariants_random_shapes():
    rng = make_rng(7)
    for m, n in [(5, 5), (30, 4), (100, 10), (8, 1)]:
        a = rng.standard_normal((m, n))
        q, sigma, v = reduced_svd(a)
        assert np.max(np.abs(q.T @ q - np.eye(q.shape[1]))) <= 1e-10
        assert np.all(np.diff(sigma) <= 0) and np.all(sigma >= 0)
        assert np.linalg.norm(a - q @ np.diag(sigma) @ v.T) <= 1e-8 * np.linalg.norm(a)


def test_svd_input_validation():
    with pytest.raises(InvalidInputError):
        reduced_svd(np.full((3, 2), np.nan))
    with pytest.raises(InvalidInputError):
        reduced_svd(np.ones((2, 3)))  # wide matrix
    with pytest.raises(InvalidInputError):
        reduced_svd(np.ones((3, 2)), rank_tol=-1.0)


def test_fd_gradient_quadratic():
    g = finite_diff_gradient(lambda x: float(x @ x), np.array([1.0, 2.0]), h=1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_gradient_constant():
    g = finite_diff_gradient(lambda x: 3.25, np.array([0.1, -0.7, 2.0]), h=1e-5)
    assert np.allclose(g, 0.0)


def test_fd_gradient_sin_matches_closed_form():
    g = finite_diff_gradient(lambda x: float(np.sin(x[0])), np.array([0.3]), h=1e-6)
    assert abs(g[0] - np.cos(0.3)) < 1e-8


def test_fd_gradient_rejects_bad_step():
    with pytest.raises(InvalidInputError):
        finite_diff_gradient(lambda x: 0.0, np.zeros(2), h=0.0)


def test_fd_jacobian_linear_map():
    a = make_rng(3).standard_normal((4, 3))
    jac = finite_diff_jacobian(lambda x: a @ x, np.array([0.5, -1.0, 2.0]))
    assert np.allclose(jac, a, atol=1e-8)
