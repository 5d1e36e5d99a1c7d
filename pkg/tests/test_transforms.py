import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scalelab.transforms import (
    QKTransform,
    TransformError,
    build_qk_transform,
    build_reparameterization,
    estimate_moments,
    hadamard,
    joint_objective,
    sym_eig,
    sym_power,
)


def random_psd(rng, d, cond=1.0):
    A = rng.standard_normal((d, d)) * np.exp(cond * rng.standard_normal(d))
    return A @ A.T / d + 1e-3 * np.eye(d)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_hadamard_small():
    assert np.array_equal(hadamard(1), [[1.0]])
    np.testing.assert_allclose(hadamard(2), np.array([[1, 1], [1, -1]]) / np.sqrt(2))
    for d in (4, 16, 64, 256):
        H = hadamard(d)
        assert np.max(np.abs(H @ H.T - np.eye(d))) <= 1e-12
    for bad in (0, 3, 12):
        with pytest.raises(TransformError):
            hadamard(bad)


def test_sym_eig_examples(rng):
    lam, E = sym_eig(np.eye(5))
    np.testing.assert_array_equal(lam, np.ones(5))
    lam, E = sym_eig(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(lam, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(np.abs(E), np.eye(3)[:, [1, 2, 0]], atol=1e-15)
    A = random_psd(rng, 20) - 0.5 * np.eye(20)
    lam, E = sym_eig(A)
    assert np.all(np.diff(lam) >= 0)
    assert np.linalg.norm(E @ np.diag(lam) @ E.T - A) <= 1e-9 * np.linalg.norm(A)
    with pytest.raises(TransformError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(TransformError):
        sym_eig(np.ones((2, 3)))


def test_sym_power_examples(rng):
    np.testing.assert_array_equal(sym_power(np.eye(3), 0.5), np.eye(3))
    np.testing.assert_allclose(sym_power(np.diag([4.0, 9.0]), 0.5), np.diag([2.0, 3.0]), rtol=1e-14)
    A = random_psd(rng, 8)
    R = sym_power(A, 0.5)
    np.testing.assert_allclose(R @ R, A, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(sym_power(A, -0.5) @ R, np.eye(8), atol=1e-9)
    with pytest.raises(TransformError):
        sym_power(-np.eye(2), 0.5)
    with pytest.raises(TransformError):
        sym_power(A, 2.0)


def test_sym_power_floors_rank_deficient():
    A = np.diag([1.0, 0.0])
    Ri = sym_power(A, -0.5)
    eps = 1e-6 * 1.0 / 2
    np.testing.assert_allclose(np.diag(Ri), [1.0, eps**-0.5])


def test_reparam_identity():
    rep = build_reparameterization(np.eye(4), np.eye(4))
    assert rep.tr_S == pytest.approx(4.0, rel=1e-12)
    # R is orthogonal when X = Y = I
    np.testing.assert_allclose(rep.R @ rep.R.T, np.eye(4), atol=1e-12)


def test_reparam_diagonal_closed_form():
    a = np.array([4.0, 1.0, 9.0])
    b = np.array([1.0, 16.0, 0.25])
    rep = build_reparameterization(np.diag(a), np.diag(b))
    want = np.sum(np.sqrt(a * b))  # [DERIVED] commuting diagonals
    assert rep.tr_S == pytest.approx(want, rel=1e-12)
    assert joint_objective(rep.R, np.diag(a), np.diag(b)) == pytest.approx(want**2, rel=1e-10)


def test_reparam_trace_identities(rng):
    for d in (3, 16, 64):
        X, Y = random_psd(rng, d, 1.0), random_psd(rng, d, 1.0)
        rep = build_reparameterization(X, Y)
        ri = rep.R_inv
        t1 = np.trace(ri @ X @ ri.T)
        t2 = np.trace(rep.R.T @ Y @ rep.R)
        assert t1 == pytest.approx(rep.tr_S, rel=1e-6)
        assert t2 == pytest.approx(rep.tr_S, rel=1e-6)
        assert np.max(np.abs(rep.R @ rep.R_inv - np.eye(d))) <= 1e-8
        Q, K = rng.standard_normal((10, d)), rng.standard_normal((12, d))
        assert rel((Q @ ri.T) @ (K @ rep.R).T, Q @ K.T) <= 1e-8


def test_reparam_errors():
    with pytest.raises(TransformError):
        build_reparameterization(np.eye(3), np.eye(4))
    with pytest.raises(TransformError):
        build_reparameterization(np.eye(3), np.zeros((3, 3)))


def test_magnitude_reduction(rng):
    X = np.diag(np.exp(2 * rng.standard_normal(8)))
    Y = np.diag(np.exp(2 * rng.standard_normal(8)))
    rep = build_reparameterization(X, Y)
    assert rep.tr_S**2 < np.trace(X) * np.trace(Y)


def test_estimate_moments(rng):
    v = np.array([1.0, 2.0, -1.0])
    np.testing.assert_array_equal(estimate_moments([v]), np.outer(v, v))
    np.testing.assert_array_equal(estimate_moments(np.eye(4)), np.eye(4) / 4)
    S = rng.standard_normal((40000, 4))
    assert np.max(np.abs(estimate_moments(S) - np.eye(4))) < 5 / np.sqrt(40000)
    with pytest.raises(TransformError):
        estimate_moments(np.zeros((0, 3)))


def test_qk_transform_preserves_scores(rng):
    d = 16
    Q = rng.standard_normal((50, d)) * np.exp(rng.standard_normal(d))
    K = rng.standard_normal((60, d)) * np.exp(rng.standard_normal(d))
    for ip in (False, True):
        for rp in (False, True):
            t = build_qk_transform(d, ip, rp, Q, K)
            assert rel(t.apply_q(Q) @ t.apply_k(K).T, Q @ K.T) <= 1e-8
    assert np.array_equal(QKTransform.identity(3).q_matrix, np.eye(3))
    with pytest.raises(TransformError):
        build_qk_transform(d, True, True)


@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 6))
def test_trace_equality_property(seed, d):
    rng = np.random.default_rng(seed)
    X, Y = random_psd(rng, d), random_psd(rng, d)
    rep = build_reparameterization(X, Y)
    assert joint_objective(rep.R, X, Y) == pytest.approx(rep.tr_S**2, rel=1e-6)
