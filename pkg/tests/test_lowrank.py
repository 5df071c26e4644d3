import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spear import lowrank


def planted(m=30, n=20, b=4, seed=0):
    rng = np.random.default_rng(seed)
    dZ = (rng.random((m, b)) < 0.5) * rng.normal(size=(m, b))
    X = rng.normal(size=(n, b))
    return dZ, X, dZ @ X.T, dZ.sum(axis=1)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(3, 25), n=st.integers(3, 25), b=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_rank_never_exceeds_batch(m, n, b, seed):
    b = min(b, m, n)
    rng = np.random.default_rng(seed)
    dW = rng.normal(size=(m, b)) @ rng.normal(size=(b, n))
    f = lowrank.decompose(dW)
    assert f.inferred_b <= b
    np.testing.assert_allclose(f.L @ f.R, dW, atol=1e-10 * np.abs(dW).max())


def test_factor_columns_are_orthogonal():
    _, _, dW, _ = planted()
    f = lowrank.decompose(dW)
    G = f.L.T @ f.L
    np.testing.assert_allclose(G, np.diag(np.diag(G)), atol=1e-12)
    np.testing.assert_allclose(f.left_inverse() @ f.L, np.eye(4), atol=1e-12)


def test_transfer_matrix_links_any_two_factorizations():
    dZ, X, dW, _ = planted()
    f = lowrank.decompose(dW)
    Q = lowrank.transfer_matrix(f.L, dZ)
    np.testing.assert_allclose(f.L @ Q, dZ, atol=1e-12)
    np.testing.assert_allclose(np.linalg.solve(Q, f.R).T, X, atol=1e-10)


def test_true_directions_reconstruct_exactly():
    dZ, X, dW, db = planted()
    f = lowrank.decompose(dW)
    Q = f.left_inverse() @ dZ
    dirs = Q / np.linalg.norm(Q, axis=0)
    D = lowrank.disaggregation(dirs, f, db)
    rec = lowrank.reconstruct(D, f)
    np.testing.assert_allclose(rec.X, X, atol=1e-10)
    np.testing.assert_allclose(rec.dZ, dZ, atol=1e-12)
    assert not rec.ill_conditioned


def test_scales_invariant_to_direction_sign():
    dZ, X, dW, db = planted(seed=2)
    f = lowrank.decompose(dW)
    Q = f.left_inverse() @ dZ
    dirs = Q / np.linalg.norm(Q, axis=0)
    flipped = dirs * np.array([1, -1, 1, -1])
    a = lowrank.disaggregation(dirs, f, db).Q
    b = lowrank.disaggregation(flipped, f, db).Q
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_noise_floor_truncates_rank():
    _, _, dW, _ = planted()
    rng = np.random.default_rng(9)
    noisy = dW + 1e-4 * rng.normal(size=dW.shape)
    assert lowrank.decompose(noisy).inferred_b > 4
    assert lowrank.decompose(noisy, noise_floor=2e-4 * (np.sqrt(30) + np.sqrt(20))).inferred_b == 4


def test_degenerate_inputs():
    with pytest.raises(lowrank.DegenerateGradientError):
        lowrank.decompose(np.zeros((4, 3)))
    with pytest.raises(lowrank.DegenerateGradientError):
        lowrank.decompose(np.full((4, 3), np.inf))
    _, _, dW, db = planted()
    f = lowrank.decompose(dW)
    sing = np.ones((4, 4))
    with pytest.raises(lowrank.SingularDirectionsError):
        lowrank.recover_scales(sing, f, db)


def test_ill_conditioned_warning():
    _, _, dW, _ = planted()
    f = lowrank.decompose(dW)
    Q = np.diag([1.0, 1.0, 1.0, 1e-14])
    with pytest.warns(RuntimeWarning):
        rec = lowrank.reconstruct(Q, f)
    assert rec.ill_conditioned
