import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegain import blockmat as bm


def test_he():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(bm.he(A), np.array([[2.0, 5.0], [5.0, 8.0]]))


def test_he_rejects_nonsquare():
    with pytest.raises(ValueError):
        bm.he(np.ones((2, 3)))


def test_max_eigenvalue():
    A = np.array([[-1.0, 0.5], [0.5, -1.0]])
    assert bm.max_eigenvalue(A) == pytest.approx(-0.5, abs=1e-12)


def test_symmetrize_fixes_small_skew():
    A = np.array([[1.0, 2.0 + 1e-12], [2.0, 1.0]])
    S = bm.symmetrize(A, name="test")
    assert np.array_equal(S, S.T)


def test_symmetrize_rejects_large_skew():
    A = np.array([[1.0, 2.0], [3.0, 1.0]])
    with pytest.raises(ValueError):
        bm.symmetrize(A, name="test")


def test_is_nsd_psd():
    assert bm.is_nsd(np.diag([-1.0, -2.0]))
    assert not bm.is_nsd(np.diag([-1.0, 0.5]))
    assert bm.is_psd(np.diag([1.0, 0.0]))


def test_solve_lyapunov_oracle():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    P = bm.solve_lyapunov(A, np.eye(2))
    assert np.allclose(P, [[1.25, 0.25], [0.25, 0.25]], atol=1e-12)


def test_solve_lyapunov_rejects_unstable():
    with pytest.raises(ValueError):
        bm.solve_lyapunov(np.array([[1.0]]), np.eye(1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_solve_lyapunov_residual_property(n, key):
    rng = np.random.default_rng(key)
    A = rng.normal(size=(n, n))
    # shift to guarantee Hurwitz
    A = A - (np.max(np.real(np.linalg.eigvals(A))) + 0.5) * np.eye(n)
    Q = rng.normal(size=(n, n))
    Q = Q @ Q.T + np.eye(n)
    P = bm.solve_lyapunov(A, Q)
    res = A.T @ P + P @ A + Q
    assert np.max(np.abs(res)) <= 1e-9 * (1.0 + np.max(np.abs(Q)))
    assert bm.is_psd(P, tol=1e-9)


def test_block_frobenius_map():
    part = bm.BlockPartition(row_sizes=(1, 1), col_sizes=(2, 2))
    K = np.array([[3.0, 0.0, 0.0, 4.0], [0.0, 0.0, 5.0, 0.0]])
    B = bm.BlockMatrix(K, part)
    N = bm.block_frobenius_map(B)
    assert np.allclose(N, [[3.0, 4.0], [0.0, 5.0]])


def test_block_pattern():
    part = bm.BlockPartition(row_sizes=(1, 1), col_sizes=(2, 2))
    K = np.array([[1.0, 0.0, 1e-9, 0.0], [0.0, 0.0, 2.0, 0.0]])
    B = bm.BlockMatrix(K, part)
    assert bm.block_pattern(B) == {(0, 0), (1, 1)}


def test_block_pattern_zero_matrix_is_empty():
    part = bm.BlockPartition(row_sizes=(2,), col_sizes=(2,))
    B = bm.BlockMatrix(np.zeros((2, 2)), part)
    assert bm.block_pattern(B) == set()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_block_pattern_permutation_equivariance(key):
    # permuting whole block rows permutes the pattern the same way
    rng = np.random.default_rng(key)
    part = bm.BlockPartition(row_sizes=(2, 2, 2), col_sizes=(3, 3))
    K = rng.normal(size=(6, 6)) * (rng.random(size=(6, 6)) > 0.5)
    perm = rng.permutation(3)
    rows = np.concatenate([np.arange(2 * p, 2 * p + 2) for p in perm])
    pat = bm.block_pattern(bm.BlockMatrix(K, part))
    pat_perm = bm.block_pattern(bm.BlockMatrix(K[rows], part))
    expect = {(int(np.where(perm == i)[0][0]), j) for (i, j) in pat}
    assert pat_perm == expect


def test_blkdiag():
    D = bm.blkdiag([np.eye(1), 2.0 * np.eye(2)])
    assert np.allclose(D, np.diag([1.0, 2.0, 2.0]))


def test_block_partition_rejects_empty_sizes():
    with pytest.raises(ValueError):
        bm.BlockPartition(row_sizes=(0,), col_sizes=(1,))
