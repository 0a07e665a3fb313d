"""Block-partitioned dense linear algebra helpers.

Everything here is plain dense numpy: symmetric parts, definiteness tests,
per-block Frobenius norms and a direct Lyapunov solver. Matrices at the scales
this package targets (a few hundred rows) never warrant sparse storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# relative tolerance used to classify a block as nonzero, see block_pattern()
PATTERN_TOL = 1e-6

_SYM_CHECK_TOL = 1e-12
_SYM_FIX_TOL = 1e-10


def as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        raise ValueError(f"expected a 2-d matrix, got shape {A.shape}")
    return A


def symmetrize(A, *, name: str = "matrix") -> np.ndarray:
    """Return (A+A^T)/2, rejecting genuinely asymmetric input.

    Asymmetry up to 1e-10 (absolute, scaled by 1+max|A|) is treated as solver
    round-off and averaged away; anything larger is a modeling bug and raises.
    """
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    scale = 1.0 + (np.max(np.abs(A)) if A.size else 0.0)
    skew = np.max(np.abs(A - A.T)) if A.size else 0.0
    if skew > _SYM_FIX_TOL * scale:
        raise ValueError(f"{name} is not symmetric: max|A-A^T| = {skew:.3e}")
    return 0.5 * (A + A.T)


def is_symmetric(A, tol: float = _SYM_CHECK_TOL) -> bool:
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        return False
    scale = 1.0 + (np.max(np.abs(A)) if A.size else 0.0)
    return np.max(np.abs(A - A.T)) <= tol * scale if A.size else True


def he(A) -> np.ndarray:
    """Symmetric part operator, he(A) = A + A^T."""
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"he() needs a square matrix, got shape {A.shape}")
    return A + A.T


def max_eigenvalue(A) -> float:
    """Largest eigenvalue of a symmetric matrix (symmetric eigensolver)."""
    A = symmetrize(A, name="max_eigenvalue input")
    if A.size == 0:
        return -np.inf
    try:
        w = np.linalg.eigvalsh(A)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy rarely fails here
        raise ArithmeticError(f"symmetric eigensolver failed: {exc}") from exc
    return float(w[-1])


def is_nsd(A, tol: float = 0.0) -> bool:
    return max_eigenvalue(A) <= tol


def is_psd(A, tol: float = 0.0) -> bool:
    return max_eigenvalue(-as_matrix(A)) <= tol


@dataclass(frozen=True)
class BlockPartition:
    """Row/column block sizes of a partitioned matrix."""

    row_sizes: tuple
    col_sizes: tuple

    def __post_init__(self):
        rows = tuple(int(r) for r in self.row_sizes)
        cols = tuple(int(c) for c in self.col_sizes)
        if not rows or not cols:
            raise ValueError("partition needs at least one block per axis")
        if any(r < 1 for r in rows) or any(c < 1 for c in cols):
            raise ValueError("all block sizes must be >= 1")
        object.__setattr__(self, "row_sizes", rows)
        object.__setattr__(self, "col_sizes", cols)

    @property
    def n_rows(self) -> int:
        return sum(self.row_sizes)

    @property
    def n_cols(self) -> int:
        return sum(self.col_sizes)

    @property
    def shape(self):
        return (len(self.row_sizes), len(self.col_sizes))

    def row_offset(self, i: int) -> int:
        return sum(self.row_sizes[:i])

    def col_offset(self, j: int) -> int:
        return sum(self.col_sizes[:j])


@dataclass(frozen=True)
class BlockMatrix:
    """Dense matrix plus the block partition used to address it."""

    data: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        data = as_matrix(self.data)
        if data.shape != (self.partition.n_rows, self.partition.n_cols):
            raise ValueError(
                f"data shape {data.shape} does not match partition "
                f"({self.partition.n_rows}, {self.partition.n_cols})"
            )
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def block(self, i: int, j: int) -> np.ndarray:
        p = self.partition
        r0 = p.row_offset(i)
        c0 = p.col_offset(j)
        return self.data[r0 : r0 + p.row_sizes[i], c0 : c0 + p.col_sizes[j]]

    @property
    def shape(self):
        return self.data.shape


def block_frobenius_map(K: BlockMatrix) -> np.ndarray:
    """Per-block Frobenius norms: entry (i,j) is ||K_ij||_F."""
    nr, nc = K.partition.shape
    out = np.empty((nr, nc))
    for i in range(nr):
        for j in range(nc):
            out[i, j] = np.linalg.norm(K.block(i, j), "fro")
    return out


def block_pattern(K: BlockMatrix, pattern_tol: float = PATTERN_TOL) -> set:
    """Indices of blocks considered nonzero.

    A block counts as nonzero when its Frobenius norm exceeds pattern_tol
    relative to the largest block norm; an all-zero matrix has empty pattern.
    """
    norms = block_frobenius_map(K)
    top = norms.max() if norms.size else 0.0
    if top <= 0.0:
        return set()
    keep = np.argwhere(norms > pattern_tol * top)
    return {(int(i), int(j)) for i, j in keep}


def solve_lyapunov(A_cl, Qbar) -> np.ndarray:
    """Solve A_cl^T P + P A_cl + Qbar = 0 for the unique symmetric P.

    Direct dense solve of the Kronecker-vectorized linear system; fine at the
    state dimensions this package handles (n <= ~100). A_cl must be Hurwitz.
    """
    A_cl = as_matrix(A_cl)
    Qbar = symmetrize(Qbar, name="Qbar")
    n = A_cl.shape[0]
    if A_cl.shape != (n, n) or Qbar.shape != (n, n):
        raise ValueError("A_cl and Qbar must be square of equal dimension")
    eigs = np.linalg.eigvals(A_cl)
    if np.max(eigs.real) >= 0.0:
        raise ValueError(
            f"A_cl is not Hurwitz (max real part {np.max(eigs.real):.3e})"
        )
    # vec(A^T P + P A) = (I (x) A^T + A^T (x) I) vec(P)
    L = np.kron(np.eye(n), A_cl.T) + np.kron(A_cl.T, np.eye(n))
    try:
        vecP = np.linalg.solve(L, -Qbar.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"singular Lyapunov system: {exc}") from exc
    P = 0.5 * (vecP.reshape(n, n) + vecP.reshape(n, n).T)
    resid = np.max(np.abs(A_cl.T @ P + P @ A_cl + Qbar))
    if resid > 1e-9 * (1.0 + np.max(np.abs(Qbar))):
        raise ArithmeticError(f"Lyapunov residual too large: {resid:.3e}")
    return P


def blkdiag(blocks) -> np.ndarray:
    """Dense block-diagonal stacking."""
    mats = [as_matrix(b) for b in blocks]
    if not mats:
        return np.zeros((0, 0))
    n = sum(m.shape[0] for m in mats)
    m_ = sum(m.shape[1] for m in mats)
    out = np.zeros((n, m_))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out
