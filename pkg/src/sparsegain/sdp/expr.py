"""Affine matrix expressions over scalar decision variables.

An AffineMatrix is ``const + sum_i x_i * coeff_i`` where the x_i are scalar
variables identified by integer index and each coeff_i is a sparse matrix of
the expression's shape. Matrix variables (symmetric blocks, masked general
blocks) are flattened to scalars by the model layer; this module only sees
the scalar indices.

Products of two variable-dependent expressions are rejected: the modeling
layer is affine by design, and bilinear terms must be handled upstream
(convex overbounding) before they reach the solver.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _to_sparse(M) -> sp.csr_matrix:
    if sp.issparse(M):
        return M.tocsr()
    return sp.csr_matrix(np.asarray(M, dtype=float))


class AffineMatrix:
    """Matrix-valued affine function of scalar decision variables."""

    __slots__ = ("shape", "const", "coeffs")

    # make ndarray @ expr and ndarray + expr defer to our reflected ops
    __array_priority__ = 1000.0

    def __init__(self, shape, const=None, coeffs=None):
        r, c = int(shape[0]), int(shape[1])
        self.shape = (r, c)
        if const is None:
            const = np.zeros((r, c))
        else:
            const = np.asarray(const, dtype=float)
            if const.shape != (r, c):
                raise ValueError(f"constant shape {const.shape} != {(r, c)}")
        self.const = const
        self.coeffs: dict[int, sp.csr_matrix] = coeffs if coeffs is not None else {}

    # -- constructors -------------------------------------------------

    @staticmethod
    def constant(M) -> "AffineMatrix":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineMatrix(M.shape, const=M)

    @staticmethod
    def zeros(r, c) -> "AffineMatrix":
        return AffineMatrix((r, c))

    # -- algebra ------------------------------------------------------

    def _check_shape(self, other: "AffineMatrix"):
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other):
        if isinstance(other, AffineMatrix):
            self._check_shape(other)
            coeffs = dict(self.coeffs)
            for i, C in other.coeffs.items():
                coeffs[i] = coeffs[i] + C if i in coeffs else C
            return AffineMatrix(self.shape, self.const + other.const, coeffs)
        return AffineMatrix(
            self.shape, self.const + np.asarray(other, dtype=float), dict(self.coeffs)
        )

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return AffineMatrix(
            self.shape, -self.const, {i: -C for i, C in self.coeffs.items()}
        )

    def __sub__(self, other):
        if isinstance(other, AffineMatrix):
            return self.__add__(other.__neg__())
        return self.__add__(-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self.__neg__().__add__(other)

    def __mul__(self, alpha):
        alpha = float(alpha)
        return AffineMatrix(
            self.shape,
            alpha * self.const,
            {i: alpha * C for i, C in self.coeffs.items()},
        )

    __rmul__ = __mul__

    def __truediv__(self, alpha):
        return self.__mul__(1.0 / float(alpha))

    def __matmul__(self, other):
        if isinstance(other, AffineMatrix):
            if other.coeffs:
                if self.coeffs:
                    raise TypeError(
                        "product of two variable-dependent expressions is bilinear; "
                        "overbound it before building the LMI"
                    )
                return other.__rmatmul__(self.const)
            other = other.const
        B = np.atleast_2d(np.asarray(other, dtype=float))
        if self.shape[1] != B.shape[0]:
            raise ValueError(f"matmul dims {self.shape} @ {B.shape}")
        shape = (self.shape[0], B.shape[1])
        Bs = sp.csr_matrix(B)
        coeffs = {i: (C @ Bs).tocsr() for i, C in self.coeffs.items()}
        return AffineMatrix(shape, self.const @ B, coeffs)

    def __rmatmul__(self, other):
        A = np.atleast_2d(np.asarray(other, dtype=float))
        if A.shape[1] != self.shape[0]:
            raise ValueError(f"matmul dims {A.shape} @ {self.shape}")
        shape = (A.shape[0], self.shape[1])
        As = sp.csr_matrix(A)
        coeffs = {i: (As @ C).tocsr() for i, C in self.coeffs.items()}
        return AffineMatrix(shape, A @ self.const, coeffs)

    @property
    def T(self) -> "AffineMatrix":
        return AffineMatrix(
            (self.shape[1], self.shape[0]),
            self.const.T.copy(),
            {i: C.T.tocsr() for i, C in self.coeffs.items()},
        )

    # -- queries ------------------------------------------------------

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Numeric value at the scalar-variable vector x."""
        out = self.const.copy()
        for i, C in self.coeffs.items():
            xi = x[i]
            if xi != 0.0:
                out += xi * C.toarray()
        return out

    def trace_terms(self):
        """(const_trace, {var: trace_coeff}) for linear objectives."""
        if self.shape[0] != self.shape[1]:
            raise ValueError("trace of non-square expression")
        lin = {}
        for i, C in self.coeffs.items():
            t = C.diagonal().sum()
            if t != 0.0:
                lin[i] = lin.get(i, 0.0) + t
        return float(np.trace(self.const)), lin

    def var_indices(self):
        return set(self.coeffs.keys())


def he_expr(X: AffineMatrix) -> AffineMatrix:
    """X + X^T for a square expression."""
    if X.shape[0] != X.shape[1]:
        raise ValueError("he of non-square expression")
    return X + X.T


def bmat(rows) -> AffineMatrix:
    """Block matrix of expressions / arrays; None means a zero block."""
    nrows = len(rows)
    ncols = len(rows[0])
    cells = [[None] * ncols for _ in range(nrows)]
    rsz = [None] * nrows
    csz = [None] * ncols
    for i, row in enumerate(rows):
        if len(row) != ncols:
            raise ValueError("ragged block rows")
        for j, cell in enumerate(row):
            if cell is None:
                continue
            if not isinstance(cell, AffineMatrix):
                cell = AffineMatrix.constant(cell)
            cells[i][j] = cell
            r, c = cell.shape
            if rsz[i] is None:
                rsz[i] = r
            elif rsz[i] != r:
                raise ValueError(f"row {i} height mismatch: {rsz[i]} vs {r}")
            if csz[j] is None:
                csz[j] = c
            elif csz[j] != c:
                raise ValueError(f"col {j} width mismatch: {csz[j]} vs {c}")
    if any(s is None for s in rsz) or any(s is None for s in csz):
        raise ValueError("a block row/column consists only of None cells")
    roff = np.concatenate([[0], np.cumsum(rsz)]).astype(int)
    coff = np.concatenate([[0], np.cumsum(csz)]).astype(int)
    R, C = int(roff[-1]), int(coff[-1])

    const = np.zeros((R, C))
    per_var: dict[int, list] = {}
    for i in range(nrows):
        for j in range(ncols):
            cell = cells[i][j]
            if cell is None:
                continue
            r0, c0 = roff[i], coff[j]
            const[r0 : r0 + rsz[i], c0 : c0 + csz[j]] = cell.const
            for v, M in cell.coeffs.items():
                per_var.setdefault(v, []).append((r0, c0, M.tocoo()))
    coeffs = {}
    for v, pieces in per_var.items():
        rr = np.concatenate([p[2].row + p[0] for p in pieces])
        cc = np.concatenate([p[2].col + p[1] for p in pieces])
        vv = np.concatenate([p[2].data for p in pieces])
        coeffs[v] = sp.csr_matrix((vv, (rr, cc)), shape=(R, C))
    return AffineMatrix((R, C), const, coeffs)


def blkdiag_expr(blocks) -> AffineMatrix:
    """Block-diagonal stack of square-or-rectangular expressions."""
    n = len(blocks)
    rows = []
    for i in range(n):
        rows.append([blocks[i] if j == i else None for j in range(n)])
    # bmat rejects all-None rows only if a size is unknown; diagonal fills all
    return bmat(rows)
