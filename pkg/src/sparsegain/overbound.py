"""Convex overbounding of bilinear matrix inequality constraints.

The synthesis constraints are bilinear: the Lyapunov/LQ inequality couples P
with K, and the network stability pencil couples (S, R) with the gain inside
the interconnection matrix. Each iteration linearizes around the current
feasible point and overbounds the bilinear remainder He(X N Y) by a larger
convex block pencil, in one of two ways:

* bordered form: append a border row [N'X' + GY | -He(G)] for a constant
  square G with He(G) > 0; Schur complementation shows the bordered pencil
  dominates the original.
* augmented form: keep G = G0 + dG adjustable and pay for the extra
  bilinearity dG*Y with two more diagonal blocks (-F and -2F0 + F) driven by
  a new symmetric variable F. Linearizing -F0 F^{-1} F0 <= -2F0 + F is exact
  at F = F0, so the form loses nothing at the base point.

Every feasible point of a relaxed pencil satisfies the original nonconvex
constraint; tests enforce that implication by substitution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockmat import is_symmetric, max_eigenvalue
from .dissipativity import QsrTriple
from .network import vndt_qhat
from .sdp.expr import AffineMatrix, bmat, he_expr
from .sdp.model import VarHandle


def _lift(x) -> AffineMatrix:
    if isinstance(x, AffineMatrix):
        return x
    return AffineMatrix.constant(np.atleast_2d(np.asarray(x, dtype=float)))


def _expr_of(problem, x) -> AffineMatrix:
    if isinstance(x, VarHandle):
        return problem.expr(x)
    return _lift(x)


@dataclass(frozen=True)
class BmiTerm:
    """One bilinear constraint Qpart + He(X N Y) < 0.

    Qpart (n x n, symmetric), X (n x p) and Y (q x n) may be affine
    expressions; N (p x q) is constant data.
    """

    Qpart: object
    X: object
    N: np.ndarray
    Y: object

    def __post_init__(self):
        object.__setattr__(self, "N", np.atleast_2d(np.asarray(self.N, dtype=float)))
        n = _lift(self.Qpart).shape[0]
        X, Y = _lift(self.X), _lift(self.Y)
        p, q = self.N.shape
        if _lift(self.Qpart).shape != (n, n):
            raise ValueError("Qpart must be square")
        if X.shape != (n, p):
            raise ValueError(f"X must be {(n, p)}, got {X.shape}")
        if Y.shape != (q, n):
            raise ValueError(f"Y must be {(q, n)}, got {Y.shape}")

    @property
    def dims(self):
        n = _lift(self.Qpart).shape[0]
        p, q = self.N.shape
        return n, p, q

    def value(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the original bilinear pencil at a scalar vector."""
        Qv = _lift(self.Qpart).evaluate(x)
        Xv = _lift(self.X).evaluate(x)
        Yv = _lift(self.Y).evaluate(x)
        M = Xv @ self.N @ Yv
        return Qv + M + M.T


@dataclass(frozen=True)
class OverboundAux:
    """Auxiliary data and variables for the augmented overbounding form.

    G0 must have He(G0) > 0 and F0 must be symmetric positive definite; the
    identity is the standard initialization for both.
    """

    G0: np.ndarray
    F0: np.ndarray
    dG: VarHandle
    F: VarHandle

    @staticmethod
    def create(problem, G0, F0=None, name: str = "aux") -> "OverboundAux":
        G0 = np.atleast_2d(np.asarray(G0, dtype=float))
        q = G0.shape[0]
        if G0.shape != (q, q):
            raise ValueError("G0 must be square")
        if np.linalg.eigvalsh(G0 + G0.T)[0] <= 0:
            raise ValueError("He(G0) must be positive definite")
        F0 = np.eye(q) if F0 is None else np.atleast_2d(np.asarray(F0, dtype=float))
        if not is_symmetric(F0, tol=1e-10) or np.linalg.eigvalsh(F0)[0] <= 0:
            raise ValueError("F0 must be symmetric positive definite")
        dG = problem.add_general(q, q, f"{name}:dG")
        F = problem.add_symmetric(q, f"{name}:F")
        return OverboundAux(G0=G0, F0=F0, dG=dG, F=F)


def relax_sebe(problem, term: BmiTerm, G, name: str = "bmi", sense: str = "strict"):
    """Bordered overbound: one extra block row, G constant.

        [ Qpart            X N + Y'G' ]
        [ N'X' + G Y        -He(G)    ]

    Feasibility implies the original bilinear constraint for any square G
    with He(G) > 0.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n, p, q = term.dims
    if G.shape != (q, q):
        raise ValueError(f"G must be {(q, q)}, got {G.shape}")
    if np.linalg.eigvalsh(G + G.T)[0] <= 0:
        raise ValueError("He(G) must be positive definite")
    X, Y = _lift(term.X), _lift(term.Y)
    border = X @ term.N + Y.T @ G.T
    pencil = bmat([
        [term.Qpart, border],
        [border.T, -(G + G.T)],
    ])
    return problem.add_lmi(pencil, sense, name)


def relax_ren(problem, term: BmiTerm, aux: OverboundAux, name: str = "bmi",
              sense: str = "strict"):
    """Augmented overbound with adjustable G = G0 + dG.

        [ Qpart        *              *     0       ]
        [ N'X' + G0 Y  -He(G0 + dG)   0     *       ]
        [ Y             0            -F     0       ]
        [ 0            F0 dG'         0  -2F0 + F   ]

    The extra diagonal blocks charge for the dG*Y bilinearity; dG = 0 and
    F = F0 recover the bordered form at G0 exactly.
    """
    n, p, q = term.dims
    if aux.G0.shape != (q, q):
        raise ValueError(f"aux G0 must be {(q, q)}, got {aux.G0.shape}")
    X, Y = _lift(term.X), _lift(term.Y)
    dG = problem.expr(aux.dG)
    F = problem.expr(aux.F)
    border = X @ term.N + Y.T @ aux.G0.T
    dGF0 = dG @ aux.F0
    pencil = bmat([
        [term.Qpart, border, Y.T, None],
        [border.T, -(aux.G0 + aux.G0.T) - he_expr(dG), None, dGF0],
        [Y, None, -F, None],
        [None, dGF0.T, None, -2.0 * aux.F0 + F],
    ])
    return problem.add_lmi(pencil, sense, name)


@dataclass(frozen=True)
class LinearizationPoint:
    """A point satisfying both nonconvex constraints, with margins recorded.

    Build through linearization_point(), which verifies feasibility; the raw
    constructor performs no checks.
    """

    K0: np.ndarray
    P0: np.ndarray
    qsr0: QsrTriple
    H0: np.ndarray
    G0: np.ndarray
    F0: np.ndarray
    lyap_margin: float
    vndt_margin: float


def lyapunov_gram(A, B, Qlq, Rlq, K, P) -> np.ndarray:
    """Left side of the LQ Lyapunov inequality He(P(A-BK)) + Qlq + K'Rlq K."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    K = np.asarray(K, dtype=float)
    P = np.asarray(P, dtype=float)
    Acl = A - B @ K
    M = P @ Acl
    return M + M.T + np.asarray(Qlq, dtype=float) + K.T @ np.asarray(Rlq, dtype=float) @ K


def linearization_point(A, B, Qlq, Rlq, K0, P0, qsr0: QsrTriple, H0,
                        G0=None, F0=None, feas_tol: float = 1e-9) -> LinearizationPoint:
    """Validated constructor: both original constraints must hold at the point.

    The LQ inequality may hold with equality (it is non-strict); the network
    stability pencil must be strictly negative, since the relaxation around
    a boundary point has no room to move.
    """
    K0 = np.asarray(K0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    H0 = np.asarray(H0, dtype=float)
    m = K0.shape[0]
    G0 = np.eye(m) if G0 is None else np.atleast_2d(np.asarray(G0, dtype=float))
    F0 = np.eye(m) if F0 is None else np.atleast_2d(np.asarray(F0, dtype=float))
    lyap = max_eigenvalue(lyapunov_gram(A, B, Qlq, Rlq, K0, P0))
    if lyap > feas_tol:
        raise ValueError(f"linearization point violates the LQ inequality by {lyap:.3e}")
    if np.linalg.eigvalsh(P0)[0] <= 0:
        raise ValueError("P0 must be positive definite")
    vndt = max_eigenvalue(vndt_qhat(qsr0, H0))
    if vndt >= 0.0:
        raise ValueError(
            f"linearization point is not strictly network-feasible (margin {vndt:.3e})"
        )
    return LinearizationPoint(K0=K0, P0=P0, qsr0=qsr0, H0=H0, G0=G0, F0=F0,
                              lyap_margin=float(lyap), vndt_margin=float(vndt))


def lyapunov_lq_relaxation(problem, A, B, Qlq, Rlq, point: LinearizationPoint,
                           dK, dP, aux: OverboundAux = None,
                           form: str = "ren", name: str = "lq"):
    """Convex step constraint for the LQ Lyapunov inequality around the point.

    The exact substitution K = K0+dK, P = P0+dP splits He(P(A-BK)) into a
    part linear in (dP, dK) plus the bilinear remainder He(-dP B dK); the
    remainder is overbounded with X = [dP B; 0], Y = [-dK 0], N = I. The
    Rlq quadratic enters through its Schur complement, so Rlq must be
    positive definite.

    form="ren" (default) uses the augmented overbound with the point's
    (G0, F0) and the aux variables; form="sebe" uses the bordered form with
    constant G0 and needs no aux.

    Any feasible (dK, dP, ...) keeps the original inequality satisfied at
    (K0+dK, P0+dP); positivity of the updated P is added alongside.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Qlq = np.asarray(Qlq, dtype=float)
    Rlq = np.asarray(Rlq, dtype=float)
    try:
        np.linalg.cholesky(Rlq)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Rlq must be positive definite") from exc
    Rinv = np.linalg.inv(Rlq)
    Rinv = 0.5 * (Rinv + Rinv.T)
    dK = _expr_of(problem, dK)
    dP = _expr_of(problem, dP)
    K0, P0, G0, F0 = point.K0, point.P0, point.G0, point.F0
    m = K0.shape[0]

    Acl0 = A - B @ K0
    # exact linear part of He(P(A-BK)): the remainder is He(-dP B dK)
    L = he_expr((P0 + dP) @ Acl0) - he_expr((P0 @ B) @ dK)
    top = L + Qlq
    Kexpr = K0 + dK
    border = (dP @ B).T - G0 @ dK  # N'X' + G0*Y with X=[dP B;0], Y=[-dK 0]

    cons = []
    if form == "sebe":
        pencil = bmat([
            [top, Kexpr.T, border.T],
            [Kexpr, -Rinv, None],
            [border, None, -(G0 + G0.T)],
        ])
        cons.append(problem.add_lmi(pencil, "nsd", name))
    elif form == "ren":
        if aux is None:
            raise ValueError("form='ren' needs aux variables (OverboundAux.create)")
        if aux.G0.shape != (m, m):
            raise ValueError("aux dimensions must match the gain row count")
        dG = problem.expr(aux.dG)
        F = problem.expr(aux.F)
        dGF0 = dG @ aux.F0
        pencil = bmat([
            [top, Kexpr.T, border.T, -dK.T, None],
            [Kexpr, -Rinv, None, None, None],
            [border, None, -(aux.G0 + aux.G0.T) - he_expr(dG), None, dGF0],
            [-dK, None, None, -F, None],
            [None, None, dGF0.T, None, -2.0 * aux.F0 + F],
        ])
        cons.append(problem.add_lmi(pencil, "nsd", name))
    else:
        raise ValueError(f"unknown form {form!r}")
    cons.append(problem.add_lmi(-(P0 + dP), "strict", f"{name}:pd"))
    return cons


def vndt_relaxation(problem, point: LinearizationPoint, dQ, dS, dR, dH,
                    g1: float = 1.0, g2: float = 1.0, name: str = "vndt"):
    """Convex step constraint for the network stability pencil.

    Exact substitution leaves, beyond the affine part M, the remainders
    He(dS dH) + dH'(R0+dR)dH + He(dH' dR H0). Two bordered overbounds with
    G = g1*I and G = g2*I absorb them:

        [ M                 *      *        *   ]
        [ dS' + g1 dH     -2g1 I   0        0   ]
        [ R0 dH/2 + g1 dH   0    -2g1 I     *   ]
        [ dR H0 + g2 dH     0    dR/2    -2g2 I ]

    Feasible deltas keep the true pencil strictly negative at the updated
    point (Q0+dQ, S0+dS, R0+dR, H0+dH).
    """
    if not (g1 > 0 and g2 > 0):
        raise ValueError("overbounding multipliers must be positive")
    if point.vndt_margin >= 0.0:
        raise ValueError("linearization point must be strictly feasible")
    dQ = _expr_of(problem, dQ)
    dS = _expr_of(problem, dS)
    dR = _expr_of(problem, dR)
    dH = _expr_of(problem, dH)
    Q0 = np.asarray(point.qsr0.Q, dtype=float)
    S0 = np.asarray(point.qsr0.S, dtype=float)
    R0 = np.asarray(point.qsr0.R, dtype=float)
    H0 = point.H0
    ny = Q0.shape[0]
    nu = R0.shape[0]
    if dH.shape != (nu, ny):
        raise ValueError(f"dH must be {(nu, ny)}, got {dH.shape}")

    R0H0 = R0 @ H0
    M = (
        Q0
        + dQ
        + he_expr(AffineMatrix.constant(S0 @ H0) + dS @ H0 + S0 @ dH)
        + H0.T @ R0H0
        + H0.T @ (dR @ H0)
        + he_expr(dH.T @ R0H0)
    )
    r2 = dS.T + g1 * dH
    r3 = (0.5 * R0) @ dH + g1 * dH
    r4 = dR @ H0 + g2 * dH
    half_dR = 0.5 * dR
    eye1 = 2.0 * g1 * np.eye(nu)
    eye2 = 2.0 * g2 * np.eye(nu)
    pencil = bmat([
        [M, r2.T, r3.T, r4.T],
        [r2, -eye1, None, None],
        [r3, None, -eye1, half_dR.T],
        [r4, None, half_dR, -eye2],
    ])
    return [problem.add_lmi(pencil, "strict", name)]


def verify_implication(evaluator, *point) -> float:
    """Max eigenvalue of the original nonconvex pencil at a recovered point.

    The soundness gate for every relaxation: values <= 0 (up to solver
    tolerance) confirm the convex step never left the true feasible set.
    """
    return max_eigenvalue(evaluator(*point))
