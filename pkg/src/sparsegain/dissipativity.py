"""Quadratic supply-rate (QSR) dissipativity certificates.

A system with input u and output y is dissipative against the supply rate

    s(u, y) = y'Qy + 2 y'Su + u'Ru

when a storage function x'Px, P > 0, absorbs it along trajectories. For
linear dynamics that is one linear matrix inequality jointly affine in
(P, Q, S, R), so dissipativity budgets can be searched for alongside
everything else in a single semidefinite program.

All pencil builders work uniformly on numeric arrays and on affine
expressions of decision variables: numeric inputs produce a pencil whose
coefficient set is empty, and its .const is the plain matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .blockmat import max_eigenvalue
from .sdp.expr import AffineMatrix, bmat, he_expr
from .sdp.model import VarHandle

DEFAULT_MARGIN = 1e-7


def _mat(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class StateSpace:
    """LTI realization; C defaults to identity, D to zero.

    Minimality is assumed, not checked: the certificate is still sound for
    non-minimal realizations, merely conservative.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray = None
    D: np.ndarray = None

    def __post_init__(self):
        A = _mat(self.A)
        B = _mat(self.B)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape[0] != n:
            raise ValueError("B row count must match A")
        C = np.eye(n) if self.C is None else _mat(self.C)
        if C.shape[1] != n:
            raise ValueError("C column count must match A")
        if self.D is None:
            D = np.zeros((C.shape[0], B.shape[1]))
        else:
            D = _mat(self.D)
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError("D must be (outputs x inputs)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class PolytopicModel:
    """Dynamics ranging over the convex hull of (A_j, B_j) vertex pairs.

    Full state is measured (C = I, D = 0). The time-varying combination
    weights are never materialized; feasibility at the vertices covers them.
    """

    vertices: tuple

    def __post_init__(self):
        verts = tuple((_mat(A), _mat(B)) for A, B in self.vertices)
        if not verts:
            raise ValueError("polytopic model needs at least one vertex")
        n, m = verts[0][0].shape[0], verts[0][1].shape[1]
        for A, B in verts:
            if A.shape != (n, n) or B.shape != (n, m):
                raise ValueError("all vertices must share dimensions")
        object.__setattr__(self, "vertices", verts)

    @property
    def n(self) -> int:
        return self.vertices[0][0].shape[0]

    @property
    def m(self) -> int:
        return self.vertices[0][1].shape[1]


@dataclass(frozen=True)
class FixedQsr:
    """Agent with a known supply-rate shape, scaled by a free scalar.

    Scaling a valid rate by lam > 0 keeps it valid, so one scalar decision
    variable per agent is enough to re-tune a prescribed certificate
    (a passivity prescription, say) inside the network search.
    """

    Q_p: np.ndarray
    S_p: np.ndarray
    R_p: np.ndarray
    lam_min: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "Q_p", _mat(self.Q_p))
        object.__setattr__(self, "S_p", _mat(self.S_p))
        object.__setattr__(self, "R_p", _mat(self.R_p))
        if not self.lam_min > 0:
            raise ValueError("lam_min must be positive")


@dataclass(frozen=True)
class AgentModel:
    """Tagged wrapper: LTI, polytopic-uncertain, or fixed-QSR agent."""

    model: object

    @property
    def kind(self) -> str:
        if isinstance(self.model, StateSpace):
            return "lti"
        if isinstance(self.model, PolytopicModel):
            return "polytopic"
        if isinstance(self.model, FixedQsr):
            return "fixed_qsr"
        raise NotImplementedError(f"unsupported agent kind {type(self.model).__name__}")


@dataclass
class QsrTriple:
    """Supply-rate triple; Q is (l,l) symmetric, S is (l,m), R is (m,m).

    Entries may be numpy arrays or affine expressions of decision variables.
    """

    Q: object
    S: object
    R: object

    def scaled(self, lam) -> "QsrTriple":
        return QsrTriple(Q=lam * self.Q, S=lam * self.S, R=lam * self.R)


def _lift(x) -> AffineMatrix:
    if isinstance(x, AffineMatrix):
        return x
    return AffineMatrix.constant(np.atleast_2d(np.asarray(x, dtype=float)))


def _expr_of(problem, x):
    """Accept a VarHandle, an expression, or a numeric matrix."""
    if isinstance(x, VarHandle):
        return problem.expr(x)
    return x


def _norm_triple(problem, qsr: QsrTriple) -> QsrTriple:
    return QsrTriple(
        Q=_expr_of(problem, qsr.Q),
        S=_expr_of(problem, qsr.S),
        R=_expr_of(problem, qsr.R),
    )


def kyp_pencil(ss: StateSpace, P, qsr: QsrTriple) -> AffineMatrix:
    """Dissipation LMI for (A,B,C,D): pencil <= 0 certifies the rate.

        [ He(PA) - C'QC       PB - C'S - C'QD   ]
        [       *          -R - He(S'D) - D'QD  ]
    """
    P = _lift(P)
    Q, S, R = _lift(qsr.Q), _lift(qsr.S), _lift(qsr.R)
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    tl = he_expr(P @ A) - C.T @ Q @ C
    tr = P @ B - C.T @ S - C.T @ Q @ D
    br = -R - he_expr(S.T @ D) - D.T @ Q @ D
    return bmat([[tl, tr], [tr.T, br]])


def kyp_constraint(problem, ss: StateSpace, P, qsr: QsrTriple, name: str = "kyp"):
    """Add the dissipation pencil and P > 0; returns the constraints."""
    P = _expr_of(problem, P)
    qsr = _norm_triple(problem, qsr)
    cons = [problem.add_lmi(kyp_pencil(ss, P, qsr), "nsd", name)]
    cons.append(problem.add_lmi(-_lift(P), "strict", f"{name}:pd"))
    return cons


def vertex_pencil(A, B, P, qsr: QsrTriple) -> AffineMatrix:
    """One vertex of the uncertain-dynamics LMI (full-state output case).

        [ He(PA) - Q    PB - S ]
        [     *           -R   ]
    """
    P = _lift(P)
    Q, S, R = _lift(qsr.Q), _lift(qsr.S), _lift(qsr.R)
    tl = he_expr(P @ _mat(A)) - Q
    tr = P @ _mat(B) - S
    return bmat([[tl, tr], [tr.T, -R]])


def polytopic_constraint(problem, model: PolytopicModel, P, qsr: QsrTriple,
                         name: str = "poly"):
    """Vertex LMIs for dynamics in the convex hull of (A_j, B_j) pairs.

    Feasibility at every vertex extends to the whole hull because the pencil
    is affine in (A, B). Adds P > 0 once.
    """
    P = _expr_of(problem, P)
    qsr = _norm_triple(problem, qsr)
    cons = []
    for j, (A, B) in enumerate(model.vertices):
        cons.append(problem.add_lmi(vertex_pencil(A, B, P, qsr), "nsd", f"{name}:{j}"))
    cons.append(problem.add_lmi(-_lift(P), "strict", f"{name}:pd"))
    return cons


def inverting_static_pencil(qsr: QsrTriple) -> AffineMatrix:
    """Dissipation condition of the memoryless sign inverter y = -u.

    No storage, so the supply rate itself must be pointwise nonnegative:
    -R + He(S) - Q <= 0 is that statement rearranged.
    """
    Q, S, R = _lift(qsr.Q), _lift(qsr.S), _lift(qsr.R)
    if Q.shape != S.shape or S.shape != R.shape:
        raise ValueError("sign inverter needs square Q, S, R of equal size")
    return -R + he_expr(S) - Q


def controller_constraint(problem, qsr: QsrTriple, name: str = "ctrl"):
    """Constrain a control channel's rate to one the inverter can supply."""
    qsr = _norm_triple(problem, qsr)
    return [problem.add_lmi(inverting_static_pencil(qsr), "nsd", name)]


def fixed_qsr_constraint(problem, agent: FixedQsr, lam, name: str = "lam") -> QsrTriple:
    """Bind a fixed-shape rate to lam * (Q_p, S_p, R_p) with lam >= lam_min.

    Returns the bound triple for use in downstream pencils; the lower bound
    on lam is added as a 1x1 LMI.
    """
    lam = _expr_of(problem, lam)
    problem.add_lmi(-(_lift(lam) - float(agent.lam_min)), "nsd", name)
    return QsrTriple(
        Q=_scale(lam, agent.Q_p),
        S=_scale(lam, agent.S_p),
        R=_scale(lam, agent.R_p),
    )


def _scale(lam, M: np.ndarray) -> AffineMatrix:
    """lam * M for a 1x1 scalar expression lam and numeric M."""
    lam = _lift(lam)
    if lam.shape != (1, 1):
        raise ValueError("lam must be scalar")
    if M.shape == (1, 1):
        return lam * float(M[0, 0])
    return _expand_scalar(lam, M.shape[0]) @ M


def _expand_scalar(lam: AffineMatrix, d: int) -> AffineMatrix:
    """Expand a 1x1 expression to lam * I_d."""
    out_const = float(lam.const[0, 0]) * np.eye(d)
    coeffs = {}
    for v, c in lam.coeffs.items():
        coeffs[v] = sp.csr_matrix(float(c.toarray()[0, 0]) * np.eye(d))
    return AffineMatrix((d, d), out_const, coeffs)


def is_l2_stable_cert(qsr: QsrTriple, margin: float = DEFAULT_MARGIN) -> bool:
    """Finite-gain L2 stability reading of a closed interconnection budget.

    The combined supply rate of a closed network has no external input left,
    so a strictly negative Q block certifies L2 stability of the loop.
    """
    return max_eigenvalue(np.asarray(qsr.Q, dtype=float)) < -margin


def dissipation_residual(ss: StateSpace, P, qsr: QsrTriple) -> float:
    """Max eigenvalue of the numeric dissipation pencil; <= 0 is certified."""
    pencil = kyp_pencil(ss, P, qsr)
    if pencil.coeffs:
        raise ValueError("residual needs numeric inputs, got decision variables")
    return max_eigenvalue(pencil.const)
