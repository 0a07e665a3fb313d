"""Problem container for linear SDPs with a small quadratic-penalty extension.

Variables are declared as scalars, symmetric matrices, or general (possibly
masked) matrices; internally everything is a flat vector of scalars. A masked
entry of a general variable has no scalar at all, so no constraint or
objective can ever touch it.

Constraints are linear matrix inequalities ``F0 + sum_i x_i Fi <= 0`` in the
semidefinite order. A constraint declared strict is realized for the solver
as ``F0 + margin*I + sum_i x_i Fi <= 0``; the margin is a solver-config knob,
not part of the stored problem.

Quadratic objective terms ``(rho/2)*||E(x)||_F^2`` for an affine matrix E are
kept symbolic and lowered to epigraph LMIs by :func:`reformulate_quadratic`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .expr import AffineMatrix

_KINDS = ("scalar", "symmetric", "general")


@dataclass(frozen=True)
class VarHandle:
    """Opaque handle for a declared variable block."""

    index: int
    name: str
    kind: str
    n: int
    m: int
    offset: int  # first scalar index
    size: int  # number of scalars
    mask: tuple | None = None  # general only: row-major (i, j) of live entries

    @property
    def shape(self):
        if self.kind == "scalar":
            return (1, 1)
        return (self.n, self.m)


@dataclass
class LmiConstraint:
    """F0 + sum_i x_i Fi <= 0 (negative semidefinite)."""

    dim: int
    constant: np.ndarray
    coeffs: dict  # scalar index -> csr_matrix (dim x dim, symmetric)
    sense: str = "nsd"  # "nsd" or "strict"
    name: str = ""

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        F = self.constant.copy()
        for i, C in self.coeffs.items():
            xi = x[i]
            if xi != 0.0:
                F += xi * C.toarray()
        return F


@dataclass
class QuadTerm:
    rho: float
    expr: AffineMatrix
    name: str = ""


@dataclass
class SolverConfig:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    margin: float = 1e-7
    backend: str = "ipm"
    verbose: bool = False


@dataclass
class SdpSolution:
    """Result of a solve.

    status is one of "optimal", "infeasible", "unbounded", "max_iterations",
    "numerical_failure". x holds one float per scalar variable of the problem
    that was actually solved (after quadratic reformulation, so epigraph
    scalars appear at the end). max_constraint_violation is the largest
    eigenvalue over the realized constraint pencils, measured per block
    relative to max(1, ||F0||_inf) so that it is comparable to the solver's
    scaled feasibility tolerance. Both it and objective_value are filled in
    for any finite returned iterate, not just "optimal" ones, so callers can
    judge near-converged returns on their merits.
    """

    status: str
    x: np.ndarray
    objective_value: float
    iterations: int
    max_constraint_violation: float
    certificate: dict | None = None
    info: dict = field(default_factory=dict)


class SdpProblem:
    def __init__(self):
        self.vars: list[VarHandle] = []
        self.n_scalars: int = 0
        self.constraints: list[LmiConstraint] = []
        self.quad_terms: list[QuadTerm] = []
        self.objective: dict[int, float] = {}
        self.objective_const: float = 0.0

    # -- variables ------------------------------------------------------

    def _new_var(self, name, kind, n, m, size, mask=None) -> VarHandle:
        h = VarHandle(
            index=len(self.vars),
            name=name,
            kind=kind,
            n=n,
            m=m,
            offset=self.n_scalars,
            size=size,
            mask=mask,
        )
        self.vars.append(h)
        self.n_scalars += size
        return h

    def add_scalar(self, name="x") -> VarHandle:
        return self._new_var(name, "scalar", 1, 1, 1)

    def add_symmetric(self, n, name="P") -> VarHandle:
        n = int(n)
        if n < 1:
            raise ValueError("symmetric variable needs n >= 1")
        return self._new_var(name, "symmetric", n, n, n * (n + 1) // 2)

    def add_general(self, n, m, name="K", structure_mask=None) -> VarHandle:
        n, m = int(n), int(m)
        if n < 1 or m < 1:
            raise ValueError("general variable needs positive dims")
        if structure_mask is None:
            live = tuple((i, j) for i in range(n) for j in range(m))
        else:
            Mk = np.asarray(structure_mask, dtype=bool)
            if Mk.shape != (n, m):
                raise ValueError(f"mask shape {Mk.shape} != {(n, m)}")
            live = tuple((i, j) for i in range(n) for j in range(m) if Mk[i, j])
            if not live:
                raise ValueError("structure mask removes every entry")
        return self._new_var(name, "general", n, m, len(live), mask=live)

    def expr(self, h: VarHandle) -> AffineMatrix:
        """Affine expression equal to the variable block itself."""
        if h.kind == "scalar":
            return AffineMatrix(
                (1, 1), coeffs={h.offset: sp.csr_matrix(np.ones((1, 1)))}
            )
        if h.kind == "symmetric":
            n = h.n
            coeffs = {}
            k = 0
            for i in range(n):
                for j in range(i, n):
                    if i == j:
                        C = sp.csr_matrix(([1.0], ([i], [j])), shape=(n, n))
                    else:
                        C = sp.csr_matrix(
                            ([1.0, 1.0], ([i, j], [j, i])), shape=(n, n)
                        )
                    coeffs[h.offset + k] = C
                    k += 1
            return AffineMatrix((n, n), coeffs=coeffs)
        coeffs = {}
        for k, (i, j) in enumerate(h.mask):
            coeffs[h.offset + k] = sp.csr_matrix(
                ([1.0], ([i], [j])), shape=(h.n, h.m)
            )
        return AffineMatrix((h.n, h.m), coeffs=coeffs)

    # -- values -----------------------------------------------------------

    def value_of(self, h: VarHandle, x: np.ndarray) -> np.ndarray:
        """Materialize a variable block from the flat scalar vector."""
        seg = np.asarray(x)[h.offset : h.offset + h.size]
        if h.kind == "scalar":
            return np.array([[seg[0]]])
        if h.kind == "symmetric":
            n = h.n
            M = np.zeros((n, n))
            k = 0
            for i in range(n):
                for j in range(i, n):
                    M[i, j] = seg[k]
                    M[j, i] = seg[k]
                    k += 1
            return M
        M = np.zeros((h.n, h.m))
        for k, (i, j) in enumerate(h.mask):
            M[i, j] = seg[k]
        return M

    def scalars_of(self, h: VarHandle, M) -> np.ndarray:
        """Inverse of value_of: flatten a concrete block into its scalars."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if h.kind == "scalar":
            return np.array([M[0, 0]])
        if h.kind == "symmetric":
            if M.shape != (h.n, h.n):
                raise ValueError("shape mismatch")
            return np.array([M[i, j] for i in range(h.n) for j in range(i, h.n)])
        if M.shape != (h.n, h.m):
            raise ValueError("shape mismatch")
        return np.array([M[i, j] for (i, j) in h.mask])

    # -- objective / constraints ------------------------------------------

    def set_objective(self, linear: dict | None = None, const: float = 0.0):
        self.objective = dict(linear) if linear else {}
        self.objective_const = float(const)

    def add_trace_objective(self, X: AffineMatrix, weight: float = 1.0):
        """Add weight*trace(X) to the (linear) objective."""
        c0, lin = X.trace_terms()
        self.objective_const += weight * c0
        for i, v in lin.items():
            self.objective[i] = float(self.objective.get(i, 0.0) + weight * v)

    def add_lmi(self, X: AffineMatrix, sense: str = "nsd", name: str = ""):
        """Constrain the square symmetric expression X <= 0."""
        if sense not in ("nsd", "strict"):
            raise ValueError(f"unknown sense {sense!r}")
        r, c = X.shape
        if r != c:
            raise ValueError("LMI expression must be square")
        const = X.const
        skew = np.max(np.abs(const - const.T)) if r else 0.0
        if skew > 1e-9 * (1.0 + np.max(np.abs(const), initial=0.0)):
            raise ValueError(f"LMI constant not symmetric (skew {skew:.2e})")
        const = 0.5 * (const + const.T)
        coeffs = {}
        for i, C in X.coeffs.items():
            Cs = 0.5 * (C + C.T)
            d = abs(C - C.T)
            if d.nnz and d.max() > 1e-9 * (1.0 + abs(C).max()):
                raise ValueError(f"LMI coefficient of scalar {i} not symmetric")
            coeffs[i] = Cs.tocsr()
        con = LmiConstraint(
            dim=r, constant=const, coeffs=coeffs, sense=sense, name=name
        )
        self.constraints.append(con)
        return con

    def add_quad_term(self, rho: float, E: AffineMatrix, name: str = ""):
        """Add (rho/2)*||E||_F^2 to the objective (lowered at solve time)."""
        rho = float(rho)
        if rho <= 0.0:
            raise ValueError("quadratic weight must be positive")
        self.quad_terms.append(QuadTerm(rho=rho, expr=E, name=name))

    # -- realization -------------------------------------------------------

    def realized_constant(self, con: LmiConstraint, margin: float) -> np.ndarray:
        if con.sense == "strict" and margin > 0.0:
            return con.constant + margin * np.eye(con.dim)
        return con.constant


def reformulate_quadratic(problem: SdpProblem) -> SdpProblem:
    """Lower quad terms to epigraph LMIs; returns a new problem.

    Existing scalar indices are preserved, so a solution of the returned
    problem can be read with the original problem's handles. Each term
    (rho/2)*||E||_F^2 becomes a scalar t with

        [ -t I      vec(E) ]
        [ vec(E)^T  -2/rho ]  <=  0

    which pins t to (rho/2)*||E||_F^2 at the optimum, plus t in the objective.
    """
    out = SdpProblem()
    out.vars = list(problem.vars)
    out.n_scalars = problem.n_scalars
    out.constraints = list(problem.constraints)
    out.objective = dict(problem.objective)
    out.objective_const = problem.objective_const
    out.quad_terms = []
    for q in problem.quad_terms:
        r, c = q.expr.shape
        L = r * c
        t = out.add_scalar(name=f"epi_{q.name or 'quad'}")
        dim = L + 1
        const = np.zeros((dim, dim))
        const[L, L] = -2.0 / q.rho
        v0 = q.expr.const.reshape(-1)
        const[:L, L] = v0
        const[L, :L] = v0
        coeffs = {}
        for i, C in q.expr.coeffs.items():
            vec = np.asarray(C.todense()).reshape(-1)
            nz = np.nonzero(vec)[0]
            rows = np.concatenate([nz, np.full(len(nz), L)])
            cols = np.concatenate([np.full(len(nz), L), nz])
            vals = np.concatenate([vec[nz], vec[nz]])
            coeffs[i] = sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))
        tijc = sp.csr_matrix(
            (-np.ones(L), (np.arange(L), np.arange(L))), shape=(dim, dim)
        )
        coeffs[t.offset] = tijc
        out.constraints.append(
            LmiConstraint(
                dim=dim,
                constant=const,
                coeffs=coeffs,
                sense="nsd",
                name=f"epi:{q.name}",
            )
        )
        out.objective[t.offset] = out.objective.get(t.offset, 0.0) + 1.0
    return out


def verify_solution(problem: SdpProblem, x: np.ndarray) -> float:
    """Max eigenvalue over all raw constraint pencils at x (no margins).

    Independent of the solver: evaluates each F0 + sum x_i Fi densely and
    takes eigvalsh. Negative return means strictly feasible as stated.
    """
    worst = -np.inf
    for con in problem.constraints:
        F = con.evaluate(np.asarray(x, dtype=float))
        F = 0.5 * (F + F.T)
        lam = float(np.linalg.eigvalsh(F)[-1])
        worst = max(worst, lam)
    return worst


def _scaled_violation(problem: SdpProblem, x: np.ndarray, margin: float) -> float:
    worst = 0.0
    for con in problem.constraints:
        F0 = problem.realized_constant(con, margin)
        F = F0.copy()
        for i, C in con.coeffs.items():
            xi = x[i]
            if xi != 0.0:
                F += xi * C.toarray()
        lam = float(np.linalg.eigvalsh(0.5 * (F + F.T))[-1])
        scale = max(1.0, float(np.max(np.abs(F0), initial=0.0)))
        worst = max(worst, lam / scale)
    return worst


# data spread beyond this triggers per-row balancing of each pencil
_BALANCE_TRIGGER = 1e5


def _balanced_copy(problem: SdpProblem, margin: float):
    """(scaled problem, per-constraint diagonals) or (problem, None).

    A single scalar per constraint cannot fix a pencil whose sub-blocks
    differ by many orders of magnitude, which is exactly what synthesis
    subproblems around large gains produce. Each constraint is replaced by
    the congruence D F(x) D with diagonal D chosen by a few Ruiz passes on
    the aggregate magnitude |F0| + sum |Fi|; congruence preserves the
    semidefinite order, so the feasible set in x is untouched. Margins are
    folded into the constants first so the strictness offset keeps its
    original units.
    """
    top = 0.0
    for con in problem.constraints:
        top = max(top, float(np.max(np.abs(con.constant), initial=0.0)))
        for C in con.coeffs.values():
            if C.nnz:
                top = max(top, float(np.max(np.abs(C.data))))
    if top < _BALANCE_TRIGGER:
        return problem, None

    out = SdpProblem()
    out.vars = list(problem.vars)
    out.n_scalars = problem.n_scalars
    out.objective = dict(problem.objective)
    out.objective_const = problem.objective_const
    diagonals = []
    for con in problem.constraints:
        F0 = problem.realized_constant(con, margin)
        mag = np.abs(F0)
        for C in con.coeffs.values():
            mag = np.maximum(mag, np.abs(C.toarray()))
        d = np.ones(con.dim)
        for _ in range(10):
            row = np.max(mag * np.outer(d, d), axis=1)
            d = d / np.sqrt(np.sqrt(np.maximum(row, 1e-16)))
            d = np.clip(d, 1e-8, 1e8)
        coeffs = {
            i: sp.csr_matrix(d[:, None] * C.toarray() * d[None, :])
            for i, C in con.coeffs.items()
        }
        out.constraints.append(
            LmiConstraint(
                dim=con.dim,
                constant=d[:, None] * F0 * d[None, :],
                coeffs=coeffs,
                sense="nsd",
                name=con.name,
            )
        )
        diagonals.append(d)
    return out, diagonals


def _unscale_certificate(problem: SdpProblem, cert: dict, diagonals,
                         margin: float) -> dict:
    """Map a dual ray of the balanced problem back to the original data.

    Z' = D Z D turns <D Fi D, Z> into <Fi, Z'>; the residual is then
    re-measured against the unscaled constraints so downstream consumers
    can trust it.
    """
    if cert.get("kind") != "primal_infeasible" or diagonals is None:
        return cert
    blocks = {}
    gz = np.zeros(problem.n_scalars)
    hz = 0.0
    for k, Z in cert["z_blocks"].items():
        d = diagonals[k]
        Zr = d[:, None] * Z * d[None, :]
        blocks[k] = Zr
        con = problem.constraints[k]
        for i, C in con.coeffs.items():
            gz[i] += float(np.sum(C.toarray() * Zr))
        hz += -float(np.sum(problem.realized_constant(con, margin) * Zr))
    res = float(np.max(np.abs(gz), initial=0.0)) / max(1.0, abs(hz))
    return {"kind": "primal_infeasible", "z_blocks": blocks, "residual": res}


def solve(problem: SdpProblem, config: SolverConfig | None = None) -> SdpSolution:
    """Solve the problem with the configured backend.

    Quadratic terms are lowered first; strict constraints get the margin
    folded into their constant term. The returned solution is checked
    against the realized constraints independently of the backend, and an
    "optimal" claim is downgraded if that check fails.
    """
    if config is None:
        config = SolverConfig()
    work = reformulate_quadratic(problem) if problem.quad_terms else problem

    if config.backend == "ipm":
        from .ipm import solve_ipm as backend_solve
    elif config.backend == "cvxopt":
        from .cvxopt_backend import solve_cvxopt as backend_solve
    else:
        raise ValueError(f"unknown backend {config.backend!r}")

    balanced, diagonals = _balanced_copy(work, config.margin)
    if diagonals is None:
        sol = backend_solve(work, config)
    else:
        # margins are already folded into the balanced constants
        sol = backend_solve(balanced, replace(config, margin=0.0))
        if sol.certificate is not None:
            sol.certificate = _unscale_certificate(
                work, sol.certificate, diagonals, config.margin)

    usable = sol.x.size == work.n_scalars and bool(np.all(np.isfinite(sol.x)))
    if usable and work.constraints:
        viol = _scaled_violation(work, sol.x, config.margin)
        sol.max_constraint_violation = viol
        if sol.status == "optimal" and viol > 10.0 * config.feas_tol:
            sol.status = "max_iterations"
            sol.info["downgraded"] = (
                f"backend reported optimal but violation {viol:.3e} exceeds "
                f"10*feas_tol"
            )
    if usable:
        lin = sum(work.objective.get(i, 0.0) * sol.x[i] for i in work.objective)
        sol.objective_value = lin + work.objective_const
    return sol
