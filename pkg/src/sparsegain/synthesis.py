"""Sparse gain synthesis by successive convex steps around feasible iterates.

The pipeline keeps one invariant at all times: every iterate it accepts is a
complete, directly verified feasible point of the original nonconvex program
(LQ Lyapunov inequality, per-agent dissipation certificates, control-channel
rate bounds, and the network stability pencil). Each stage improves on the
incumbent through a convex relaxation built around it:

    initialize   fix a block-diagonal local gain, solve the remaining LMIs
    centralized  full-gain convex steps, trace(P) non-increasing
    sparsity     one weighted-l1 solve, or an ADMM loop with block
                 hard-thresholding for the cardinality penalty
    structured   convex steps restricted to the promoted sparsity pattern

Solutions of the relaxed subproblems are never trusted blindly: the recovered
point is substituted into the original constraints before it replaces the
incumbent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as _dc_replace

import numpy as np
import scipy.sparse as sp

from .blockmat import (
    PATTERN_TOL,
    BlockMatrix,
    BlockPartition,
    blkdiag,
    block_frobenius_map,
    block_pattern,
    max_eigenvalue,
)
from .dissipativity import (
    DEFAULT_MARGIN,
    AgentModel,
    QsrTriple,
    controller_constraint,
    dissipation_residual,
    fixed_qsr_constraint,
    kyp_constraint,
    polytopic_constraint,
)
from .network import NetworkTopology, assemble_H, combined_qsr, gain_matrix, vndt_qhat
from .overbound import (
    OverboundAux,
    linearization_point,
    lyapunov_gram,
    lyapunov_lq_relaxation,
    vndt_relaxation,
)
from .sdp import SdpProblem, SolverConfig, solve
from .sdp.expr import AffineMatrix, bmat

# accepted steps may not raise the trace by more than this
MONOTONE_SLACK = 1e-9
# solver returns are usable when the iterate is this close to feasible/optimal;
# the gap bound is loose on purpose: a step iterate only needs to verify by
# substitution and improve the trace, not to be the exact subproblem optimum
_VIOL_OK = 1e-7
_GAP_OK = 1e-4
# eigenvalue floor applied to the carried multipliers so the next relaxation
# can always be built around them
_GF_FLOOR = 1e-6
# certified supply rates are a projective gauge: scaling every rate (and the
# per-agent storage) by the same positive factor certifies the same behavior,
# so accepted points are renormalized to this magnitude to keep the step
# subproblems well conditioned
_RATE_SCALE = 1e3


class SynthesisError(RuntimeError):
    """A pipeline stage failed; carries the stage label and the last good point."""

    def __init__(self, stage: str, message: str, point=None, details=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.point = point
        self.details = dict(details or {})


# ---------------------------------------------------------------------------
# problem statement


@dataclass(frozen=True)
class WeightedL1:
    """Convex block-sparsity penalty sum_ij W_ij ||K_ij||_F.

    Weights come from the incumbent gain: 1/||K0_ij||_F for nonzero blocks,
    1/eps_l for blocks that are already zero.
    """

    eps_l: float = 1e-3

    def __post_init__(self):
        if not self.eps_l > 0:
            raise ValueError("eps_l must be positive")


@dataclass(frozen=True)
class Cardinality:
    """Block-cardinality penalty handled by ADMM with hard thresholding."""

    rho: float = 100.0
    eps_p: float = 1e-4
    eps_d: float = 1e-4
    max_admm_iter: int = 100

    def __post_init__(self):
        if not (self.rho > 0 and self.eps_p > 0 and self.eps_d > 0):
            raise ValueError("Cardinality parameters must be positive")
        if self.max_admm_iter < 1:
            raise ValueError("max_admm_iter must be at least 1")


@dataclass(frozen=True)
class SynthesisProblem:
    """Everything a synthesis run needs: plant, network, weights, penalty.

    A and B describe the linearized closed-coupling plant used by the LQ
    criterion; the topology and agent models describe the same network for
    the dissipativity certificates. gamma weighs the sparsity penalty, eps
    stops the convex-step loops on relative trace improvement, mu is the
    strictness margin handed to the solver, and feas_tol is the tolerance at
    which recovered points must satisfy the original constraints.
    """

    agents: tuple
    topology: NetworkTopology
    A: np.ndarray
    B: np.ndarray
    Qlq: np.ndarray
    Rlq: np.ndarray
    penalty: object = None
    gamma: float = 0.0
    eps: float = 1e-3
    mu: float = DEFAULT_MARGIN
    feas_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        for nm in ("A", "B", "Qlq", "Rlq"):
            object.__setattr__(self, nm, np.asarray(getattr(self, nm), dtype=float))
        topo = self.topology
        if not isinstance(topo, NetworkTopology):
            raise ValueError("topology must be a NetworkTopology")
        if len(self.agents) != topo.N:
            raise ValueError("one agent model per topology node required")
        if not all(isinstance(a, AgentModel) for a in self.agents):
            raise ValueError("agents must be AgentModel instances")
        n, mt = topo.n_total, sum(topo.ctrl_dims)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {(n, n)}, got {self.A.shape}")
        if self.B.shape != (n, mt):
            raise ValueError(f"B must be {(n, mt)}, got {self.B.shape}")
        for nm, M, d in (("Qlq", self.Qlq, n), ("Rlq", self.Rlq, mt)):
            if M.shape != (d, d):
                raise ValueError(f"{nm} must be {(d, d)}")
            if np.max(np.abs(M - M.T)) > 1e-12 * (1 + np.max(np.abs(M))):
                raise ValueError(f"{nm} must be symmetric")
            if np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
                raise ValueError(f"{nm} must be positive definite")
        if self.penalty is not None and not isinstance(
            self.penalty, (WeightedL1, Cardinality)
        ):
            raise ValueError("penalty must be WeightedL1, Cardinality, or None")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not (self.eps > 0 and self.mu > 0 and self.feas_tol > 0):
            raise ValueError("tolerances must be positive")

    @property
    def gain_partition(self) -> BlockPartition:
        return BlockPartition(self.topology.ctrl_dims, self.topology.state_dims)


def _rate_dims(agent: AgentModel):
    """(output, input) dimensions of an agent's supply rate."""
    m = agent.model
    kind = agent.kind
    if kind == "lti":
        return m.p, m.m
    if kind == "polytopic":
        return m.n, m.m
    return m.Q_p.shape[0], m.R_p.shape[0]


# ---------------------------------------------------------------------------
# verified iterates


@dataclass(frozen=True)
class FeasiblePoint:
    """One complete iterate. Build through make_feasible_point, which checks
    every original constraint by direct substitution; the raw constructor is
    for internal plumbing only."""

    K: np.ndarray
    P: np.ndarray
    agent_rates: tuple
    ctrl_rates: tuple
    agent_storage: tuple
    lam: tuple
    G: np.ndarray
    F: np.ndarray
    lyap_margin: float
    vndt_margin: float

    @property
    def objective(self) -> float:
        return float(np.trace(self.P))

    def combined_rates(self) -> QsrTriple:
        return combined_qsr(self.agent_rates, self.ctrl_rates)


def _agent_residual(agent: AgentModel, rate: QsrTriple, storage, lam) -> float:
    """Worst violation of one agent's dissipation certificate."""
    kind = agent.kind
    if kind == "fixed_qsr":
        # the shape is trusted; only the scale floor can be violated
        return float(agent.model.lam_min - lam)
    if storage is None:
        return math.inf
    P = np.asarray(storage, dtype=float)
    if np.linalg.eigvalsh(0.5 * (P + P.T))[0] <= 0:
        return math.inf
    if kind == "lti":
        return dissipation_residual(agent.model, P, rate)
    worst = -math.inf
    Q = np.asarray(rate.Q, dtype=float)
    S = np.asarray(rate.S, dtype=float)
    R = np.asarray(rate.R, dtype=float)
    for A, B in agent.model.vertices:
        PA = P @ A
        PB = P @ B
        M = np.block([[PA + PA.T - Q, PB - S], [(PB - S).T, -R]])
        worst = max(worst, max_eigenvalue(M))
    return worst


def _ctrl_residual(rate: QsrTriple) -> float:
    Q = np.asarray(rate.Q, dtype=float)
    S = np.asarray(rate.S, dtype=float)
    R = np.asarray(rate.R, dtype=float)
    return max_eigenvalue(-R + S + S.T - Q)


def _floor_multipliers(G, F):
    """Nudge the carried (G, F) to be safely positive definite.

    Both only parameterize the next relaxation, so a tiny eigenvalue floor
    never affects which points count as feasible; it just keeps the next
    subproblem well posed when the solver parks an eigenvalue at zero.
    """
    G = np.asarray(G, dtype=float).copy()
    F = np.asarray(F, dtype=float)
    F = 0.5 * (F + F.T)
    he_min = np.linalg.eigvalsh(G + G.T)[0]
    if he_min < _GF_FLOOR:
        G += 0.5 * (_GF_FLOOR - he_min) * np.eye(G.shape[0])
    f_min = np.linalg.eigvalsh(F)[0]
    if f_min < _GF_FLOOR:
        F = F + (_GF_FLOOR - f_min) * np.eye(F.shape[0])
    return G, F


def _normalize_certificate(problem, agent_rates, ctrl_rates, agent_storage, lam):
    """Rescale an entire dissipativity certificate to a common magnitude.

    Every constraint touching the rates (agent KYP/vertex pencils with their
    storage, controller rate bounds, the network stability pencil) is
    homogeneous of degree one in (Q, S, R, storage) jointly, so dividing all
    of them by one positive scalar changes nothing about feasibility. Solvers
    tend to inflate the free scale by several orders of magnitude, which then
    poisons the conditioning of the next step subproblem. Fixed-shape agents
    pin their scale floor, so the divisor is capped to keep lam >= lam_min.
    """
    mag = 0.0
    for rate in list(agent_rates) + list(ctrl_rates):
        for part in (rate.Q, rate.S, rate.R):
            arr = np.asarray(part, dtype=float)
            if arr.size:
                mag = max(mag, float(np.abs(arr).max()))
    s = mag / _RATE_SCALE
    for agent, l in zip(problem.agents, lam):
        if agent.kind == "fixed_qsr" and agent.model.lam_min > 0:
            s = min(s, float(l) / agent.model.lam_min)
    if s <= 1.0:
        return agent_rates, ctrl_rates, agent_storage, lam

    def scale_rate(rate):
        return QsrTriple(Q=np.asarray(rate.Q, dtype=float) / s,
                         S=np.asarray(rate.S, dtype=float) / s,
                         R=np.asarray(rate.R, dtype=float) / s)

    agent_rates = tuple(scale_rate(r) for r in agent_rates)
    ctrl_rates = tuple(scale_rate(r) for r in ctrl_rates)
    agent_storage = tuple(None if p is None else np.asarray(p, dtype=float) / s
                          for p in agent_storage)
    lam = tuple(None if l is None else float(l) / s for l in lam)
    return agent_rates, ctrl_rates, agent_storage, lam


def make_feasible_point(problem: SynthesisProblem, K, P, agent_rates, ctrl_rates,
                        agent_storage, lam, G, F, *, stage: str = "verify") -> FeasiblePoint:
    """Substitute a candidate iterate into the original constraints.

    Raises SynthesisError with a per-constraint report when any of them is
    violated beyond problem.feas_tol (the network pencil must be strictly
    negative). The returned point carries the measured margins; rates are
    brought to a common magnitude first (a pure change of gauge).
    """
    tol = problem.feas_tol
    K = np.asarray(K, dtype=float)
    P = np.asarray(P, dtype=float)
    P = 0.5 * (P + P.T)
    agent_rates, ctrl_rates, agent_storage, lam = _normalize_certificate(
        problem, agent_rates, ctrl_rates, agent_storage, lam)
    report = []
    lyap = max_eigenvalue(lyapunov_gram(problem.A, problem.B, problem.Qlq,
                                        problem.Rlq, K, P))
    if lyap > tol:
        report.append(f"LQ inequality violated by {lyap:.3e}")
    if np.linalg.eigvalsh(P)[0] <= 0:
        report.append("P not positive definite")
    agent_rates = tuple(agent_rates)
    ctrl_rates = tuple(ctrl_rates)
    agent_storage = tuple(agent_storage)
    lam = tuple(lam)
    for i, agent in enumerate(problem.agents):
        r = _agent_residual(agent, agent_rates[i], agent_storage[i], lam[i])
        if r > tol:
            report.append(f"agent {i} dissipation certificate violated by {r:.3e}")
    for i, rate in enumerate(ctrl_rates):
        r = _ctrl_residual(rate)
        if r > tol:
            report.append(f"control channel {i} rate bound violated by {r:.3e}")
    H = assemble_H(problem.topology, gain_matrix(K, problem.topology)).data
    vndt = max_eigenvalue(vndt_qhat(combined_qsr(agent_rates, ctrl_rates), H))
    if vndt >= 0.0:
        report.append(f"network stability pencil not negative (margin {vndt:.3e})")
    if report:
        raise SynthesisError(stage, "candidate point failed verification: "
                             + "; ".join(report))
    G, F = _floor_multipliers(G, F)
    return FeasiblePoint(K=K, P=P, agent_rates=agent_rates, ctrl_rates=ctrl_rates,
                         agent_storage=agent_storage, lam=lam, G=G, F=F,
                         lyap_margin=float(lyap), vndt_margin=float(vndt))


# ---------------------------------------------------------------------------
# shared subproblem assembly


def _default_config(problem: SynthesisProblem) -> SolverConfig:
    return SolverConfig(margin=problem.mu)


def _solved_ok(sol) -> bool:
    """Is the returned iterate usable as a step candidate?

    Status is advisory: near-degenerate subproblems (a repair step with
    nothing to repair, a fixed point re-solve) routinely stall just shy of
    the interior-point tolerances. The recovered point is re-verified by
    substitution anyway, so a best iterate that is feasible to 1e-7 with a
    small relative gap is as good as an "optimal" flag.
    """
    if sol.status == "optimal":
        return True
    if sol.status in ("max_iterations", "numerical_failure"):
        viol = sol.max_constraint_violation
        gap = sol.info.get("relgap", math.inf)
        return np.isfinite(viol) and viol <= _VIOL_OK and gap <= _GAP_OK
    return False


@dataclass
class _StepModel:
    sdp: SdpProblem
    dK_var: object
    dK: AffineMatrix
    dP: object
    aux: OverboundAux
    agent_vars: list
    ctrl_vars: list


def _relaxed_step(problem: SynthesisProblem, point: FeasiblePoint,
                  mask=None, shift=None, name: str = "step") -> _StepModel:
    """Assemble the convex step subproblem around a verified point.

    mask restricts the gain update to a sparsity pattern; shift adds a fixed
    offset to the gain update (used once, to cancel off-pattern blocks during
    projection). Decision variables: dK, dP, the overbound auxiliaries, and
    per-agent / per-channel rate updates with their storage certificates.
    """
    topo = problem.topology
    n = topo.n_total
    mc = sum(topo.ctrl_dims)
    sdp = SdpProblem()
    dK_var = sdp.add_general(mc, n, "dK", structure_mask=mask)
    dK = sdp.expr(dK_var)
    if shift is not None:
        dK = dK + AffineMatrix.constant(np.asarray(shift, dtype=float))
    dP = sdp.add_symmetric(n, "dP")
    aux = OverboundAux.create(sdp, point.G, point.F, name=f"{name}:aux")

    lin = linearization_point(problem.A, problem.B, problem.Qlq, problem.Rlq,
                              point.K, point.P, point.combined_rates(),
                              assemble_H(topo, gain_matrix(point.K, topo)).data,
                              point.G, point.F, feas_tol=problem.feas_tol)
    lyapunov_lq_relaxation(sdp, problem.A, problem.B, problem.Qlq, problem.Rlq,
                           lin, dK, dP, aux, form="ren", name=f"{name}:lq")

    agent_vars = []
    agent_deltas = []
    for i, agent in enumerate(problem.agents):
        base = point.agent_rates[i]
        if agent.kind == "fixed_qsr":
            dlam = sdp.add_scalar(f"dlam{i}")
            lam_expr = float(point.lam[i]) + sdp.expr(dlam)
            bound = fixed_qsr_constraint(sdp, agent.model, lam_expr,
                                         name=f"{name}:agent{i}")
            agent_deltas.append(QsrTriple(Q=bound.Q - np.asarray(base.Q, dtype=float),
                                          S=bound.S - np.asarray(base.S, dtype=float),
                                          R=bound.R - np.asarray(base.R, dtype=float)))
            agent_vars.append(("lam", dlam))
        else:
            p_, m_ = _rate_dims(agent)
            dQ = sdp.add_symmetric(p_, f"dQ{i}")
            dS = sdp.add_general(p_, m_, f"dS{i}")
            dR = sdp.add_symmetric(m_, f"dR{i}")
            Pd = sdp.add_symmetric(agent.model.n, f"Pd{i}")
            rate = QsrTriple(Q=np.asarray(base.Q, dtype=float) + sdp.expr(dQ),
                             S=np.asarray(base.S, dtype=float) + sdp.expr(dS),
                             R=np.asarray(base.R, dtype=float) + sdp.expr(dR))
            if agent.kind == "lti":
                kyp_constraint(sdp, agent.model, Pd, rate, name=f"{name}:agent{i}")
            else:
                polytopic_constraint(sdp, agent.model, Pd, rate,
                                     name=f"{name}:agent{i}")
            agent_deltas.append(QsrTriple(Q=sdp.expr(dQ), S=sdp.expr(dS),
                                          R=sdp.expr(dR)))
            agent_vars.append(("free", dQ, dS, dR, Pd))

    ctrl_vars = []
    ctrl_deltas = []
    for i, w in enumerate(topo.ctrl_dims):
        base = point.ctrl_rates[i]
        dQc = sdp.add_symmetric(w, f"dQc{i}")
        dSc = sdp.add_general(w, w, f"dSc{i}")
        dRc = sdp.add_symmetric(w, f"dRc{i}")
        rate = QsrTriple(Q=np.asarray(base.Q, dtype=float) + sdp.expr(dQc),
                         S=np.asarray(base.S, dtype=float) + sdp.expr(dSc),
                         R=np.asarray(base.R, dtype=float) + sdp.expr(dRc))
        controller_constraint(sdp, rate, name=f"{name}:ctrl{i}")
        ctrl_deltas.append(QsrTriple(Q=sdp.expr(dQc), S=sdp.expr(dSc),
                                     R=sdp.expr(dRc)))
        ctrl_vars.append((dQc, dSc, dRc))

    deltas = combined_qsr(agent_deltas, ctrl_deltas)
    # the gain sits in the lower-left block of the interconnection, so its
    # update embeds there and nowhere else
    row_embed = np.vstack([np.zeros((topo.m_total, mc)), np.eye(mc)])
    col_select = np.hstack([np.eye(n), np.zeros((n, mc))])
    dH = row_embed @ (dK @ col_select)
    # the bordered overbounds charge roughly (||R0||/2 + g)^2 / (2g) per unit
    # of gain movement, minimized at g ~ ||R0||/2; the unit multiplier would
    # strangle the step whenever the incumbent rates are large
    g_net = max(1.0, 0.5 * float(np.linalg.norm(
        np.asarray(lin.qsr0.R, dtype=float), 2)))
    vndt_relaxation(sdp, lin, deltas.Q, deltas.S, deltas.R, dH,
                    g1=g_net, g2=g_net, name=f"{name}:net")

    sdp.add_trace_objective(AffineMatrix.constant(point.P) + sdp.expr(dP))
    return _StepModel(sdp=sdp, dK_var=dK_var, dK=dK, dP=dP, aux=aux,
                      agent_vars=agent_vars, ctrl_vars=ctrl_vars)


def _recover_point(problem: SynthesisProblem, point: FeasiblePoint,
                   model: _StepModel, x: np.ndarray, stage: str) -> FeasiblePoint:
    sdp = model.sdp
    K1 = point.K + model.dK.evaluate(x)
    P1 = point.P + sdp.value_of(model.dP, x)
    rates = []
    storage = []
    lams = []
    for i, agent in enumerate(problem.agents):
        base = point.agent_rates[i]
        av = model.agent_vars[i]
        if av[0] == "lam":
            lam1 = float(point.lam[i]) + float(sdp.value_of(av[1], x)[0, 0])
            m = agent.model
            rates.append(QsrTriple(Q=lam1 * m.Q_p, S=lam1 * m.S_p, R=lam1 * m.R_p))
            storage.append(None)
            lams.append(lam1)
        else:
            _, dQ, dS, dR, Pd = av
            rates.append(QsrTriple(Q=np.asarray(base.Q) + sdp.value_of(dQ, x),
                                   S=np.asarray(base.S) + sdp.value_of(dS, x),
                                   R=np.asarray(base.R) + sdp.value_of(dR, x)))
            storage.append(sdp.value_of(Pd, x))
            lams.append(None)
    ctrl = []
    for i, (dQc, dSc, dRc) in enumerate(model.ctrl_vars):
        base = point.ctrl_rates[i]
        ctrl.append(QsrTriple(Q=np.asarray(base.Q) + sdp.value_of(dQc, x),
                              S=np.asarray(base.S) + sdp.value_of(dSc, x),
                              R=np.asarray(base.R) + sdp.value_of(dRc, x)))
    G1 = point.G + sdp.value_of(model.aux.dG, x)
    F1 = sdp.value_of(model.aux.F, x)
    return make_feasible_point(problem, K1, P1, rates, ctrl, storage, lams,
                               G1, F1, stage=stage)


def _solve_step(problem: SynthesisProblem, point: FeasiblePoint,
                model: _StepModel, stage: str, config=None) -> FeasiblePoint:
    sol = solve(model.sdp, config or _default_config(problem))
    if not _solved_ok(sol):
        raise SynthesisError(stage, f"step solve failed ({sol.status})", point,
                             details=dict(sol.info))
    try:
        return _recover_point(problem, point, model, sol.x, stage)
    except SynthesisError as err:
        # the step direction is sound but its certificate came back too dirty
        # to verify (near-converged iterates drift a little); freeze the
        # proposed gain and re-derive P and the rates exactly
        K1 = point.K + model.dK.evaluate(sol.x)
        G1 = point.G + model.sdp.value_of(model.aux.dG, sol.x)
        F1 = model.sdp.value_of(model.aux.F, sol.x)
        try:
            return _fixed_gain_solve(problem, K1, stage, G=G1, F=F1,
                                     config=config)
        except SynthesisError:
            raise err from None


# ---------------------------------------------------------------------------
# stage operations


def centralized_step(problem: SynthesisProblem, point: FeasiblePoint,
                     config=None) -> FeasiblePoint:
    """One full-gain convex step; returns the incumbent if no progress.

    The zero update is always feasible for the relaxation, so an accepted
    step never raises the trace beyond numerical slack; a candidate that
    does is discarded.
    """
    model = _relaxed_step(problem, point, name="central")
    new = _solve_step(problem, point, model, "centralized", config)
    if new.objective > point.objective + MONOTONE_SLACK:
        return point
    return new


def structured_ico_step(problem: SynthesisProblem, point: FeasiblePoint,
                        pattern, config=None) -> FeasiblePoint:
    """Convex step with the gain update confined to a block pattern.

    The incumbent must already conform to the pattern: masked updates can
    only preserve exact zeros, never create them.
    """
    pattern = frozenset(pattern)
    mask = _entry_mask(problem, pattern)
    off = ~mask
    if np.any(point.K[off] != 0.0):
        raise ValueError("incumbent gain has nonzero entries outside the pattern")
    model = _relaxed_step(problem, point, mask=mask, name="struct")
    new = _solve_step(problem, point, model, "structured", config)
    if new.objective > point.objective + MONOTONE_SLACK:
        return point
    return new


def _entry_mask(problem: SynthesisProblem, pattern) -> np.ndarray:
    part = problem.gain_partition
    mask = np.zeros((sum(part.row_sizes), sum(part.col_sizes)), dtype=bool)
    nr, nc = part.shape
    for (i, j) in pattern:
        if not (0 <= i < nr and 0 <= j < nc):
            raise ValueError(f"pattern block {(i, j)} outside the gain grid")
        r0, c0 = part.row_offset(i), part.col_offset(j)
        mask[r0:r0 + part.row_sizes[i], c0:c0 + part.col_sizes[j]] = True
    return mask


def dense_pattern(problem: SynthesisProblem) -> frozenset:
    N = problem.topology.N
    return frozenset((i, j) for i in range(N) for j in range(N))


def pattern_of(problem: SynthesisProblem, K, pattern_tol: float = PATTERN_TOL) -> frozenset:
    return frozenset(block_pattern(gain_matrix(K, problem.topology), pattern_tol))


def _scalar_eye(sdp: SdpProblem, t, d: int, scale: float = 1.0) -> AffineMatrix:
    """scale * t * I_d for a scalar variable t."""
    e = sdp.expr(t)
    coeffs = {i: sp.csr_matrix(scale * float(C.toarray()[0, 0]) * np.eye(d))
              for i, C in e.coeffs.items()}
    return AffineMatrix((d, d), scale * float(e.const[0, 0]) * np.eye(d), coeffs)


def _vec_expr(X: AffineMatrix) -> AffineMatrix:
    r, c = X.shape
    eye = np.eye(c)
    return bmat([[X @ eye[:, [j]]] for j in range(c)])


def weighted_l1_step(problem: SynthesisProblem, point: FeasiblePoint,
                     pattern_tol: float = PATTERN_TOL, config=None):
    """Single convex solve of the trace + gamma * weighted-l1 objective.

    Returns (new point, promoted pattern). Block Frobenius norms enter the
    objective through epigraph scalars t_ij with the norm cone written as a
    small LMI. gamma == 0 degenerates to a plain centralized step.
    """
    if not isinstance(problem.penalty, WeightedL1):
        raise ValueError("problem.penalty must be WeightedL1 for this step")
    if problem.gamma == 0.0:
        new = centralized_step(problem, point, config)
        return new, dense_pattern(problem)
    model = _relaxed_step(problem, point, name="l1")
    sdp = model.sdp
    part = problem.gain_partition
    norms0 = block_frobenius_map(gain_matrix(point.K, problem.topology))
    eps_l = problem.penalty.eps_l
    nr, nc = part.shape
    for i in range(nr):
        for j in range(nc):
            w = 1.0 / norms0[i, j] if norms0[i, j] > 0.0 else 1.0 / eps_l
            r0, c0 = part.row_offset(i), part.col_offset(j)
            ri, cj = part.row_sizes[i], part.col_sizes[j]
            rsel = np.zeros((ri, sum(part.row_sizes)))
            rsel[:, r0:r0 + ri] = np.eye(ri)
            csel = np.zeros((sum(part.col_sizes), cj))
            csel[c0:c0 + cj, :] = np.eye(cj)
            blk = AffineMatrix.constant(point.K[r0:r0 + ri, c0:c0 + cj]) \
                + rsel @ (sdp.expr(model.dK_var) @ csel)
            v = _vec_expr(blk)
            t = sdp.add_scalar(f"t{i}_{j}")
            pencil = bmat([
                [_scalar_eye(sdp, t, ri * cj, -1.0), v],
                [v.T, -sdp.expr(t)],
            ])
            sdp.add_lmi(pencil, "nsd", f"l1:{i},{j}")
            sdp.add_trace_objective(sdp.expr(t), problem.gamma * w)
    new = _solve_step(problem, point, model, "sparsity", config)
    return new, pattern_of(problem, new.K, pattern_tol)


# ---------------------------------------------------------------------------
# ADMM pieces for the cardinality penalty


@dataclass(frozen=True)
class AdmmState:
    """Consensus variable, scaled dual, and the latest stopping residuals."""

    Z: BlockMatrix
    dual: BlockMatrix
    k: int = 0
    r_p: float = math.inf
    r_d: float = math.inf

    def __post_init__(self):
        if self.Z.partition != self.dual.partition:
            raise ValueError("Z and the dual must share the gain partition")


def admm_k_update(problem: SynthesisProblem, point: FeasiblePoint,
                  state: AdmmState, config=None) -> FeasiblePoint:
    """Gain update: trace objective plus the proximity-to-consensus penalty.

    The linearization point stays fixed across the whole ADMM loop, so the
    caller passes the same base point every iteration.
    """
    if not isinstance(problem.penalty, Cardinality):
        raise ValueError("problem.penalty must be Cardinality for this step")
    model = _relaxed_step(problem, point, name="admm")
    offset = point.K - state.Z.data + state.dual.data
    model.sdp.add_quad_term(problem.penalty.rho,
                            AffineMatrix.constant(offset) + model.dK,
                            name="prox")
    return _solve_step(problem, point, model, "sparsity", config)


def admm_z_update(K_new: BlockMatrix, dual: BlockMatrix, gamma: float,
                  rho: float) -> BlockMatrix:
    """Blockwise prox of the cardinality penalty: hard threshold at sqrt(2g/r).

    Blocks whose Frobenius norm ties the threshold exactly are zeroed; only
    a strict excess keeps them.
    """
    if gamma < 0 or rho <= 0:
        raise ValueError("gamma must be nonnegative and rho positive")
    V = K_new.data + dual.data
    thr = math.sqrt(2.0 * gamma / rho)
    part = K_new.partition
    out = np.zeros_like(V)
    for i in range(len(part.row_sizes)):
        for j in range(len(part.col_sizes)):
            r0, c0 = part.row_offset(i), part.col_offset(j)
            blk = V[r0:r0 + part.row_sizes[i], c0:c0 + part.col_sizes[j]]
            if np.linalg.norm(blk, "fro") > thr:
                out[r0:r0 + part.row_sizes[i], c0:c0 + part.col_sizes[j]] = blk
    return BlockMatrix(out, part)


def admm_lambda_update(state: AdmmState, K_new: BlockMatrix,
                       Z_new: BlockMatrix) -> AdmmState:
    """Dual ascent with unit step, plus the two stopping residuals.

    Residuals are normalized by ||Z||_F; an all-zero Z (legal at large gamma)
    falls back to absolute norms.
    """
    dual = BlockMatrix(state.dual.data + (K_new.data - Z_new.data),
                       state.dual.partition)
    zn = float(np.linalg.norm(Z_new.data, "fro"))
    scale = zn if zn > 0.0 else 1.0
    r_p = float(np.linalg.norm(K_new.data - Z_new.data, "fro")) / scale
    r_d = float(np.linalg.norm(Z_new.data - state.Z.data, "fro")) / scale
    return AdmmState(Z=Z_new, dual=dual, k=state.k + 1, r_p=r_p, r_d=r_d)


# ---------------------------------------------------------------------------
# initialization and fixed-gain solves


def _fixed_gain_solve(problem: SynthesisProblem, K, stage: str,
                      G=None, F=None, config=None) -> FeasiblePoint:
    """With the gain frozen, everything else is jointly an LMI problem.

    Minimizes trace(P) over the Lyapunov matrix, all supply rates, and the
    agent storage certificates. Used to seed the pipeline and to re-tighten
    the certificate after the gain stops moving.
    """
    topo = problem.topology
    K = np.asarray(K, dtype=float)
    sdp = SdpProblem()
    n = topo.n_total
    P = sdp.add_symmetric(n, "P")
    Acl = problem.A - problem.B @ K
    gram = (sdp.expr(P) @ Acl)
    gram = gram + gram.T + (problem.Qlq + K.T @ problem.Rlq @ K)
    sdp.add_lmi(gram, "nsd", f"{stage}:lq")
    sdp.add_lmi(-sdp.expr(P), "strict", f"{stage}:lq:pd")

    agent_vars = []
    agent_rates = []
    for i, agent in enumerate(problem.agents):
        if agent.kind == "fixed_qsr":
            lam = sdp.add_scalar(f"lam{i}")
            rate = fixed_qsr_constraint(sdp, agent.model, lam,
                                        name=f"{stage}:agent{i}")
            agent_vars.append(("lam", lam))
        else:
            p_, m_ = _rate_dims(agent)
            Q = sdp.add_symmetric(p_, f"Q{i}")
            S = sdp.add_general(p_, m_, f"S{i}")
            R = sdp.add_symmetric(m_, f"R{i}")
            Pd = sdp.add_symmetric(agent.model.n, f"Pd{i}")
            rate = QsrTriple(Q=sdp.expr(Q), S=sdp.expr(S), R=sdp.expr(R))
            if agent.kind == "lti":
                kyp_constraint(sdp, agent.model, Pd, rate, name=f"{stage}:agent{i}")
            else:
                polytopic_constraint(sdp, agent.model, Pd, rate,
                                     name=f"{stage}:agent{i}")
            agent_vars.append(("free", Q, S, R, Pd))
        agent_rates.append(rate)

    ctrl_vars = []
    ctrl_rates = []
    for i, w in enumerate(topo.ctrl_dims):
        Qc = sdp.add_symmetric(w, f"Qc{i}")
        Sc = sdp.add_general(w, w, f"Sc{i}")
        Rc = sdp.add_symmetric(w, f"Rc{i}")
        rate = QsrTriple(Q=sdp.expr(Qc), S=sdp.expr(Sc), R=sdp.expr(Rc))
        controller_constraint(sdp, rate, name=f"{stage}:ctrl{i}")
        ctrl_vars.append((Qc, Sc, Rc))
        ctrl_rates.append(rate)

    H = assemble_H(topo, gain_matrix(K, topo)).data
    sdp.add_lmi(vndt_qhat(combined_qsr(agent_rates, ctrl_rates), H),
                "strict", f"{stage}:net")
    sdp.add_trace_objective(sdp.expr(P))

    sol = solve(sdp, config or _default_config(problem))
    if not _solved_ok(sol):
        raise SynthesisError(
            stage, f"fixed-gain certificate solve failed ({sol.status})",
            details={"info": dict(sol.info),
                     "constraints": [c.name for c in sdp.constraints]})
    x = sol.x
    rates = []
    storage = []
    lams = []
    for i, agent in enumerate(problem.agents):
        av = agent_vars[i]
        if av[0] == "lam":
            lam1 = float(sdp.value_of(av[1], x)[0, 0])
            m = agent.model
            rates.append(QsrTriple(Q=lam1 * m.Q_p, S=lam1 * m.S_p, R=lam1 * m.R_p))
            storage.append(None)
            lams.append(lam1)
        else:
            _, Q, S, R, Pd = av
            rates.append(QsrTriple(Q=sdp.value_of(Q, x), S=sdp.value_of(S, x),
                                   R=sdp.value_of(R, x)))
            storage.append(sdp.value_of(Pd, x))
            lams.append(None)
    ctrl = [QsrTriple(Q=sdp.value_of(Qc, x), S=sdp.value_of(Sc, x),
                      R=sdp.value_of(Rc, x))
            for (Qc, Sc, Rc) in ctrl_vars]
    mc = sum(topo.ctrl_dims)
    G = np.eye(mc) if G is None else G
    if F is None:
        # the relaxation charges about dK' F^{-1} dK per step and caps F at
        # doubling, so a unit seed would take ~log2(||K||^2) accepted steps
        # before meaningful gain movement becomes possible
        F = max(1.0, np.linalg.norm(K, 2) ** 2) * np.eye(mc)
    return make_feasible_point(problem, K, sdp.value_of(P, x), rates, ctrl,
                               storage, lams, G, F, stage=stage)


def initialize(problem: SynthesisProblem, K_local=None, gain_growth: float = 3.0,
               max_attempts: int = 12, config=None) -> FeasiblePoint:
    """Find a first verified point from a block-diagonal local gain.

    The gain is frozen and the remaining LMIs are solved jointly; when that
    fails, every local gain is scaled up and the check repeats. Relaxation
    multipliers are seeded from the gain magnitude.
    """
    if gain_growth <= 1.0:
        raise ValueError("gain_growth must exceed 1")
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    topo = problem.topology
    if K_local is None:
        K_local = [np.ones((w, nn))
                   for w, nn in zip(topo.ctrl_dims, topo.state_dims)]
    K_local = [np.atleast_2d(np.asarray(Ki, dtype=float)) for Ki in K_local]
    if len(K_local) != topo.N:
        raise ValueError("one local gain per agent required")
    for i, Ki in enumerate(K_local):
        want = (topo.ctrl_dims[i], topo.state_dims[i])
        if Ki.shape != want:
            raise ValueError(f"local gain {i} must be {want}, got {Ki.shape}")
    # solve for the anchor with extra strictness: the first convex step is
    # linearized here, and an anchor hugging the constraint boundary leaves
    # that subproblem without a usable interior
    cfg = config or _default_config(problem)
    cfg = _dc_replace(cfg, margin=max(cfg.margin, 100 * problem.mu))
    last = None
    for attempt in range(max_attempts):
        K = blkdiag(K_local)
        try:
            return _fixed_gain_solve(problem, K, "initialize", config=cfg)
        except SynthesisError as err:
            last = err
            K_local = [gain_growth * Ki for Ki in K_local]
    raise SynthesisError(
        "initialize",
        f"no feasible local gain within {max_attempts} attempts "
        f"(growth {gain_growth}); last failure: {last}",
        details=getattr(last, "details", {}))


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass(frozen=True)
class HistoryRecord:
    stage: str
    iteration: int
    trace: float
    nnz_blocks: int
    r_p: float = math.nan
    r_d: float = math.nan


@dataclass(frozen=True)
class SynthesisResult:
    """Final verified point plus the run record.

    status is "ok" unless the ADMM loop stopped at its iteration cap, in
    which case it reads "admm_max_iter"; the promoted pattern is still used
    because every kept point is verified independently of ADMM convergence.
    """

    K: np.ndarray
    point: FeasiblePoint
    pattern: frozenset
    history: tuple
    counts: dict
    gamma: float
    status: str = "ok"


def _ico_loop(problem, point, stage, step, eps, max_iter, history, pattern_tol):
    """Repeat convex steps until relative trace improvement drops to eps."""
    it = 0
    for it in range(1, max_iter + 1):
        new = step(point)
        improved = point.objective - new.objective
        history.append(HistoryRecord(stage, it, new.objective,
                                     len(pattern_of(problem, new.K, pattern_tol))))
        if new is point:
            break
        rel = improved / max(abs(new.objective), np.finfo(float).tiny)
        point = new
        if rel <= eps:
            break
    return point, it


def run(problem: SynthesisProblem, K_local=None, *, gain_growth: float = 3.0,
        max_attempts: int = 12, max_iter_per_loop: int = 50,
        centralized_iters=None, pattern_tol: float = PATTERN_TOL,
        polish: bool = True, warm_start: FeasiblePoint = None,
        config=None) -> SynthesisResult:
    """Full pipeline: initialize, centralize, promote sparsity, restructure.

    Every accepted iterate is a verified feasible point; stage failures
    surface as SynthesisError with the stage label. With no penalty the
    result is the centralized fixed point and a dense pattern. A warm_start
    point (for example the centralized fixed point shared by every gamma of
    a sweep) replaces initialization; it is re-verified against this
    problem first.
    """
    history = []
    counts = {}
    status = "ok"
    if warm_start is not None:
        point = make_feasible_point(
            problem, warm_start.K, warm_start.P, warm_start.agent_rates,
            warm_start.ctrl_rates, warm_start.agent_storage, warm_start.lam,
            warm_start.G, warm_start.F, stage="warm-start")
    else:
        point = initialize(problem, K_local, gain_growth, max_attempts, config)
    history.append(HistoryRecord("initialize", 0, point.objective,
                                 len(pattern_of(problem, point.K, pattern_tol))))

    n_central = centralized_iters if centralized_iters is not None else max_iter_per_loop
    eps_central = -math.inf if centralized_iters is not None else problem.eps
    point, counts["centralized"] = _ico_loop(
        problem, point, "centralized",
        lambda p: centralized_step(problem, p, config),
        eps_central, n_central, history, pattern_tol)

    if problem.penalty is None:
        pattern = dense_pattern(problem)
        counts["admm"] = 0
        counts["structured"] = 0
    else:
        if isinstance(problem.penalty, WeightedL1):
            point, pattern = weighted_l1_step(problem, point, pattern_tol, config)
            counts["admm"] = 0
            history.append(HistoryRecord("sparsity", 1, point.objective,
                                         len(pattern)))
        else:
            part = problem.gain_partition
            state = AdmmState(Z=BlockMatrix(point.K.copy(), part),
                              dual=BlockMatrix(np.zeros_like(point.K), part))
            base = point
            cand = point
            pen = problem.penalty
            while state.k < pen.max_admm_iter and (
                    state.r_p > pen.eps_p or state.r_d > pen.eps_d):
                cand = admm_k_update(problem, base, state, config)
                Kb = gain_matrix(cand.K, problem.topology)
                Z = admm_z_update(Kb, state.dual, problem.gamma, pen.rho)
                state = admm_lambda_update(state, Kb, Z)
                history.append(HistoryRecord("sparsity", state.k, cand.objective,
                                             len(block_pattern(state.Z, 0.0)),
                                             state.r_p, state.r_d))
            counts["admm"] = state.k
            if state.r_p > pen.eps_p or state.r_d > pen.eps_d:
                status = "admm_max_iter"
            point = cand
            pattern = frozenset(
                (i, j)
                for (i, j) in np.argwhere(block_frobenius_map(state.Z) > 0.0).tolist()
            )
        if not pattern:
            raise SynthesisError(
                "sparsity",
                f"penalty weight gamma={problem.gamma} zeroed every gain block; "
                "no nonzero structure is left to stabilize the network",
                point)
        point = _project_and_repair(problem, point, pattern, config)
        history.append(HistoryRecord("repair", 0, point.objective, len(pattern)))

        point, counts["structured"] = _ico_loop(
            problem, point, "structured",
            lambda p: structured_ico_step(problem, p, pattern, config),
            problem.eps, max_iter_per_loop, history, pattern_tol)

    if polish:
        try:
            refit = _fixed_gain_solve(problem, point.K, "polish",
                                      G=point.G, F=point.F, config=config)
            if refit.objective <= point.objective + MONOTONE_SLACK:
                point = refit
                history.append(HistoryRecord("polish", 0, point.objective,
                                             len(pattern_of(problem, point.K,
                                                            pattern_tol))))
        except SynthesisError:
            pass  # best effort; the verified incumbent stands

    if problem.penalty is None:
        final_pattern = dense_pattern(problem)
    else:
        final_pattern = pattern
    return SynthesisResult(K=point.K, point=point, pattern=frozenset(final_pattern),
                           history=tuple(history), counts=counts,
                           gamma=problem.gamma, status=status)


def _project_and_repair(problem, point, pattern, config=None) -> FeasiblePoint:
    """Zero the off-pattern gain blocks, then re-verify through one solve.

    The promoted gain usually has residual mass outside the pattern (small
    for the weighted l1, possibly larger for ADMM consensus gaps). A masked
    step with a constant offset cancels it exactly: the recovered gain is
    zero off-pattern by construction, and the solve restores feasibility of
    everything else around it.
    """
    mask = _entry_mask(problem, pattern)
    off = ~mask
    if not np.any(point.K[off] != 0.0):
        return point
    if not mask.any():
        raise SynthesisError("repair", "empty pattern", point)
    # tiny off-pattern mass (the usual case after a weighted-l1 solve) is
    # absorbed by the incumbent's own margins; no solve needed
    K_proj = np.where(off, 0.0, point.K)
    try:
        return make_feasible_point(problem, K_proj, point.P, point.agent_rates,
                                   point.ctrl_rates, point.agent_storage,
                                   point.lam, point.G, point.F, stage="repair")
    except SynthesisError:
        pass
    shift = np.where(off, -point.K, 0.0)
    model = _relaxed_step(problem, point, mask=mask, shift=shift, name="repair")
    new = _solve_step(problem, point, model, "repair", config)
    assert not np.any(new.K[off] != 0.0)
    return new
