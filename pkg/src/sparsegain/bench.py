"""Reference network family: generation, stability audits, LQ scoring, sweeps.

The family has N two-state agents on a line with exponentially decaying
symmetric coupling. The first five agents carry an unstable nominal block,
the rest a stable one; every nominal entry is uncertain within a fraction of
its magnitude, modeled as a 16-vertex polytope (one vertex per sign pattern
of the four entries). Control enters each agent through its second state.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .blockmat import (
    BlockMatrix,
    BlockPartition,
    blkdiag,
    block_pattern,
    solve_lyapunov,
)
from .dissipativity import AgentModel, PolytopicModel, QsrTriple, StateSpace
from .network import NetworkTopology, gain_matrix
from .streams import substream
from .synthesis import (
    Cardinality,
    FeasiblePoint,
    SynthesisError,
    SynthesisProblem,
    WeightedL1,
    run,
)

STABILITY_THRESHOLD = -1e-9
# the documented starting local gain for this family
DEFAULT_LOCAL_GAIN = np.array([[1000.0, 100.0]])

_UNSTABLE_BLOCK = np.array([[1.0, 1.0], [1.0, 2.0]])
_STABLE_BLOCK = np.array([[-2.0, 1.0], [1.0, -3.0]])
_N_UNSTABLE = 5  # nominal blocks: unstable for the first five agents

PENALTY_KINDS = ("none", "weighted-l1", "cardinality")


@dataclass(frozen=True)
class BenchmarkSpec:
    """Parameters of one instance of the reference family."""

    N: int = 10
    alpha: float = 0.1823
    A_unstable: np.ndarray = None
    A_stable: np.ndarray = None
    uncertainty_fraction: float = 0.30
    seed: int = 0
    gamma_grid: tuple = ()
    penalty: str = "weighted-l1"

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not 0.0 <= self.uncertainty_fraction < 1.0:
            raise ValueError("uncertainty_fraction must lie in [0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.penalty not in PENALTY_KINDS:
            raise ValueError(f"penalty must be one of {PENALTY_KINDS}")
        au = _UNSTABLE_BLOCK if self.A_unstable is None else self.A_unstable
        asb = _STABLE_BLOCK if self.A_stable is None else self.A_stable
        au = np.asarray(au, dtype=float)
        asb = np.asarray(asb, dtype=float)
        if au.shape != (2, 2) or asb.shape != (2, 2):
            raise ValueError("nominal agent blocks must be 2x2")
        object.__setattr__(self, "A_unstable", au)
        object.__setattr__(self, "A_stable", asb)
        object.__setattr__(self, "gamma_grid",
                           tuple(float(g) for g in self.gamma_grid))


@dataclass(frozen=True)
class LqReport:
    trace_P: float
    log10: float
    nnz_blocks: int


@dataclass(frozen=True)
class StabilityReport:
    """Pole audit: poles holds one (sample_id, kind, re, im) row per
    eigenvalue; counts must agree with what the rows imply."""

    n_samples: int
    n_unstable_samples: int
    n_vertex_combos: int
    n_unstable_combos: int
    worst_re: float
    poles: tuple

    def __post_init__(self):
        worst = {}
        for sid, kind, re_, _ in self.poles:
            key = (kind, sid)
            worst[key] = max(worst.get(key, -math.inf), re_)
        bad_unc = sum(1 for (kind, _), w in worst.items()
                      if kind == "unc" and w >= STABILITY_THRESHOLD)
        bad_vert = sum(1 for (kind, _), w in worst.items()
                       if kind == "vert" and w >= STABILITY_THRESHOLD)
        n_unc = len([1 for k, _ in worst if k == "unc"])
        n_vert = len([1 for k, _ in worst if k == "vert"])
        if (n_unc, bad_unc) != (self.n_samples, self.n_unstable_samples):
            raise ValueError("sample counts disagree with the pole rows")
        if (n_vert, bad_vert) != (self.n_vertex_combos, self.n_unstable_combos):
            raise ValueError("vertex counts disagree with the pole rows")
        if self.poles and not math.isclose(
                self.worst_re, max(w for w in worst.values()), abs_tol=0.0):
            raise ValueError("worst_re disagrees with the pole rows")

    @property
    def all_stable(self) -> bool:
        return self.n_unstable_samples == 0 and self.n_unstable_combos == 0


def nominal_blocks(spec: BenchmarkSpec) -> list:
    return [np.array(spec.A_unstable if i < _N_UNSTABLE else spec.A_stable)
            for i in range(spec.N)]


def coupling_matrix(spec: BenchmarkSpec) -> np.ndarray:
    """Symmetric block coupling: e^{-alpha |i-j|} I_2 off the diagonal."""
    H = np.zeros((2 * spec.N, 2 * spec.N))
    for i in range(spec.N):
        for j in range(spec.N):
            if i != j:
                H[2 * i:2 * i + 2, 2 * j:2 * j + 2] = \
                    math.exp(-spec.alpha * abs(i - j)) * np.eye(2)
    return H


def enumerate_vertices(A_nominal, fraction: float) -> list:
    """All 2^4 sign assignments of entrywise +-fraction*|entry| shifts."""
    A = np.asarray(A_nominal, dtype=float)
    if A.shape != (2, 2):
        raise ValueError("nominal block must be 2x2")
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    out = []
    for signs in itertools.product((-1.0, 1.0), repeat=4):
        out.append(A + fraction * np.abs(A) * np.asarray(signs).reshape(2, 2))
    return out


def generate_example(spec: BenchmarkSpec) -> SynthesisProblem:
    """Assemble the synthesis problem for one instance of the family.

    State weight 100 I, control weight I on the N scalar control channels;
    agents enter as 16-vertex polytopic models with identity input maps.
    """
    blocks = nominal_blocks(spec)
    part = BlockPartition((2,) * spec.N, (2,) * spec.N)
    H_p = BlockMatrix(coupling_matrix(spec), part)
    tilde = blkdiag([np.array([[0.0], [1.0]]) for _ in range(spec.N)])
    Ht_p = BlockMatrix(tilde, BlockPartition((2,) * spec.N, (1,) * spec.N))
    topo = NetworkTopology(state_dims=(2,) * spec.N, input_dims=(2,) * spec.N,
                           H_p=H_p, Ht_p=Ht_p)
    agents = tuple(
        AgentModel(PolytopicModel(tuple(
            (Av, np.eye(2))
            for Av in enumerate_vertices(Ab, spec.uncertainty_fraction))))
        for Ab in blocks)
    A = blkdiag(blocks) + H_p.data
    return SynthesisProblem(
        agents=agents, topology=topo, A=A, B=tilde,
        Qlq=100.0 * np.eye(2 * spec.N), Rlq=np.eye(spec.N))


def penalty_of(spec: BenchmarkSpec):
    """The synthesis penalty object named by the spec, or None."""
    if spec.penalty == "none":
        return None
    if spec.penalty == "weighted-l1":
        return WeightedL1()
    return Cardinality()


def sample_uncertain(spec: BenchmarkSpec, M: int, seed: int = None) -> list:
    """M full-network A matrices with every agent block independently
    perturbed entrywise uniform within the uncertainty fraction; the
    coupling part is never perturbed."""
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = substream(spec.seed if seed is None else seed, "sample-uncertain")
    blocks = nominal_blocks(spec)
    coupling = coupling_matrix(spec)
    out = []
    for _ in range(M):
        pert = [Ab + rng.uniform(-1.0, 1.0, size=(2, 2))
                * spec.uncertainty_fraction * np.abs(Ab)
                for Ab in blocks]
        out.append(blkdiag(pert) + coupling)
    return out


def verify_stability(K, spec: BenchmarkSpec, mode: str = "montecarlo",
                     M: int = 200, seed: int = None) -> StabilityReport:
    """Closed-loop pole audit of A(uncertainty) - B K.

    montecarlo draws M independent network samples; vertices runs the
    256-combination check where all unstable agents share one vertex of
    their polytope and all stable agents share one vertex of theirs.
    """
    K = np.asarray(K, dtype=float)
    B = blkdiag([np.array([[0.0], [1.0]]) for _ in range(spec.N)])
    if K.shape != (spec.N, 2 * spec.N):
        raise ValueError(f"K must be {(spec.N, 2 * spec.N)}, got {K.shape}")
    coupling = coupling_matrix(spec)
    cases = []
    if mode == "montecarlo":
        for sid, A in enumerate(sample_uncertain(spec, M, seed)):
            cases.append((sid, "unc", A))
    elif mode == "vertices":
        vu = enumerate_vertices(spec.A_unstable, spec.uncertainty_fraction)
        vs = enumerate_vertices(spec.A_stable, spec.uncertainty_fraction)
        sid = 0
        for Au, As in itertools.product(vu, vs):
            blocks = [Au if i < _N_UNSTABLE else As for i in range(spec.N)]
            cases.append((sid, "vert", blkdiag(blocks) + coupling))
            sid += 1
    else:
        raise ValueError("mode must be 'montecarlo' or 'vertices'")

    poles = []
    worst = -math.inf
    per_case_worst = {}
    for sid, kind, A in cases:
        eig = np.linalg.eigvals(A - B @ K)
        case_worst = float(np.max(eig.real))
        per_case_worst[(kind, sid)] = case_worst
        worst = max(worst, case_worst)
        for lam in eig:
            poles.append((sid, kind, float(lam.real), float(lam.imag)))
    n_unc = sum(1 for k, _ in per_case_worst if k == "unc")
    n_vert = sum(1 for k, _ in per_case_worst if k == "vert")
    bad_unc = sum(1 for (k, _), w in per_case_worst.items()
                  if k == "unc" and w >= STABILITY_THRESHOLD)
    bad_vert = sum(1 for (k, _), w in per_case_worst.items()
                   if k == "vert" and w >= STABILITY_THRESHOLD)
    return StabilityReport(n_samples=n_unc, n_unstable_samples=bad_unc,
                           n_vertex_combos=n_vert, n_unstable_combos=bad_vert,
                           worst_re=worst, poles=tuple(poles))


def eval_lq(K, problem: SynthesisProblem) -> LqReport:
    """Exact LQ cost of a stabilizing gain on the nominal network.

    Solves (A-BK)'P + P(A-BK) + Qlq + K'RlqK = 0; the trace is the cost,
    free of any relaxation slack. Raises for non-Hurwitz closed loops.
    """
    K = np.asarray(K, dtype=float)
    Acl = problem.A - problem.B @ K
    if np.max(np.linalg.eigvals(Acl).real) >= 0.0:
        raise ValueError("closed loop is not Hurwitz; LQ cost undefined")
    P = solve_lyapunov(Acl, problem.Qlq + K.T @ problem.Rlq @ K)
    tr = float(np.trace(P))
    nnz = len(block_pattern(gain_matrix(K, problem.topology)))
    return LqReport(trace_P=tr, log10=math.log10(tr), nnz_blocks=nnz)


def empirical_dissipation_check(ss: StateSpace, qsr: QsrTriple,
                                n_signals: int = 8, horizon: float = 10.0,
                                seed: int = 0, steps: int = 2000) -> float:
    """Worst normalized supply integral over randomized smooth inputs.

    From rest, dissipativity forces int s(u, y) dt >= V(x(T)) >= 0 on every
    trajectory, so the minimum over signals of the integral divided by
    ||u||^2 should never be meaningfully negative. Fixed-step RK4 for the
    state, trapezoid for the integrals.
    """
    if n_signals < 1 or steps < 2 or horizon <= 0:
        raise ValueError("need n_signals >= 1, steps >= 2, horizon > 0")
    rng = substream(seed, "dissipation-check")
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    Q = np.asarray(qsr.Q, dtype=float)
    S = np.asarray(qsr.S, dtype=float)
    R = np.asarray(qsr.R, dtype=float)
    dt = horizon / steps
    t = np.linspace(0.0, horizon, steps + 1)
    worst = math.inf
    for _ in range(n_signals):
        # smooth excitation: a few random tones per input channel
        amp = rng.normal(size=(4, ss.m))
        freq = rng.uniform(0.2, 4.0, size=(4, ss.m))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=(4, ss.m))

        def u_of(tau):
            return np.sum(amp * np.sin(freq * tau + phase), axis=0)

        x = np.zeros(ss.n)
        supply = np.empty(steps + 1)
        energy = np.empty(steps + 1)
        for k in range(steps + 1):
            u = u_of(t[k])
            y = C @ x + D @ u
            supply[k] = y @ Q @ y + 2.0 * (y @ S @ u) + u @ R @ u
            energy[k] = u @ u
            if k < steps:
                def f(xx, tau):
                    return A @ xx + B @ u_of(tau)
                k1 = f(x, t[k])
                k2 = f(x + 0.5 * dt * k1, t[k] + 0.5 * dt)
                k3 = f(x + 0.5 * dt * k2, t[k] + 0.5 * dt)
                k4 = f(x + dt * k3, t[k] + dt)
                x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        total = float(np.trapezoid(supply, dx=dt))
        norm_u = float(np.trapezoid(energy, dx=dt))
        worst = min(worst, total / max(norm_u, np.finfo(float).tiny))
    return worst


@dataclass(frozen=True)
class SweepRecord:
    gamma: float
    nnz_blocks: int
    lq: LqReport
    counts: dict
    wall_s: float
    status: str


def _penalized(problem: SynthesisProblem, spec: BenchmarkSpec, gamma: float):
    pen = penalty_of(spec) if gamma > 0.0 else None
    return replace(problem, penalty=pen, gamma=float(gamma))


def gamma_sweep(spec: BenchmarkSpec, problem: SynthesisProblem = None,
                K_local=None, base: FeasiblePoint = None,
                config=None, **run_kwargs) -> list:
    """Synthesize once per grid value and score each result.

    The centralized fixed point does not depend on gamma, so it is computed
    once and handed to every grid point as a warm start. A failing gamma is
    recorded with its stage label and the sweep moves on.
    """
    if not spec.gamma_grid:
        raise ValueError("gamma_grid is empty")
    if problem is None:
        problem = generate_example(spec)
    if K_local is None:
        K_local = [DEFAULT_LOCAL_GAIN.copy() for _ in range(spec.N)]
    if base is None:
        dense = run(replace(problem, penalty=None, gamma=0.0),
                    K_local=K_local, config=config, **run_kwargs)
        base = dense.point
    records = []
    for gamma in spec.gamma_grid:
        t0 = time.perf_counter()
        try:
            res = run(_penalized(problem, spec, gamma), warm_start=base,
                      config=config, **run_kwargs)
            wall = time.perf_counter() - t0
            lq = eval_lq(res.K, problem)
            counts = dict(res.counts)
            records.append(SweepRecord(
                gamma=float(gamma), nnz_blocks=len(res.pattern), lq=lq,
                counts=counts, wall_s=wall, status=res.status))
        except SynthesisError as err:
            wall = time.perf_counter() - t0
            records.append(SweepRecord(
                gamma=float(gamma), nnz_blocks=-1,
                lq=LqReport(math.nan, math.nan, -1),
                counts={}, wall_s=wall, status=f"failed:{err.stage}"))
    return records
