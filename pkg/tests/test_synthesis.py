"""Pipeline tests on small networks where the answers are checkable by hand."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegain.blockmat import BlockMatrix, BlockPartition
from sparsegain.dissipativity import AgentModel, FixedQsr, QsrTriple, StateSpace
from sparsegain.network import NetworkTopology
from sparsegain.synthesis import (
    MONOTONE_SLACK,
    AdmmState,
    Cardinality,
    SynthesisError,
    SynthesisProblem,
    WeightedL1,
    admm_k_update,
    admm_lambda_update,
    admm_z_update,
    centralized_step,
    dense_pattern,
    initialize,
    make_feasible_point,
    run,
    structured_ico_step,
    weighted_l1_step,
)

RICCATI_TRACE = 1.0 + math.sqrt(2.0)  # scalar ARE: A=B=Q=R=1


def scalar_network():
    """One unstable scalar agent, local control channel, no coupling."""
    part = BlockPartition((1,), (1,))
    topo = NetworkTopology(
        state_dims=(1,), input_dims=(1,),
        H_p=BlockMatrix(np.zeros((1, 1)), part),
        Ht_p=BlockMatrix(np.eye(1), part))
    agent = AgentModel(StateSpace(A=np.array([[1.0]]), B=np.array([[1.0]])))
    return SynthesisProblem(
        agents=(agent,), topology=topo,
        A=np.array([[1.0]]), B=np.array([[1.0]]),
        Qlq=np.eye(1), Rlq=np.eye(1), eps=1e-7)


def two_agent_problem(penalty=None, gamma=0.0):
    """Unstable + stable scalar agents with symmetric coupling 0.5."""
    part = BlockPartition((1, 1), (1, 1))
    topo = NetworkTopology(
        state_dims=(1, 1), input_dims=(1, 1),
        H_p=BlockMatrix(np.array([[0.0, 0.5], [0.5, 0.0]]), part),
        Ht_p=BlockMatrix(np.eye(2), part))
    agents = (AgentModel(StateSpace(A=np.array([[1.0]]), B=np.array([[1.0]]))),
              AgentModel(StateSpace(A=np.array([[-2.0]]), B=np.array([[1.0]]))))
    return SynthesisProblem(
        agents=agents, topology=topo,
        A=np.array([[1.0, 0.5], [0.5, -2.0]]), B=np.eye(2),
        Qlq=np.eye(2), Rlq=np.eye(2), penalty=penalty, gamma=gamma)


TWO_AGENT_SEED = [np.array([[3.0]]), np.array([[1.0]])]


@pytest.fixture(scope="module")
def dense_result():
    return run(two_agent_problem(), K_local=TWO_AGENT_SEED)


@pytest.fixture(scope="module")
def l1_result():
    return run(two_agent_problem(WeightedL1(), gamma=2.0), K_local=TWO_AGENT_SEED)


@pytest.fixture(scope="module")
def admm_result():
    return run(two_agent_problem(Cardinality(rho=10.0), gamma=2.0),
               K_local=TWO_AGENT_SEED)


# ---------------------------------------------------------------------------
# initialization


def test_initialize_returns_verified_point():
    prob = scalar_network()
    pt = initialize(prob, K_local=[np.array([[3.0]])])
    assert pt.lyap_margin <= prob.feas_tol
    assert pt.vndt_margin < 0.0
    # LQ bound at K=3: P(1-3) + (P(1-3))' + 1 + 9 <= 0  =>  P >= 2.5
    assert pt.objective == pytest.approx(2.5, abs=1e-5)


def test_initialize_grows_infeasible_local_gain():
    # K=0.5 leaves the loop unstable (pole +0.5); K=1.5 is the first
    # feasible rung of the 3x growth ladder
    prob = scalar_network()
    pt = initialize(prob, K_local=[np.array([[0.5]])], gain_growth=3.0)
    assert pt.K[0, 0] == pytest.approx(1.5)
    assert pt.lyap_margin <= prob.feas_tol


def test_initialize_unstabilizable_raises():
    # B = 0 makes the LQ inequality infeasible for every gain
    part = BlockPartition((1,), (1,))
    topo = NetworkTopology(
        state_dims=(1,), input_dims=(1,),
        H_p=BlockMatrix(np.zeros((1, 1)), part),
        Ht_p=BlockMatrix(np.zeros((1, 1)), part))
    agent = AgentModel(StateSpace(A=np.array([[1.0]]), B=np.array([[1.0]])))
    prob = SynthesisProblem(
        agents=(agent,), topology=topo,
        A=np.array([[1.0]]), B=np.array([[0.0]]),
        Qlq=np.eye(1), Rlq=np.eye(1))
    with pytest.raises(SynthesisError) as err:
        initialize(prob, K_local=[np.array([[1.0]])], max_attempts=3)
    assert err.value.stage == "initialize"


# ---------------------------------------------------------------------------
# centralized refinement


def test_scalar_steps_reach_riccati_trace():
    prob = scalar_network()
    pt = initialize(prob, K_local=[np.array([[3.0]])])
    for _ in range(40):
        new = centralized_step(prob, pt)
        if new is pt:
            break
        pt = new
    assert pt.objective == pytest.approx(RICCATI_TRACE, abs=1e-3)
    assert pt.K[0, 0] == pytest.approx(RICCATI_TRACE, abs=1e-2)


def test_centralized_trace_monotone(dense_result):
    traces = [h.trace for h in dense_result.history if h.stage == "centralized"]
    assert len(traces) >= 2
    for a, b in zip(traces, traces[1:]):
        assert b <= a + MONOTONE_SLACK


def test_dense_run_keeps_full_pattern(dense_result):
    prob = two_agent_problem()
    assert dense_result.pattern == dense_pattern(prob)
    assert dense_result.status == "ok"
    assert dense_result.point.vndt_margin < 0.0


def test_multiplier_floor_on_accepted_points(dense_result):
    pt = dense_result.point
    assert np.linalg.eigvalsh(pt.G + pt.G.T)[0] >= 0.9e-6
    assert np.linalg.eigvalsh(0.5 * (pt.F + pt.F.T))[0] >= 0.9e-6


# ---------------------------------------------------------------------------
# weighted l1


def test_l1_drops_coupling_and_stable_agent(l1_result):
    # the stable agent needs no feedback; gamma=2 prunes everything but the
    # unstable agent's local loop
    assert l1_result.pattern == frozenset({(0, 0)})
    off = np.ones((2, 2), dtype=bool)
    off[0, 0] = False
    assert np.all(l1_result.K[off] == 0.0)
    assert l1_result.point.vndt_margin < 0.0


def test_l1_structured_refit_costs_more_than_dense(dense_result, l1_result):
    assert l1_result.point.objective >= dense_result.point.objective - MONOTONE_SLACK


def test_gamma_zero_reduces_to_centralized(dense_result):
    prob = two_agent_problem(WeightedL1(), gamma=0.0)
    res = run(prob, K_local=TWO_AGENT_SEED)
    assert res.pattern == dense_pattern(prob)
    assert res.point.objective == pytest.approx(dense_result.point.objective,
                                                rel=1e-3)


def test_oversized_gamma_raises():
    # threshold sqrt(2*1e4/10) ~ 45 swallows every block, Z collapses to
    # zero, and no structure is left to promote
    prob = two_agent_problem(Cardinality(rho=10.0, max_admm_iter=3), gamma=1e4)
    with pytest.raises(SynthesisError) as err:
        run(prob, K_local=TWO_AGENT_SEED)
    assert err.value.stage == "sparsity"
    assert "gamma" in str(err.value)


# ---------------------------------------------------------------------------
# cardinality / ADMM


def test_admm_run_converges_to_same_structure(admm_result, l1_result):
    assert admm_result.status == "ok"
    assert admm_result.pattern == l1_result.pattern
    last = [h for h in admm_result.history if h.stage == "sparsity"][-1]
    assert last.r_p <= 1e-4 and last.r_d <= 1e-4
    assert admm_result.counts["admm"] <= 100


def test_admm_and_l1_agree_on_trace(admm_result, l1_result):
    assert admm_result.point.objective == pytest.approx(
        l1_result.point.objective, rel=1e-2)


def test_large_rho_pins_gain_to_consensus():
    # as the proximity weight grows the K-update can barely move away from Z
    prob = two_agent_problem(Cardinality(rho=1e6), gamma=2.0)
    pt = initialize(prob, K_local=TWO_AGENT_SEED)
    part = prob.gain_partition
    state = AdmmState(Z=BlockMatrix(pt.K.copy(), part),
                      dual=BlockMatrix(np.zeros_like(pt.K), part))
    new = admm_k_update(prob, pt, state)
    assert np.max(np.abs(new.K - pt.K)) <= 1e-3


def _prox_oracle(V, gamma, rho):
    # blockwise argmin of gamma*1{Z!=0} + rho/2 ||V - Z||^2: keeping costs
    # gamma, zeroing costs rho/2 ||V||^2; ties resolve to zero
    return V if 0.5 * rho * np.sum(V * V) > gamma else np.zeros_like(V)


def test_z_update_matches_prox_oracle():
    rng = np.random.default_rng(7)
    part = BlockPartition((2, 1), (2, 2, 1))
    gamma, rho = 2.0, 10.0
    K = BlockMatrix(rng.normal(size=(3, 5)), part)
    dual = BlockMatrix(rng.normal(size=(3, 5)), part)
    Z = admm_z_update(K, dual, gamma, rho)
    V = K.data + dual.data
    for i in range(2):
        for j in range(3):
            r0, c0 = part.row_offset(i), part.col_offset(j)
            blk = V[r0:r0 + part.row_sizes[i], c0:c0 + part.col_sizes[j]]
            want = _prox_oracle(blk, gamma, rho)
            got = Z.data[r0:r0 + part.row_sizes[i], c0:c0 + part.col_sizes[j]]
            assert np.array_equal(got, want)


def test_z_update_tie_goes_to_zero():
    # ||V|| exactly sqrt(2 gamma / rho): both branches cost gamma; zero wins
    gamma, rho = 8.0, 4.0
    v = math.sqrt(2.0 * gamma / rho)
    part = BlockPartition((1,), (1,))
    K = BlockMatrix(np.array([[v]]), part)
    dual = BlockMatrix(np.zeros((1, 1)), part)
    assert admm_z_update(K, dual, gamma, rho).data[0, 0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_z_update_prox_property(seed):
    rng = np.random.default_rng(seed)
    sizes = tuple(int(s) for s in rng.integers(1, 3, size=rng.integers(1, 4)))
    csizes = tuple(int(s) for s in rng.integers(1, 3, size=rng.integers(1, 4)))
    part = BlockPartition(sizes, csizes)
    gamma = float(rng.uniform(0.01, 5.0))
    rho = float(rng.uniform(0.1, 50.0))
    # mix of tiny and large blocks so both branches get exercised
    V = rng.normal(scale=rng.choice([0.05, 5.0]), size=(sum(sizes), sum(csizes)))
    K = BlockMatrix(V, part)
    dual = BlockMatrix(np.zeros_like(V), part)
    Z = admm_z_update(K, dual, gamma, rho)
    for i in range(len(sizes)):
        for j in range(len(csizes)):
            r0, c0 = part.row_offset(i), part.col_offset(j)
            blk = V[r0:r0 + sizes[i], c0:c0 + csizes[j]]
            want = _prox_oracle(blk, gamma, rho)
            got = Z.data[r0:r0 + sizes[i], c0:c0 + csizes[j]]
            assert np.array_equal(got, want)


def test_lambda_update_residuals():
    part = BlockPartition((1,), (1,))
    state = AdmmState(Z=BlockMatrix(np.array([[2.0]]), part),
                      dual=BlockMatrix(np.array([[0.5]]), part))
    K = BlockMatrix(np.array([[3.0]]), part)
    Z = BlockMatrix(np.array([[4.0]]), part)
    new = admm_lambda_update(state, K, Z)
    assert new.dual.data[0, 0] == pytest.approx(0.5 + (3.0 - 4.0))
    assert new.r_p == pytest.approx(abs(3.0 - 4.0) / 4.0)
    assert new.r_d == pytest.approx(abs(4.0 - 2.0) / 4.0)
    assert new.k == 1


# ---------------------------------------------------------------------------
# structured refinement


def test_structured_step_requires_conformal_gain(dense_result):
    prob = two_agent_problem()
    with pytest.raises(ValueError):
        structured_ico_step(prob, dense_result.point, {(0, 0)})


def test_structured_steps_preserve_pattern(l1_result):
    # every structured iterate stayed on the promoted support
    off = np.ones((2, 2), dtype=bool)
    off[0, 0] = False
    assert np.all(l1_result.K[off] == 0.0)
    traces = [h.trace for h in l1_result.history if h.stage == "structured"]
    for a, b in zip(traces, traces[1:]):
        assert b <= a + MONOTONE_SLACK


# ---------------------------------------------------------------------------
# verification and validation


def test_make_feasible_point_rejects_bad_candidate():
    prob = scalar_network()
    rate = QsrTriple(Q=np.array([[1.0]]), S=np.array([[1.0]]),
                     R=np.array([[1.0]]))
    with pytest.raises(SynthesisError) as err:
        make_feasible_point(prob, K=np.zeros((1, 1)), P=np.eye(1),
                            agent_rates=[rate], ctrl_rates=[rate],
                            agent_storage=[np.eye(1)], lam=[None],
                            G=np.eye(1), F=np.eye(1))
    assert "violated" in str(err.value) or "not negative" in str(err.value)


def test_fixed_rate_agent_flows_through_pipeline():
    # stable scalar agent with a prescribed rate shape: x' = -2x + e is
    # dissipative for (Q,S,R) = lam*(-3, 1, 0.5) whenever lam >= 0.5
    part = BlockPartition((1, 1), (1, 1))
    topo = NetworkTopology(
        state_dims=(1, 1), input_dims=(1, 1),
        H_p=BlockMatrix(np.array([[0.0, 0.5], [0.5, 0.0]]), part),
        Ht_p=BlockMatrix(np.eye(2), part))
    fixed = FixedQsr(Q_p=np.array([[-3.0]]), S_p=np.array([[1.0]]),
                     R_p=np.array([[0.5]]), lam_min=0.5)
    agents = (AgentModel(StateSpace(A=np.array([[1.0]]), B=np.array([[1.0]]))),
              AgentModel(fixed))
    prob = SynthesisProblem(
        agents=agents, topology=topo,
        A=np.array([[1.0, 0.5], [0.5, -2.0]]), B=np.eye(2),
        Qlq=np.eye(2), Rlq=np.eye(2))
    res = run(prob, K_local=TWO_AGENT_SEED)
    assert res.point.lam[1] is not None and res.point.lam[1] >= 0.5 - 1e-9
    assert res.point.vndt_margin < 0.0


def test_problem_validation():
    prob = scalar_network()
    with pytest.raises(ValueError):
        SynthesisProblem(agents=prob.agents, topology=prob.topology,
                         A=np.eye(2), B=np.eye(1), Qlq=np.eye(1), Rlq=np.eye(1))
    with pytest.raises(ValueError):
        SynthesisProblem(agents=prob.agents, topology=prob.topology,
                         A=np.eye(1), B=np.eye(1), Qlq=-np.eye(1), Rlq=np.eye(1))
    with pytest.raises(ValueError):
        SynthesisProblem(agents=prob.agents, topology=prob.topology,
                         A=np.eye(1), B=np.eye(1), Qlq=np.eye(1), Rlq=np.eye(1),
                         gamma=-1.0)
    with pytest.raises(ValueError):
        SynthesisProblem(agents=prob.agents, topology=prob.topology,
                         A=np.eye(1), B=np.eye(1), Qlq=np.eye(1), Rlq=np.eye(1),
                         penalty="l1")
    with pytest.raises(ValueError):
        WeightedL1(eps_l=0.0)
    with pytest.raises(ValueError):
        Cardinality(rho=-1.0)


def test_history_records_all_stages(l1_result):
    stages = {h.stage for h in l1_result.history}
    assert {"initialize", "centralized", "sparsity"} <= stages
