import numpy as np
import pytest

from sparsegain.blockmat import max_eigenvalue, solve_lyapunov
from sparsegain.dissipativity import QsrTriple
from sparsegain.network import vndt_qhat
from sparsegain.overbound import (
    BmiTerm,
    OverboundAux,
    LinearizationPoint,
    linearization_point,
    lyapunov_gram,
    lyapunov_lq_relaxation,
    relax_ren,
    relax_sebe,
    verify_implication,
    vndt_relaxation,
)
from sparsegain.sdp import SdpProblem, SolverConfig, solve

# substitution residuals are the acceptance here; the solver stop can be loose
CFG = SolverConfig(feas_tol=1e-7, gap_tol=1e-7)


def test_sebe_constant_pencil_values():
    # scalar oracle: trace -5, det 2 certifies the bilinear constraint
    prob = SdpProblem()
    term = BmiTerm(Qpart=np.array([[-3.0]]), X=np.array([[1.0]]),
                   N=np.array([[1.0]]), Y=np.array([[1.0]]))
    con = relax_sebe(prob, term, np.array([[1.0]]))
    F = con.evaluate(np.zeros(0))
    np.testing.assert_allclose(F, [[-3.0, 2.0], [2.0, -2.0]], atol=1e-15)
    assert np.linalg.det(F) == pytest.approx(2.0)
    con2 = relax_sebe(prob, term, np.array([[2.0]]), name="g2")
    F2 = con2.evaluate(np.zeros(0))
    np.testing.assert_allclose(F2, [[-3.0, 3.0], [3.0, -4.0]], atol=1e-15)
    assert np.linalg.det(F2) == pytest.approx(3.0)
    # and the original bilinear value is -3 + He(1*1*1) = -1
    assert term.value(np.zeros(0))[0, 0] == pytest.approx(-1.0)


def test_sebe_vanishing_bilinearity():
    prob = SdpProblem()
    Qpart = -np.eye(2)
    term = BmiTerm(Qpart=Qpart, X=np.zeros((2, 2)), N=np.eye(2), Y=np.zeros((2, 2)))
    con = relax_sebe(prob, term, np.eye(2))
    F = con.evaluate(np.zeros(0))
    expect = np.block([[Qpart, np.zeros((2, 2))], [np.zeros((2, 2)), -2 * np.eye(2)]])
    np.testing.assert_allclose(F, expect, atol=1e-15)


def test_sebe_rejects_indefinite_g():
    prob = SdpProblem()
    term = BmiTerm(Qpart=np.array([[-1.0]]), X=np.array([[0.0]]),
                   N=np.array([[1.0]]), Y=np.array([[0.0]]))
    with pytest.raises(ValueError):
        relax_sebe(prob, term, np.array([[-1.0]]))


def test_bmi_term_shape_validation():
    with pytest.raises(ValueError):
        BmiTerm(Qpart=np.zeros((2, 2)), X=np.zeros((3, 1)),
                N=np.ones((1, 1)), Y=np.zeros((1, 2)))
    with pytest.raises(ValueError):
        BmiTerm(Qpart=np.zeros((2, 2)), X=np.zeros((2, 1)),
                N=np.ones((1, 1)), Y=np.zeros((2, 2)))


def test_ren_base_point_reduction():
    # X = Y = 0, dG = 0, F = F0: block-diagonal, feasible iff Qpart < 0
    prob = SdpProblem()
    term = BmiTerm(Qpart=-np.eye(2), X=np.zeros((2, 1)),
                   N=np.eye(1), Y=np.zeros((1, 2)))
    aux = OverboundAux.create(prob, np.eye(1), np.eye(1))
    con = relax_ren(prob, term, aux)
    x = np.zeros(prob.n_scalars)
    x[aux.F.offset] = 1.0  # F = F0
    F = con.evaluate(x)
    expect = np.zeros((5, 5))
    expect[:2, :2] = -np.eye(2)
    expect[2, 2] = -2.0
    expect[3, 3] = -1.0
    expect[4, 4] = -1.0
    np.testing.assert_allclose(F, expect, atol=1e-15)


def test_aux_validation():
    prob = SdpProblem()
    with pytest.raises(ValueError):
        OverboundAux.create(prob, -np.eye(2))
    with pytest.raises(ValueError):
        OverboundAux.create(prob, np.eye(2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        OverboundAux.create(prob, np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_sebe_substitution_soundness(seed):
    # push a variable Y as hard as the relaxation allows, then substitute
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    p = int(rng.integers(1, 4))
    q = int(rng.integers(1, 4))
    prob = SdpProblem()
    Yv = prob.add_general(q, n, "Y")
    X = rng.normal(size=(n, p))
    N = rng.normal(size=(p, q))
    C = rng.normal(size=(n, n))
    Qpart = -(C @ C.T) - np.eye(n)
    term = BmiTerm(Qpart=Qpart, X=X, N=N, Y=prob.expr(Yv))
    G = np.eye(q) + 0.3 * rng.normal(size=(q, q))
    G = 0.5 * (G + G.T) + q * np.eye(q)
    relax_sebe(prob, term, G)
    W = rng.normal(size=(q, n))
    prob.add_trace_objective(W.T @ prob.expr(Yv), -1.0)
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    assert max_eigenvalue(term.value(sol.x)) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_ren_substitution_soundness(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(1, 7))
    q = int(rng.integers(1, 4))
    prob = SdpProblem()
    Yv = prob.add_general(q, n, "Y")
    Xv = prob.add_general(n, q, "X")
    N = np.eye(q)
    C = rng.normal(size=(n, n))
    Qpart = -(C @ C.T) - np.eye(n)
    term = BmiTerm(Qpart=Qpart, X=prob.expr(Xv), N=N, Y=prob.expr(Yv))
    aux = OverboundAux.create(prob, np.eye(q), np.eye(q))
    relax_ren(prob, term, aux)
    W = rng.normal(size=(q, n))
    V = rng.normal(size=(n, q))
    prob.add_trace_objective(W.T @ prob.expr(Yv), -1.0)
    prob.add_trace_objective(V.T @ prob.expr(Xv), -1.0)
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    assert max_eigenvalue(term.value(sol.x)) <= 1e-6


def scalar_point(P0=2.5):
    # A=1, B=1, Qlq=1, Rlq=1, K0=3: feasibility needs P0 >= 2.5
    qsr0 = QsrTriple(Q=np.array([[-1.0]]), S=np.zeros((1, 1)), R=np.zeros((1, 1)))
    return linearization_point(
        A=np.array([[1.0]]), B=np.array([[1.0]]), Qlq=np.eye(1), Rlq=np.eye(1),
        K0=np.array([[3.0]]), P0=np.array([[P0]]), qsr0=qsr0,
        H0=np.zeros((1, 1)),
    )


def test_linearization_point_validation():
    pt = scalar_point(2.5)
    assert pt.lyap_margin == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        scalar_point(2.4)  # violates the LQ inequality
    qsr_bad = QsrTriple(Q=np.zeros((1, 1)), S=np.zeros((1, 1)), R=np.zeros((1, 1)))
    with pytest.raises(ValueError):
        linearization_point(
            A=np.array([[1.0]]), B=np.array([[1.0]]), Qlq=np.eye(1), Rlq=np.eye(1),
            K0=np.array([[3.0]]), P0=np.array([[3.0]]), qsr0=qsr_bad,
            H0=np.zeros((1, 1)),
        )


def test_scalar_lq_step_moves_toward_riccati():
    # optimal cost of the scalar problem is P* = 1 + sqrt(2)
    pt = scalar_point(2.5)
    prob = SdpProblem()
    dK = prob.add_general(1, 1, "dK")
    dP = prob.add_symmetric(1, "dP")
    aux = OverboundAux.create(prob, pt.G0, pt.F0)
    lyapunov_lq_relaxation(prob, [[1.0]], [[1.0]], np.eye(1), np.eye(1),
                           pt, dK, dP, aux)
    prob.add_trace_objective(prob.expr(dP))
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    P1 = 2.5 + prob.value_of(dP, sol.x)[0, 0]
    K1 = 3.0 + prob.value_of(dK, sol.x)[0, 0]
    assert 1.0 + np.sqrt(2.0) - 1e-6 <= P1 < 2.5
    assert max_eigenvalue(
        lyapunov_gram([[1.0]], [[1.0]], np.eye(1), np.eye(1), [[K1]], [[P1]])
    ) <= 1e-7


def test_lq_sebe_form_also_sound():
    pt = scalar_point(2.6)
    prob = SdpProblem()
    dK = prob.add_general(1, 1, "dK")
    dP = prob.add_symmetric(1, "dP")
    lyapunov_lq_relaxation(prob, [[1.0]], [[1.0]], np.eye(1), np.eye(1),
                           pt, dK, dP, form="sebe")
    prob.add_trace_objective(prob.expr(dP))
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    P1 = 2.6 + prob.value_of(dP, sol.x)[0, 0]
    K1 = 3.0 + prob.value_of(dK, sol.x)[0, 0]
    assert P1 < 2.6
    assert max_eigenvalue(
        lyapunov_gram([[1.0]], [[1.0]], np.eye(1), np.eye(1), [[K1]], [[P1]])
    ) <= 1e-7


def test_lq_rejects_singular_rlq():
    pt = scalar_point(2.5)
    prob = SdpProblem()
    dK = prob.add_general(1, 1, "dK")
    dP = prob.add_symmetric(1, "dP")
    with pytest.raises(ValueError):
        lyapunov_lq_relaxation(prob, [[1.0]], [[1.0]], np.eye(1),
                               np.zeros((1, 1)), pt, dK, dP, form="sebe")


@pytest.mark.parametrize("seed", range(4))
def test_lq_substitution_soundness_random(seed):
    rng = np.random.default_rng(200 + seed)
    n, m = 4, 2
    M = rng.normal(size=(n, n))
    A = -(M @ M.T) - np.eye(n)
    B = rng.normal(size=(n, m))
    Qlq = np.eye(n)
    Rlq = np.eye(m)
    K0 = np.zeros((m, n))
    P0 = solve_lyapunov(A, Qlq + 0.1 * np.eye(n))
    qsr0 = QsrTriple(Q=-np.eye(1), S=np.zeros((1, 1)), R=np.zeros((1, 1)))
    pt = linearization_point(A, B, Qlq, Rlq, K0, P0, qsr0, H0=np.zeros((1, 1)))
    prob = SdpProblem()
    dK = prob.add_general(m, n, "dK")
    dP = prob.add_symmetric(n, "dP")
    aux = OverboundAux.create(prob, pt.G0, pt.F0)
    lyapunov_lq_relaxation(prob, A, B, Qlq, Rlq, pt, dK, dP, aux)
    prob.add_trace_objective(prob.expr(dP))
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    K1 = K0 + prob.value_of(dK, sol.x)
    P1 = P0 + prob.value_of(dP, sol.x)
    resid = verify_implication(
        lambda K, P: lyapunov_gram(A, B, Qlq, Rlq, K, P), K1, P1
    )
    assert resid <= 1e-6
    assert np.linalg.eigvalsh(P1)[0] > 0
    assert np.trace(P1) <= np.trace(P0) + 1e-9


def chain_point():
    qsr0 = QsrTriple(Q=np.array([[-2.0]]), S=np.zeros((1, 1)), R=np.zeros((1, 1)))
    return LinearizationPoint(
        K0=np.zeros((1, 1)), P0=np.eye(1), qsr0=qsr0, H0=np.zeros((1, 1)),
        G0=np.eye(1), F0=np.eye(1), lyap_margin=-1.0, vndt_margin=-2.0,
    )


def test_vndt_base_case_block_values():
    pt = chain_point()
    prob = SdpProblem()
    dq = prob.add_symmetric(1, "dq")
    ds = prob.add_general(1, 1, "ds")
    dr = prob.add_symmetric(1, "dr")
    dh = prob.add_general(1, 1, "dh")
    (con,) = vndt_relaxation(prob, pt, dq, ds, dr, dh)
    F = con.evaluate(np.zeros(prob.n_scalars))
    np.testing.assert_allclose(F, np.diag([-2.0, -2.0, -2.0, -2.0]), atol=1e-15)


def test_vndt_scalar_chain_substitution():
    pt = chain_point()
    prob = SdpProblem()
    dq = prob.add_symmetric(1, "dq")
    ds = prob.add_general(1, 1, "ds")
    dr = prob.add_symmetric(1, "dr")
    dh = prob.add_general(1, 1, "dh")
    vndt_relaxation(prob, pt, dq, ds, dr, dh)
    # floor dq, else the push objective escapes through an ever-more-negative Q
    prob.add_lmi(-prob.expr(dq) - np.eye(1), "nsd", "dq floor")
    prob.add_trace_objective(prob.expr(dh), -1.0)  # push the coupling as far as it goes
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    h = prob.value_of(dh, sol.x)[0, 0]
    assert h > 0.1
    upd = QsrTriple(
        Q=pt.qsr0.Q + prob.value_of(dq, sol.x),
        S=pt.qsr0.S + prob.value_of(ds, sol.x),
        R=pt.qsr0.R + prob.value_of(dr, sol.x),
    )
    resid = verify_implication(vndt_qhat, upd, pt.H0 + prob.value_of(dh, sol.x))
    assert resid <= 1e-6


def test_vndt_rejects_boundary_point():
    qsr0 = QsrTriple(Q=np.zeros((1, 1)), S=np.zeros((1, 1)), R=np.zeros((1, 1)))
    pt = LinearizationPoint(
        K0=np.zeros((1, 1)), P0=np.eye(1), qsr0=qsr0, H0=np.zeros((1, 1)),
        G0=np.eye(1), F0=np.eye(1), lyap_margin=-1.0, vndt_margin=0.0,
    )
    prob = SdpProblem()
    dq = prob.add_symmetric(1, "dq")
    with pytest.raises(ValueError):
        vndt_relaxation(prob, pt, dq, dq, dq, prob.add_general(1, 1, "dh"))


@pytest.mark.parametrize("seed", range(4))
def test_vndt_substitution_soundness_random(seed):
    # matrix-valued rates and interconnection, deltas pushed along random directions
    rng = np.random.default_rng(300 + seed)
    ny, nu = 3, 2
    S0 = 0.1 * rng.normal(size=(ny, nu))
    R0 = 0.1 * np.eye(nu)
    H0 = 0.4 * rng.normal(size=(nu, ny))
    base = -np.eye(ny) + vndt_qhat(QsrTriple(Q=np.zeros((ny, ny)), S=S0, R=R0), H0)
    Q0 = -np.eye(ny) - max(0.0, np.linalg.eigvalsh(base)[-1] + 1.0) * np.eye(ny)
    qsr0 = QsrTriple(Q=Q0, S=S0, R=R0)
    assert max_eigenvalue(vndt_qhat(qsr0, H0)) < 0
    pt = LinearizationPoint(
        K0=np.zeros((nu, ny)), P0=np.eye(1), qsr0=qsr0, H0=H0,
        G0=np.eye(1), F0=np.eye(1), lyap_margin=-1.0,
        vndt_margin=float(max_eigenvalue(vndt_qhat(qsr0, H0))),
    )
    prob = SdpProblem()
    dq = prob.add_symmetric(ny, "dq")
    ds = prob.add_general(ny, nu, "ds")
    dr = prob.add_symmetric(nu, "dr")
    dh = prob.add_general(nu, ny, "dh")
    vndt_relaxation(prob, pt, dq, ds, dr, dh)
    prob.add_lmi(-prob.expr(dq) - 0.5 * np.eye(ny), "nsd", "dq floor")
    prob.add_trace_objective(rng.normal(size=(ny, nu)).T @ prob.expr(ds), -1.0)
    prob.add_trace_objective(rng.normal(size=(nu, ny)).T @ prob.expr(dh), -1.0)
    sol = solve(prob, CFG)
    assert sol.status == "optimal"
    upd = QsrTriple(
        Q=qsr0.Q + prob.value_of(dq, sol.x),
        S=qsr0.S + prob.value_of(ds, sol.x),
        R=qsr0.R + prob.value_of(dr, sol.x),
    )
    resid = verify_implication(vndt_qhat, upd, H0 + prob.value_of(dh, sol.x))
    assert resid <= 1e-6


def test_verify_implication_trivial():
    pt = chain_point()
    got = verify_implication(vndt_qhat, pt.qsr0, pt.H0)
    assert got == pytest.approx(-2.0)
