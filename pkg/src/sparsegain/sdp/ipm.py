"""Interior-point solver for block-diagonal linear SDPs.

Implements a homogeneous self-dual embedding with Nesterov-Todd scaling and
a Mehrotra predictor-corrector step, specialized to problems of the form

    minimize    c^T x
    subject to  F0_k + sum_i x_i Fi_k <= 0   for each block k

i.e. one PSD slack per constraint block. Symmetric matrices travel in the
scaled-vector (svec) convention, off-diagonals multiplied by sqrt(2), so the
Euclidean inner product of two svecs equals the trace inner product.

Each Newton direction is polished by one round of iterative refinement of
the full KKT system (not just the Schur complement); without it the primal
residual floors out near sqrt(eps) on degenerate problems and the tight
default tolerances become unreachable.

The solver never fabricates a status: "optimal" requires the scaled primal
and dual residuals and the relative gap to clear the configured tolerances,
and "infeasible"/"unbounded" are only reported with an explicit improving
ray whose residual is re-checked on the unscaled data.

Determinism: pure numpy linear algebra, no randomness, no iteration-order
ambiguity (dicts are only iterated after sorting keys).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .model import SdpProblem, SdpSolution, SolverConfig

_STEP = 0.99  # fraction of the distance to the cone boundary
_TINY = 1e-14


# ---------------------------------------------------------------------------
# svec helpers


def svec_dim(d: int) -> int:
    return d * (d + 1) // 2


def svec_indices(d: int):
    iu = np.triu_indices(d)
    wts = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return iu, wts


def svec(M: np.ndarray, iu, wts) -> np.ndarray:
    return M[iu] * wts


def smat(v: np.ndarray, d: int, iu, wts) -> np.ndarray:
    M = np.zeros((d, d))
    vals = v / wts
    M[iu] = vals
    M[iu[1], iu[0]] = vals
    return M


def _smat_batch(V, d, iu, wts):
    nb = V.shape[0]
    M = np.zeros((nb, d, d))
    vals = V / wts
    M[:, iu[0], iu[1]] = vals
    M[:, iu[1], iu[0]] = vals
    return M


def _svec_batch(M, iu, wts):
    Ms = 0.5 * (M + M.transpose(0, 2, 1))
    return Ms[:, iu[0], iu[1]] * wts


# ---------------------------------------------------------------------------
# problem preprocessing


class _Block:
    """One constraint block, with cached structure for Schur assembly."""

    __slots__ = ("dim", "act", "act_local", "gflat", "sig_groups", "row0")

    def __init__(self, dim, act, act_local, gflat, sig_groups, row0):
        self.dim = dim
        self.act = act
        self.act_local = act_local
        self.gflat = gflat
        self.sig_groups = sig_groups
        self.row0 = row0


class _Group:
    """All blocks of one dimension, processed with batched linear algebra."""

    __slots__ = ("dim", "svd", "iu", "wts", "blocks", "m0", "nb")

    def __init__(self, dim, blocks, m0):
        self.dim = dim
        self.svd = svec_dim(dim)
        self.iu, self.wts = svec_indices(dim)
        self.blocks = blocks
        self.m0 = m0
        self.nb = len(blocks)

    def view(self, vec):
        """(nb, svd) view of this group's rows of a length-m vector."""
        return vec[self.m0 : self.m0 + self.nb * self.svd].reshape(
            self.nb, self.svd
        )


def _build_blocks(cons, F0s, col_of, rowscale, colscale, dense_cutoff=0.62):
    """Group constraints by dimension; precompute Schur assembly structure."""
    order = sorted(range(len(cons)), key=lambda k: (cons[k].dim, k))
    groups = []
    m0 = 0
    k_ptr = 0
    h_parts = []
    g_rows, g_cols, g_vals = [], [], []
    perm = []  # constraint index per grouped position
    while k_ptr < len(order):
        d = cons[order[k_ptr]].dim
        same = [k for k in order[k_ptr:] if cons[k].dim == d]
        k_ptr += len(same)
        iu, wts = svec_indices(d)
        svd = svec_dim(d)
        blocks = []
        for k in same:
            con = cons[k]
            rs = rowscale[k]
            act = np.array(sorted(con.coeffs.keys()), dtype=int)
            act_local = np.array([col_of[i] for i in act], dtype=int)
            sigs = {}
            fl_rows, fl_cols, fl_vals = [], [], []
            for pos, i in enumerate(act):
                C = (con.coeffs[i] * (rs * colscale[col_of[i]])).tocoo()
                Cd = C.toarray()
                sv = svec(Cd, iu, wts)
                nz = np.nonzero(sv)[0]
                g_rows.append(m0 + len(blocks) * svd + nz)
                g_cols.append(np.full(len(nz), col_of[i]))
                g_vals.append(sv[nz])
                fr = C.row * d + C.col
                fl_rows.append(np.full(len(fr), pos))
                fl_cols.append(fr)
                fl_vals.append(C.data)
                u = np.unique(np.concatenate([C.row, C.col]))
                if len(u) > dense_cutoff * d:
                    u = np.arange(d)
                sig = u.tobytes()
                sigs.setdefault(sig, (u, [], []))
                sigs[sig][1].append(pos)
                sigs[sig][2].append(Cd[np.ix_(u, u)])
            if len(act):
                gflat = sp.csr_matrix(
                    (
                        np.concatenate(fl_vals),
                        (np.concatenate(fl_rows), np.concatenate(fl_cols)),
                    ),
                    shape=(len(act), d * d),
                )
            else:
                gflat = sp.csr_matrix((0, d * d))
            sig_groups = [
                (u, np.array(poss, dtype=int), np.array(mats))
                for (u, poss, mats) in sigs.values()
            ]
            blocks.append(
                _Block(d, act, act_local, gflat, sig_groups, m0 + len(blocks) * svd)
            )
            h_parts.append(svec(-rs * F0s[k], iu, wts))
            perm.append(k)
        groups.append(_Group(d, blocks, m0))
        m0 += len(blocks) * svd
    h = np.concatenate(h_parts) if h_parts else np.zeros(0)
    if g_rows:
        G = sp.csr_matrix(
            (
                np.concatenate(g_vals),
                (np.concatenate(g_rows), np.concatenate(g_cols)),
            ),
            shape=(m0, len(colscale)),
        )
    else:
        G = sp.csr_matrix((m0, len(colscale)))
    return groups, G, h, perm


def _equilibrate(cons, F0s, col_ids, passes=4):
    """Per-block row scales and per-variable column scales (Ruiz style)."""
    nk = len(cons)
    n = len(col_ids)
    col_of = {i: p for p, i in enumerate(col_ids)}
    rowscale = np.ones(nk)
    colscale = np.ones(n)
    cmax0 = np.zeros(nk)
    vmax = [dict() for _ in range(nk)]
    for k, con in enumerate(cons):
        cmax0[k] = np.max(np.abs(F0s[k]), initial=0.0)
        for i, C in con.coeffs.items():
            m = np.max(np.abs(C.data), initial=0.0) if C.nnz else 0.0
            vmax[k][col_of[i]] = m
    for _ in range(passes):
        for k in range(nk):
            m = cmax0[k] * rowscale[k]
            for j, v in vmax[k].items():
                m = max(m, v * rowscale[k] * colscale[j])
            if m > 0:
                rowscale[k] /= np.sqrt(m)
        colmax = np.zeros(n)
        for k in range(nk):
            for j, v in vmax[k].items():
                colmax[j] = max(colmax[j], v * rowscale[k] * colscale[j])
        nzc = colmax > 0
        colscale[nzc] /= np.sqrt(colmax[nzc])
    rowscale = np.clip(rowscale, 1e-8, 1e8)
    colscale = np.clip(colscale, 1e-8, 1e8)
    return rowscale, colscale, col_of


# ---------------------------------------------------------------------------
# per-iteration linear algebra


def _nt_scalings(groups, s, z):
    """Per group: R, Rinv, lam, W, Winv  (batched over blocks)."""
    out = []
    for g in groups:
        S = _smat_batch(g.view(s), g.dim, g.iu, g.wts)
        Z = _smat_batch(g.view(z), g.dim, g.iu, g.wts)
        try:
            Ls = np.linalg.cholesky(S)
            Lz = np.linalg.cholesky(Z)
        except np.linalg.LinAlgError:
            return None
        M = np.matmul(Lz.transpose(0, 2, 1), Ls)
        U, sig, Vt = np.linalg.svd(M)
        if np.min(sig) <= 0:
            return None
        isq = 1.0 / np.sqrt(sig)
        R = np.matmul(Ls, Vt.transpose(0, 2, 1)) * isq[:, None, :]
        Rinv_T = np.matmul(Lz, U) * isq[:, None, :]  # = R^{-T}
        Rinv = Rinv_T.transpose(0, 2, 1)
        lam = sig
        W = np.matmul(R, R.transpose(0, 2, 1))
        Winv = np.matmul(Rinv_T, Rinv)
        out.append((R, Rinv, lam, W, Winv))
    return out


def _apply_winv(groups, scal, vec):
    out = np.empty_like(vec)
    for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
        X = _smat_batch(g.view(vec), g.dim, g.iu, g.wts)
        Y = np.matmul(Winv, np.matmul(X, Winv))
        out[g.m0 : g.m0 + g.nb * g.svd] = _svec_batch(Y, g.iu, g.wts).ravel()
    return out


def _apply_w(groups, scal, vec):
    out = np.empty_like(vec)
    for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
        X = _smat_batch(g.view(vec), g.dim, g.iu, g.wts)
        Y = np.matmul(W, np.matmul(X, W))
        out[g.m0 : g.m0 + g.nb * g.svd] = _svec_batch(Y, g.iu, g.wts).ravel()
    return out


def _congr_batch(A, X):
    """A X A^T batched."""
    return np.matmul(A, np.matmul(X, A.transpose(0, 2, 1)))


def _schur(groups, scal, n):
    """S = sum_k Gk^T (Winv . Winv) Gk assembled blockwise."""
    S = np.zeros((n, n))
    for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
        d = g.dim
        for b, blk in enumerate(g.blocks):
            na = len(blk.act)
            if na == 0:
                continue
            Wi = Winv[b]
            H = np.empty((na, d * d))
            for u, poss, mats in blk.sig_groups:
                Wc = Wi[:, u]
                T1 = np.matmul(mats, Wc.T)  # (nv, h, d)
                Hn = np.matmul(Wc[None, :, :], T1)  # (nv, d, d)
                H[poss] = Hn.reshape(len(poss), d * d)
            Sk = blk.gflat @ H.T
            Sk = 0.5 * (Sk + Sk.T)
            S[np.ix_(blk.act_local, blk.act_local)] += Sk
    return S


def _min_step(groups, scal, dvec, which):
    """Largest alpha with  lam + alpha*Delta~ >= 0  over all blocks."""
    amax = np.inf
    for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
        D = _smat_batch(g.view(dvec), g.dim, g.iu, g.wts)
        if which == "s":
            T = _congr_batch(Rinv, D)
        else:
            T = _congr_batch(R.transpose(0, 2, 1), D)
        den = np.sqrt(lam[:, :, None] * lam[:, None, :])
        T = T / den
        ev = np.linalg.eigvalsh(0.5 * (T + T.transpose(0, 2, 1)))
        lo = float(ev[:, 0].min())
        if lo < 0:
            amax = min(amax, -1.0 / lo)
    return amax


# ---------------------------------------------------------------------------
# main entry


def solve_ipm(problem: SdpProblem, config: SolverConfig) -> SdpSolution:
    cons = problem.constraints
    n_all = problem.n_scalars
    c_all = np.zeros(n_all)
    for i, v in problem.objective.items():
        c_all[int(i)] = float(v)

    if not cons:
        if np.any(c_all != 0.0):
            i = int(np.argmax(np.abs(c_all)))
            ray = np.zeros(n_all)
            ray[i] = -np.sign(c_all[i])
            return SdpSolution(
                status="unbounded",
                x=ray,
                objective_value=-np.inf,
                iterations=0,
                max_constraint_violation=0.0,
                certificate={"kind": "dual_infeasible", "ray": ray, "residual": 0.0},
            )
        return SdpSolution(
            status="optimal",
            x=np.zeros(n_all),
            objective_value=problem.objective_const,
            iterations=0,
            max_constraint_violation=-np.inf,
        )

    F0s = [problem.realized_constant(con, config.margin) for con in cons]

    used = set()
    for con in cons:
        used.update(con.coeffs.keys())
    for i in range(n_all):
        if c_all[i] != 0.0 and i not in used:
            ray = np.zeros(n_all)
            ray[i] = -np.sign(c_all[i])
            return SdpSolution(
                status="unbounded",
                x=ray,
                objective_value=-np.inf,
                iterations=0,
                max_constraint_violation=0.0,
                certificate={"kind": "dual_infeasible", "ray": ray, "residual": 0.0},
                info={"note": f"free variable {i} with nonzero cost"},
            )
    col_ids = sorted(used)
    n = len(col_ids)

    if n == 0:
        worst, kworst = -np.inf, -1
        for k, F0 in enumerate(F0s):
            lam = float(np.linalg.eigvalsh(F0)[-1])
            if lam > worst:
                worst, kworst = lam, k
        if worst <= 0.0:
            return SdpSolution(
                status="optimal",
                x=np.zeros(n_all),
                objective_value=problem.objective_const,
                iterations=0,
                max_constraint_violation=worst,
            )
        F0 = F0s[kworst]
        w, V = np.linalg.eigh(F0)
        v = V[:, -1]
        return SdpSolution(
            status="infeasible",
            x=np.zeros(n_all),
            objective_value=np.nan,
            iterations=0,
            max_constraint_violation=worst,
            certificate={
                "kind": "primal_infeasible",
                "block": kworst,
                "z": np.outer(v, v) / worst,
                "residual": 0.0,
            },
        )

    rowscale, colscale, col_of = _equilibrate(cons, F0s, col_ids)
    groups, G, h, perm = _build_blocks(cons, F0s, col_of, rowscale, colscale)
    m = h.shape[0]
    nu = sum(con.dim for con in cons)

    c = np.array([c_all[i] * colscale[col_of[i]] for i in col_ids])
    objscale = max(1.0, float(np.max(np.abs(c), initial=0.0)))
    c = c / objscale

    GT = G.T.tocsr()
    hnorm = max(1.0, float(np.linalg.norm(h)))
    cnorm = max(1.0, float(np.linalg.norm(c)))

    x = np.zeros(n)
    s = np.zeros(m)
    z = np.zeros(m)
    for g in groups:
        e = svec(np.eye(g.dim), g.iu, g.wts)
        g.view(s)[:] = e
        g.view(z)[:] = e
    tau, kappa = 1.0, 1.0

    ftol, gtol = config.feas_tol, config.gap_tol
    status = "max_iterations"
    cert = None
    info = {}
    it = 0
    n_small_steps = 0
    pres = dres = relgap = np.nan
    best = None  # (score, x, tau, pres, dres, relgap)
    marks = None  # per-component floor of (pres, dres, relgap) reached so far
    n_no_progress = 0

    for it in range(1, config.max_iter + 1):
        rx = GT @ z + c * tau
        rz = G @ x + s - h * tau
        rt = float(c @ x + h @ z + kappa)
        gap = float(s @ z)
        mu = (gap + tau * kappa) / (nu + 1)

        pres = np.linalg.norm(rz) / tau / hnorm
        dres = np.linalg.norm(rx) / tau / cnorm
        pcost = float(c @ x) / tau
        dcost = -float(h @ z) / tau
        relgap = gap / tau**2 / max(1.0, abs(pcost), abs(dcost))

        if not np.isfinite(pres + dres + relgap + mu):
            status = "numerical_failure"
            info["reason"] = "non-finite iterate"
            break

        if config.verbose:
            print(f"  it {it:3d} pres {pres:9.2e} dres {dres:9.2e} "
                  f"relgap {relgap:9.2e} mu {mu:9.2e} tau {tau:8.2e} "
                  f"kappa {kappa:8.2e}")

        score = max(pres, dres, relgap)
        if best is None or score < best[0]:
            best = (score, x.copy(), tau, pres, dres, relgap)
        # a walk that keeps shrinking any one residual is still working, even
        # while the worst of the three is momentarily pinned; only give up
        # when nothing at all has improved for a while
        if marks is None or any(v < 0.9 * b for v, b in
                                zip((pres, dres, relgap), marks)):
            n_no_progress = 0
            marks = (min(pres, marks[0]) if marks else pres,
                     min(dres, marks[1]) if marks else dres,
                     min(relgap, marks[2]) if marks else relgap)
        else:
            n_no_progress += 1

        if dres <= ftol and relgap <= gtol:
            ok = pres <= ftol
            if not ok:
                # ||rz|| can floor out on roundoff while the pencil itself
                # is already feasible; judge the real thing before failing
                worst = -np.inf
                for g in groups:
                    Pk = _smat_batch(
                        (g.view(rz) - g.view(s)) / tau, g.dim, g.iu, g.wts
                    )
                    ev = np.linalg.eigvalsh(Pk)
                    worst = max(worst, float(ev[:, -1].max()))
                ok = worst <= ftol
            if ok:
                status = "optimal"
                break

        if n_no_progress >= 8:
            status = "max_iterations"
            info["reason"] = "no residual progress over 8 iterations"
            break

        hz = float(h @ z)
        cx = float(c @ x)
        if hz < -_TINY:
            zn = z / (-hz)
            if np.linalg.norm(GT @ zn) <= ftol * cnorm:
                zmats, raw_res, raw_hz = _raw_ray(
                    problem, cons, groups, perm, zn, rowscale, config.margin
                )
                if raw_hz < 0 and raw_res <= 10 * ftol * max(
                    1.0, np.max(np.abs(c_all), initial=0.0)
                ):
                    status = "infeasible"
                    cert = {
                        "kind": "primal_infeasible",
                        "z_blocks": zmats,
                        "residual": raw_res,
                    }
                    break
        if cx < -_TINY:
            xn = x / (-cx)
            sn = s / (-cx)
            if np.linalg.norm(G @ xn + sn) <= ftol * hnorm:
                status = "unbounded"
                ray = np.zeros(n_all)
                for p, i in enumerate(col_ids):
                    ray[i] = xn[p] * colscale[p]
                cert = {
                    "kind": "dual_infeasible",
                    "ray": ray,
                    "residual": float(np.linalg.norm(G @ xn + sn)),
                }
                break

        scal = _nt_scalings(groups, s, z)
        if scal is None:
            status = "numerical_failure"
            info["reason"] = "slack left the cone"
            break

        S = _schur(groups, scal, n)
        jitter = 0.0
        base = np.trace(S) / max(n, 1)
        L = None
        for attempt in range(4):
            try:
                L = np.linalg.cholesky(
                    S + (jitter * np.eye(n) if jitter else 0.0)
                )
                break
            except np.linalg.LinAlgError:
                jitter = max(jitter * 100.0, 1e-13 * max(base, 1.0))
        if L is None:
            status = "numerical_failure"
            info["reason"] = "Schur complement not positive definite"
            break

        def solve_S(b):
            y = sla.solve_triangular(L, b, lower=True)
            y = sla.solve_triangular(L.T, y, lower=False)
            r = b - S @ y
            y2 = sla.solve_triangular(L, r, lower=True)
            y2 = sla.solve_triangular(L.T, y2, lower=False)
            return y + y2

        winv_h = _apply_winv(groups, scal, h)
        u2 = solve_S(GT @ winv_h - c)
        # c'u2 + h'v2 - kappa/tau in its algebraically equivalent quadratic
        # form, which cannot lose the sign to cancellation
        qv = h - G @ u2
        wq = _apply_winv(groups, scal, qv)
        v2 = -wq
        denom = -max(float(qv @ wq), 0.0) - kappa / tau
        if not np.isfinite(denom) or denom >= 0:
            status = "numerical_failure"
            info["reason"] = "degenerate tau-step denominator"
            break

        def core(a1, a2, a3, gmats, d5):
            """One reduced-system solve; gmats is the scaled target list."""
            rz_plus = np.empty(m)
            for g, (R, Rinv, lam, W, Winv), Gm in zip(groups, scal, gmats):
                Y = _congr_batch(R, Gm)
                rz_plus[g.m0 : g.m0 + g.nb * g.svd] = _svec_batch(
                    Y, g.iu, g.wts
                ).ravel()
            rgrt = rz_plus.copy()  # R gamma R^T in svec, reused for ds
            rz_plus = rz_plus - a2
            u1 = solve_S(a1 - GT @ _apply_winv(groups, scal, rz_plus))
            v1 = _apply_winv(groups, scal, G @ u1 + rz_plus)
            dtau = float((a3 - c @ u1 - h @ v1 - d5 / tau) / denom)
            dx = u1 + dtau * u2
            dz = v1 + dtau * v2
            dkappa = (d5 - kappa * dtau) / tau
            ds = rgrt - _apply_w(groups, scal, dz)
            return dx, dz, ds, dtau, dkappa

        def direction(a1, a2, a3, gmats, d5):
            # full-system iterative refinement: recompute the residuals of
            # all five Newton equations and solve for a correction, until
            # the correction stops helping (the Schur system alone carries
            # condition ~ 1/mu^2, which unrefined wastes half the digits)
            dx, dz, ds, dtau, dkappa = core(a1, a2, a3, gmats, d5)
            rhs_scale = max(
                np.max(np.abs(a1), initial=0.0),
                np.max(np.abs(a2), initial=0.0),
                abs(a3),
                max(np.max(np.abs(Gm)) for Gm in gmats),
                abs(d5),
                1e-30,
            )
            prev = np.inf
            for _ in range(3):
                e1 = a1 - (GT @ dz + c * dtau)
                e2 = a2 - (G @ dx + ds - h * dtau)
                e3 = a3 - (float(c @ dx + h @ dz) + dkappa)
                e5 = d5 - (kappa * dtau + tau * dkappa)
                emats = []
                enorm = max(
                    np.max(np.abs(e1), initial=0.0),
                    np.max(np.abs(e2), initial=0.0),
                    abs(e3),
                    abs(e5),
                )
                for g, (R, Rinv, lam, W, Winv), Gm in zip(groups, scal, gmats):
                    Dz = _congr_batch(
                        R.transpose(0, 2, 1),
                        _smat_batch(g.view(dz), g.dim, g.iu, g.wts),
                    )
                    Ds = _congr_batch(
                        Rinv, _smat_batch(g.view(ds), g.dim, g.iu, g.wts)
                    )
                    E = Gm - (Dz + Ds)
                    enorm = max(enorm, float(np.max(np.abs(E), initial=0.0)))
                    emats.append(E)
                if enorm <= 1e-13 * rhs_scale or enorm >= 0.5 * prev:
                    break
                prev = enorm
                cx_, cz_, cs_, ct_, ck_ = core(e1, e2, e3, emats, e5)
                dx = dx + cx_
                dz = dz + cz_
                ds = ds + cs_
                dtau += ct_
                dkappa += ck_
            return dx, dz, ds, dtau, dkappa

        gmats_aff = []
        for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
            D = np.zeros((g.nb, g.dim, g.dim))
            idx = np.arange(g.dim)
            D[:, idx, idx] = -lam
            gmats_aff.append(D)

        dx_a, dz_a, ds_a, dt_a, dk_a = direction(
            -rx, -rz, -rt, gmats_aff, -tau * kappa
        )
        alpha = min(
            _min_step(groups, scal, ds_a, "s"),
            _min_step(groups, scal, dz_a, "z"),
        )
        if dt_a < 0:
            alpha = min(alpha, -tau / dt_a)
        if dk_a < 0:
            alpha = min(alpha, -kappa / dk_a)
        alpha = min(1.0, _STEP * alpha)

        gap_aff = float(
            (s + alpha * ds_a) @ (z + alpha * dz_a)
            + (tau + alpha * dt_a) * (kappa + alpha * dk_a)
        )
        sigma = min(1.0, max(0.0, gap_aff / (gap + tau * kappa))) ** 3

        gmats = []
        for g, (R, Rinv, lam, W, Winv) in zip(groups, scal):
            Ds = _congr_batch(
                Rinv, _smat_batch(g.view(ds_a), g.dim, g.iu, g.wts)
            )
            Dz = _congr_batch(
                R.transpose(0, 2, 1),
                _smat_batch(g.view(dz_a), g.dim, g.iu, g.wts),
            )
            corr = 0.5 * (np.matmul(Ds, Dz) + np.matmul(Dz, Ds))
            D = -corr
            idx = np.arange(g.dim)
            D[:, idx, idx] += sigma * mu - lam**2
            lam_s = 0.5 * (lam[:, :, None] + lam[:, None, :])
            gmats.append(D / lam_s)
        d5 = sigma * mu - tau * kappa - dt_a * dk_a
        f = 1.0 - sigma
        dx, dz, ds, dtau, dkappa = direction(-f * rx, -f * rz, -f * rt, gmats, d5)

        alpha = min(
            _min_step(groups, scal, ds, "s"),
            _min_step(groups, scal, dz, "z"),
        )
        if dtau < 0:
            alpha = min(alpha, -tau / dtau)
        if dkappa < 0:
            alpha = min(alpha, -kappa / dkappa)
        alpha = min(1.0, _STEP * alpha)

        if alpha < 1e-8:
            n_small_steps += 1
            if n_small_steps >= 3:
                status = "max_iterations"
                info["reason"] = "step length collapsed"
                break
        else:
            n_small_steps = 0

        x = x + alpha * dx
        z = z + alpha * dz
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkappa

        if tau < 1e-12:
            status = "numerical_failure"
            info["reason"] = "tau collapsed without a certificate"
            break

    if status in ("max_iterations", "numerical_failure") and best is not None:
        # return the best iterate seen, not wherever the walk ended up
        _, bx, btau, bpres, bdres, brelgap = best
        x, tau = bx, btau
        pres, dres, relgap = bpres, bdres, brelgap

    x_raw = np.zeros(n_all)
    for p, i in enumerate(col_ids):
        x_raw[i] = x[p] * colscale[p] / tau
    pobj = float(c_all @ x_raw) + problem.objective_const
    info.update(
        {
            "pres": float(pres),
            "dres": float(dres),
            "relgap": float(relgap),
            "tau": float(tau),
            "kappa": float(kappa),
        }
    )
    if status == "infeasible":
        return SdpSolution(
            status="infeasible",
            x=x_raw,
            objective_value=np.nan,
            iterations=it,
            max_constraint_violation=np.nan,
            certificate=cert,
            info=info,
        )
    if status == "unbounded":
        return SdpSolution(
            status="unbounded",
            x=x_raw,
            objective_value=-np.inf,
            iterations=it,
            max_constraint_violation=np.nan,
            certificate=cert,
            info=info,
        )
    return SdpSolution(
        status=status,
        x=x_raw,
        objective_value=pobj,
        iterations=it,
        max_constraint_violation=np.nan,
        certificate=cert,
        info=info,
    )


def _raw_ray(problem, cons, groups, perm, zn, rowscale, margin):
    """Map a scaled dual ray back to raw space; return blocks and residual."""
    zmats = {}
    order = []
    for g in groups:
        for blk in g.blocks:
            order.append((g, blk))
    n_all = problem.n_scalars
    gz = np.zeros(n_all)
    hz = 0.0
    for (g, blk), k in zip(order, perm):
        seg = zn[blk.row0 : blk.row0 + g.svd]
        Z = smat(seg, g.dim, g.iu, g.wts) * rowscale[k]
        zmats[k] = Z
        con = cons[k]
        for i, C in sorted(con.coeffs.items()):
            gz[i] += float(np.sum(C.toarray() * Z))
        hz += -float(np.sum(problem.realized_constant(con, margin) * Z))
    res = float(np.max(np.abs(gz), initial=0.0))
    scale = max(1.0, abs(hz))
    return zmats, res / scale, hz
