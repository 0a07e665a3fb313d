"""Optional external backend for cross-checking the built-in solver.

Translates the block-LMI problem into the cone-LP form expected by
cvxopt.solvers.conelp (full column-major vectorization of each PSD block,
no sqrt(2) weighting). Import of cvxopt is deferred so the package works
without it; only selecting backend="cvxopt" requires the dependency.
"""

from __future__ import annotations

import numpy as np

from .model import SdpProblem, SdpSolution, SolverConfig


def solve_cvxopt(problem: SdpProblem, config: SolverConfig) -> SdpSolution:
    from cvxopt import matrix, solvers, spmatrix

    cons = problem.constraints
    n_all = problem.n_scalars
    c_all = np.zeros(n_all)
    for i, v in problem.objective.items():
        c_all[int(i)] = float(v)

    if not cons:
        if np.any(c_all != 0.0):
            return SdpSolution(
                status="unbounded",
                x=np.zeros(n_all),
                objective_value=-np.inf,
                iterations=0,
                max_constraint_violation=0.0,
            )
        return SdpSolution(
            status="optimal",
            x=np.zeros(n_all),
            objective_value=problem.objective_const,
            iterations=0,
            max_constraint_violation=-np.inf,
        )

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
                certificate={"kind": "dual_infeasible", "ray": ray},
            )
    col_ids = sorted(used)
    col_of = {i: p for p, i in enumerate(col_ids)}
    n = len(col_ids)
    if n == 0:
        # constants only; defer to the native handling
        from .ipm import solve_ipm

        return solve_ipm(problem, config)

    rows_i, rows_j, vals = [], [], []
    h_parts = []
    off = 0
    dims = []
    for con in cons:
        d = con.dim
        F0 = problem.realized_constant(con, config.margin)
        h_parts.append(-F0.reshape(-1, order="F"))
        for i, C in sorted(con.coeffs.items()):
            Cc = C.tocoo()
            # column-major position within the block
            pos = off + Cc.col * d + Cc.row
            rows_i.extend(pos.tolist())
            rows_j.extend([col_of[i]] * Cc.nnz)
            vals.extend(Cc.data.tolist())
        dims.append(d)
        off += d * d
    h = matrix(np.concatenate(h_parts))
    Gc = spmatrix(vals, rows_i, rows_j, size=(off, n))
    c = matrix(np.array([c_all[i] for i in col_ids]))

    opts = {
        "show_progress": False,
        "maxiters": int(config.max_iter),
        "abstol": config.gap_tol,
        "reltol": config.gap_tol,
        "feastol": config.feas_tol,
    }
    saved = dict(solvers.options)
    solvers.options.update(opts)
    try:
        sol = solvers.conelp(c, Gc, h, dims={"l": 0, "q": [], "s": dims})
    finally:
        solvers.options.clear()
        solvers.options.update(saved)

    x_full = np.zeros(n_all)
    status_map = {
        "optimal": "optimal",
        "primal infeasible": "infeasible",
        "dual infeasible": "unbounded",
        "unknown": "max_iterations",
    }
    status = status_map.get(sol["status"], "numerical_failure")
    if sol["x"] is not None:
        xv = np.array(sol["x"]).ravel()
        for p, i in enumerate(col_ids):
            x_full[i] = xv[p]
    obj = float(c_all @ x_full) + problem.objective_const
    if status == "infeasible":
        obj = np.nan
    if status == "unbounded":
        obj = -np.inf
    return SdpSolution(
        status=status,
        x=x_full,
        objective_value=obj,
        iterations=int(sol.get("iterations", 0)),
        max_constraint_violation=np.nan,
        info={"backend": "cvxopt", "raw_status": sol["status"]},
    )
