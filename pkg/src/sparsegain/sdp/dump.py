"""Plain-text serialization of a block-LMI problem.

The format is line-oriented and self-describing so the file can be consumed
by an external tool (or a human) without this package:

    sdp-dump 1
    scalars <n>
    objective_const <float>
    margin <float>
    obj <scalar_index> <float>
    var <name> <kind> <rows> <cols> <offset> <size>
    block <idx> dim <d> sense <nsd|strict> name <quoted>
    F <v> <i> <j> <float>
    end

Within a block, ``F 0 i j val`` gives an upper-triangle entry of the constant
term and ``F v i j val`` with v >= 1 the corresponding entry of the
coefficient matrix of scalar v-1. Both triangles are implied. Floats are
written with repr, which round-trips exactly in binary64.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .model import LmiConstraint, SdpProblem


def dump_problem(problem: SdpProblem, path, margin: float = 0.0):
    """Write the problem (quadratic terms must be lowered already)."""
    if problem.quad_terms:
        raise ValueError("lower quadratic terms before dumping")
    lines = []
    lines.append("# block-LMI SDP: minimize c'x subject to, per block,")
    lines.append("#   F0 + sum_i x_i * Fi <= 0  (negative semidefinite)")
    lines.append("# 'F v i j val': v=0 is F0, v>=1 is the coefficient of")
    lines.append("# scalar v-1; (i, j) upper triangle, mirror implied.")
    lines.append("sdp-dump 1")
    lines.append(f"scalars {problem.n_scalars}")
    lines.append(f"objective_const {float(problem.objective_const)!r}")
    lines.append(f"margin {float(margin)!r}")
    for i in sorted(problem.objective):
        v = problem.objective[i]
        if v != 0.0:
            lines.append(f"obj {i} {float(v)!r}")
    for h in problem.vars:
        lines.append(
            f"var {h.name or '_'} {h.kind} {h.n} {h.m} {h.offset} {h.size}"
        )
    for k, con in enumerate(problem.constraints):
        nm = (con.name or "").replace("\n", " ")
        lines.append(f"block {k} dim {con.dim} sense {con.sense} name {nm!r}")
        C0 = con.constant
        for i in range(con.dim):
            for j in range(i, con.dim):
                if C0[i, j] != 0.0:
                    lines.append(f"F 0 {i} {j} {float(C0[i, j])!r}")
        for v in sorted(con.coeffs):
            Cc = con.coeffs[v].tocoo()
            for a, b, val in sorted(zip(Cc.row, Cc.col, Cc.data)):
                if a <= b and val != 0.0:
                    lines.append(f"F {v + 1} {int(a)} {int(b)} {float(val)!r}")
        lines.append("end")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as f:
        f.write(text)


def load_problem(path):
    """Parse a dump back into an SdpProblem (scalar variables only).

    Variable block metadata is restored as names on plain scalars; the
    constraint data round-trips exactly.
    """
    problem = SdpProblem()
    margin = 0.0
    n_scalars = None
    cur = None  # (dim, sense, name, triplets dict)

    def _flush():
        nonlocal cur
        if cur is None:
            return
        dim, sense, name, ent = cur
        const = np.zeros((dim, dim))
        coeffs = {}
        for (v, i, j), val in ent.items():
            if v == 0:
                const[i, j] = val
                const[j, i] = val
            else:
                coeffs.setdefault(v - 1, []).append((i, j, val))
        cdict = {}
        for idx, trip in coeffs.items():
            rows, cols, vals = [], [], []
            for i, j, val in trip:
                rows.append(i)
                cols.append(j)
                vals.append(val)
                if i != j:
                    rows.append(j)
                    cols.append(i)
                    vals.append(val)
            cdict[idx] = sp.csr_matrix(
                (vals, (rows, cols)), shape=(dim, dim)
            )
        problem.constraints.append(
            LmiConstraint(
                dim=dim, constant=const, coeffs=cdict, sense=sense, name=name
            )
        )
        cur = None

    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "sdp-dump":
                if parts[1] != "1":
                    raise ValueError(f"unsupported dump version {parts[1]}")
            elif tag == "scalars":
                n_scalars = int(parts[1])
            elif tag == "objective_const":
                problem.objective_const = float(parts[1])
            elif tag == "margin":
                margin = float(parts[1])
            elif tag == "obj":
                problem.objective[int(parts[1])] = float(parts[2])
            elif tag == "var":
                pass  # metadata only; variables materialize as scalars below
            elif tag == "block":
                _flush()
                dim = int(parts[3])
                sense = parts[5]
                name = line.split("name", 1)[1].strip()
                if name.startswith("'") or name.startswith('"'):
                    name = name[1:-1]
                cur = (dim, sense, name, {})
            elif tag == "F":
                v, i, j = int(parts[1]), int(parts[2]), int(parts[3])
                cur[3][(v, i, j)] = float(parts[4])
            elif tag == "end":
                _flush()
            else:
                raise ValueError(f"unrecognized dump line: {line}")
    _flush()
    if n_scalars is None:
        raise ValueError("missing 'scalars' header")
    for _ in range(n_scalars):
        problem.add_scalar()
    return problem, margin
