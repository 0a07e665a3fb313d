"""Plant/controller interconnection and the network stability pencil.

Agents exchange signals through a static interconnection: agent inputs are
u = H_p y + Ht_p yc, controller inputs are uc = K y, where y stacks agent
outputs and yc the static controller outputs. Collecting both gives

    [u; uc] = H [y; yc],    H = [[H_p, Ht_p], [K, 0]].

If every agent and every controller channel is QSR-dissipative, the loop is
L2 stable whenever Q + He(S H) + H'RH < 0 for the block-diagonal stacked
rates. That matrix is the single object the whole synthesis pipeline bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockmat import BlockMatrix, BlockPartition, blkdiag, max_eigenvalue
from .dissipativity import DEFAULT_MARGIN, QsrTriple
from .sdp.expr import AffineMatrix, blkdiag_expr, he_expr


@dataclass(frozen=True)
class NetworkTopology:
    """Static coupling description for N agents.

    H_p routes agent outputs to agent inputs and must have zero diagonal
    blocks (an agent's self-coupling belongs in its own dynamics, not in the
    interconnection). Ht_p routes controller outputs to agent inputs; its
    column sizes define the controller channel widths.
    """

    state_dims: tuple
    input_dims: tuple
    H_p: BlockMatrix
    Ht_p: BlockMatrix

    def __post_init__(self):
        object.__setattr__(self, "state_dims", tuple(int(n) for n in self.state_dims))
        object.__setattr__(self, "input_dims", tuple(int(m) for m in self.input_dims))
        if len(self.state_dims) != len(self.input_dims):
            raise ValueError("state_dims and input_dims must have equal length")
        if self.H_p.partition.row_sizes != self.input_dims:
            raise ValueError("H_p row blocks must match agent input dims")
        if self.H_p.partition.col_sizes != self.state_dims:
            raise ValueError("H_p column blocks must match agent output dims")
        if self.Ht_p.partition.row_sizes != self.input_dims:
            raise ValueError("Ht_p row blocks must match agent input dims")
        for i in range(self.N):
            if np.any(self.H_p.block(i, i) != 0.0):
                raise ValueError(f"H_p diagonal block {i} must be zero")

    @property
    def N(self) -> int:
        return len(self.state_dims)

    @property
    def ctrl_dims(self) -> tuple:
        return self.Ht_p.partition.col_sizes

    @property
    def n_total(self) -> int:
        return sum(self.state_dims)

    @property
    def m_total(self) -> int:
        return sum(self.input_dims)


def gain_matrix(K, topology: NetworkTopology) -> BlockMatrix:
    """Wrap a raw gain array in the controller-rows-by-agent-columns partition."""
    if isinstance(K, BlockMatrix):
        return K
    part = BlockPartition(topology.ctrl_dims, topology.state_dims)
    return BlockMatrix(np.asarray(K, dtype=float), part)


def assemble_H(topology: NetworkTopology, K) -> BlockMatrix:
    """Combined interconnection H = [[H_p, Ht_p], [K, 0]].

    Returned with the coarse 2x2 partition so the four constituents can be
    read back exactly via .block().
    """
    K = gain_matrix(K, topology)
    if K.partition.col_sizes != topology.state_dims:
        raise ValueError("K column blocks must match agent output dims")
    if K.partition.row_sizes != topology.ctrl_dims:
        raise ValueError("K row blocks must match controller channel dims")
    mc = sum(topology.ctrl_dims)
    top = np.hstack([topology.H_p.data, topology.Ht_p.data])
    bot = np.hstack([K.data, np.zeros((mc, mc))])
    part = BlockPartition(
        (topology.m_total, mc), (topology.n_total, mc)
    )
    return BlockMatrix(np.vstack([top, bot]), part)


def combined_qsr(agent_rates, ctrl_rates) -> QsrTriple:
    """Network supply rate: block-diagonal stack, agents then controllers.

    Entries may be numeric or affine expressions; the result follows suit.
    """
    rates = list(agent_rates) + list(ctrl_rates)
    if not rates:
        raise ValueError("need at least one rate")
    qs = [r.Q for r in rates]
    ss = [r.S for r in rates]
    rs = [r.R for r in rates]
    if any(isinstance(x, AffineMatrix) for x in qs + ss + rs):
        return QsrTriple(Q=blkdiag_expr(qs), S=blkdiag_expr(ss), R=blkdiag_expr(rs))
    return QsrTriple(Q=blkdiag(qs), S=blkdiag(ss), R=blkdiag(rs))


def _as_array(H) -> np.ndarray:
    if isinstance(H, BlockMatrix):
        return H.data
    return np.asarray(H, dtype=float)


def vndt_qhat(qsr: QsrTriple, H):
    """Closed-network supply-rate matrix Q + He(S H) + H'RH.

    Affine in (Q, S, R) for fixed H, so expression-valued rates pass through
    and numeric rates give a plain symmetric matrix.
    """
    H = _as_array(H)
    Q, S, R = qsr.Q, qsr.S, qsr.R
    if any(isinstance(x, AffineMatrix) for x in (Q, S, R)):
        return Q + he_expr(S @ H) + H.T @ (R @ H)
    Q = np.asarray(Q, dtype=float)
    S = np.asarray(S, dtype=float)
    R = np.asarray(R, dtype=float)
    SH = S @ H
    # half-sum and grouping keep the result bitwise symmetric despite
    # floating-point product and addition order
    T = H.T @ (R @ H)
    return Q + (SH + SH.T) + 0.5 * (T + T.T)


def network_stability_cert(qsr: QsrTriple, H, margin: float = DEFAULT_MARGIN) -> bool:
    """True when the closed network is certified L2 stable with margin."""
    return max_eigenvalue(vndt_qhat(qsr, H)) < -margin
