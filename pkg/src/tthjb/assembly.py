"""Galerkin assembly of the policy-linearized value equation in TT format.

For a fixed feedback u the value function solves A(u) v = b(u) with

    A(u)[i, j] = -< (f(x) + g(x) u(x)) . grad phi_j, phi_i >
    b(u)[i]    =  < l(x) + W(u(x)), phi_i >

over the tensor-product Legendre basis; W is the control penalty (gamma u^2
in the unconstrained case).  With the minus sign the operator of a stable
closed loop has spectrum in the right half plane, so positive shifts
regularize rather than destabilize the linear solves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import SpectralBasis
from .cross import CrossResult, GridFunction, tt_cross
from .tt import Accuracy, TTMatrix, TTTensor, tt_hadamard, tt_round, tt_scale

__all__ = [
    "ControlPenalty",
    "ControlChannel",
    "GalerkinSystem",
    "project_to_basis",
    "assemble_drift_part",
    "assemble_drift",
    "control_map",
    "apply_constraint",
    "penalty_cost",
    "tt_matmat",
    "diag_matrix",
]

# above this rank the entrywise square of u goes through cross approximation
# instead of an exact Hadamard product whose ranks would be squared
_HADAMARD_RANK_LIMIT = 12


@dataclass(frozen=True)
class ControlPenalty:
    """Running-cost penalty on the control.

    kind "unconstrained" charges gamma u^2.  kind "tanh" charges the convex
    penalty whose pointwise minimizer is u_max tanh(w / u_max), which keeps
    the feedback strictly inside [-u_max, u_max]; the realized controls are
    soft-clipped at (1 - margin) u_max so the penalty stays finite.
    """

    gamma: float
    kind: str = "unconstrained"
    u_max: float | None = None
    margin: float = 0.01

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.kind not in ("unconstrained", "tanh"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "tanh" and (self.u_max is None or self.u_max <= 0):
            raise ValueError("tanh penalty needs a positive u_max")

    @property
    def clip(self) -> float | None:
        if self.kind == "unconstrained":
            return None
        return (1.0 - self.margin) * self.u_max


def penalty_cost(u, penalty: ControlPenalty):
    """Pointwise running-cost contribution W(u) of the control."""
    u = np.asarray(u, dtype=float)
    if penalty.kind == "unconstrained":
        return penalty.gamma * u * u
    um = penalty.u_max
    z = np.clip(u / um, -1.0 + 1e-12, 1.0 - 1e-12)
    return 2.0 * penalty.gamma * (
        um * u * np.arctanh(z) + 0.5 * um * um * np.log1p(-z * z)
    )


@dataclass(frozen=True)
class ControlChannel:
    """Control direction g(x) for a scalar control.

    Either a constant vector (one coefficient per state dimension) or a list
    of grid TT tensors g_p, one per dimension, with None for identically
    zero components.
    """

    constant: np.ndarray | None = None
    g_tts: tuple | None = None

    def __post_init__(self):
        if (self.constant is None) == (self.g_tts is None):
            raise ValueError("exactly one of constant / g_tts must be given")


def project_to_basis(t: TTTensor, basis: SpectralBasis) -> TTTensor:
    """Quadrature projection of grid values onto basis coefficients."""
    wphi = basis.weights[:, None] * basis.phi
    return TTTensor([np.einsum("aqb,qi->aib", blk, wphi) for blk in t.blocks])


def _weighted_block(blk, basis: SpectralBasis, deriv: bool):
    right = basis.dphi if deriv else basis.phi
    wphi = basis.weights[:, None] * basis.phi
    return np.einsum("aqb,qi,qj->aijb", blk, wphi, right, optimize=True)


def assemble_drift_part(f_tt: TTTensor, p: int, basis: SpectralBasis) -> TTMatrix:
    """TT operator -< f_p d/dx_p phi_j, phi_i > for one drift component."""
    blocks = [
        _weighted_block(blk, basis, deriv=(k == p))
        for k, blk in enumerate(f_tt.blocks)
    ]
    blocks[0] = -blocks[0]
    return TTMatrix(blocks)


def assemble_drift(f_tts, basis: SpectralBasis, acc: Accuracy) -> TTMatrix:
    """Sum of all drift components with intermediate rounding."""
    total = None
    for p, f_tt in enumerate(f_tts):
        if f_tt is None:
            continue
        part = assemble_drift_part(f_tt, p, basis)
        total = part if total is None else (total + part).round(acc)
    if total is None:
        raise ValueError("drift has no nonzero components")
    return total


def _coupling_constant(u_tt: TTTensor, g: np.ndarray, basis: SpectralBasis) -> TTMatrix:
    """-< g u grad ., . > for a constant direction g; ranks only double.

    The chain carries a single flag for whether the derivative factor has
    been spent, giving blocks [[G, g_k H], [0, G]] instead of a d-term sum.
    """
    d = u_tt.d
    blocks = []
    for k, blk in enumerate(u_tt.blocks):
        G = _weighted_block(blk, basis, deriv=False)
        H = g[k] * _weighted_block(blk, basis, deriv=True)
        r0, n, _, r1 = G.shape
        if d == 1:
            blocks.append(H)
            continue
        if k == 0:
            blocks.append(np.concatenate([G, H], axis=3))
        elif k == d - 1:
            blocks.append(np.concatenate([H, G], axis=0))
        else:
            blk4 = np.zeros((2 * r0, n, n, 2 * r1))
            blk4[:r0, :, :, :r1] = G
            blk4[:r0, :, :, r1:] = H
            blk4[r0:, :, :, r1:] = G
            blocks.append(blk4)
    blocks[0] = -blocks[0]
    return TTMatrix(blocks)


def _coupling_generic(u_tt: TTTensor, channel: ControlChannel,
                      basis: SpectralBasis, acc: Accuracy) -> TTMatrix:
    total = None
    for p, g_tt in enumerate(channel.g_tts):
        if g_tt is None:
            continue
        gu = tt_round(tt_hadamard(g_tt, u_tt), acc)
        part = assemble_drift_part(gu, p, basis)
        total = part if total is None else (total + part).round(acc)
    if total is None:
        raise ValueError("control channel has no nonzero components")
    return total


def assemble_coupling(u_tt: TTTensor, channel: ControlChannel,
                      basis: SpectralBasis, acc: Accuracy) -> TTMatrix:
    if channel.constant is not None:
        return _coupling_constant(u_tt, channel.constant, basis)
    return _coupling_generic(u_tt, channel, basis, acc)


def tt_matmat(A: TTMatrix, B: TTMatrix) -> TTMatrix:
    """Exact operator product; ranks multiply."""
    if A.col_dims != B.row_dims:
        raise ValueError("dimension mismatch in operator product")
    blocks = []
    for ab, bb in zip(A.blocks, B.blocks):
        R0, n, _, R1 = ab.shape
        S0, _, q, S1 = bb.shape
        blk = np.einsum("aijb,cjkd->acikbd", ab, bb, optimize=True)
        blocks.append(blk.reshape(R0 * S0, n, q, R1 * S1))
    return TTMatrix(blocks)


def diag_matrix(t: TTTensor) -> TTMatrix:
    """Diagonal operator with the entries of t."""
    blocks = []
    for blk in t.blocks:
        r0, n, r1 = blk.shape
        out = np.zeros((r0, n, n, r1))
        out[:, np.arange(n), np.arange(n), :] = blk
        blocks.append(out)
    return TTMatrix(blocks)


def _evaluation_matrix(basis: SpectralBasis, d: int, p: int) -> TTMatrix:
    """Coefficients -> nodal values of d/dx_p of the expansion."""
    blocks = []
    for k in range(d):
        tab = basis.dphi if k == p else basis.phi
        blocks.append(tab.reshape(1, basis.m, basis.n, 1))
    return TTMatrix(blocks)


def control_map(channel: ControlChannel, basis: SpectralBasis, gamma: float,
                d: int, acc: Accuracy) -> TTMatrix:
    """Operator taking value coefficients to nodal values of the minimizing
    control, u(x) = -(1 / 2 gamma) g(x) . grad V(x)."""
    if channel.constant is not None:
        g = channel.constant
        blocks = []
        for k in range(d):
            P = basis.phi.reshape(1, basis.m, basis.n, 1)
            D = g[k] * basis.dphi.reshape(1, basis.m, basis.n, 1)
            if d == 1:
                blocks.append(D)
                continue
            if k == 0:
                blocks.append(np.concatenate([P, D], axis=3))
            elif k == d - 1:
                blocks.append(np.concatenate([D, P], axis=0))
            else:
                blk = np.zeros((2, basis.m, basis.n, 2))
                blk[0, :, :, 0] = basis.phi
                blk[0, :, :, 1] = g[k] * basis.dphi
                blk[1, :, :, 1] = basis.phi
                blocks.append(blk)
        bmap = TTMatrix(blocks)
    else:
        bmap = None
        for p, g_tt in enumerate(channel.g_tts):
            if g_tt is None:
                continue
            part = tt_matmat(diag_matrix(g_tt), _evaluation_matrix(basis, d, p))
            bmap = part if bmap is None else (bmap + part).round(acc)
    return (-0.5 / gamma) * bmap


def _square_via_cross(u_tt: TTTensor, scale: float, acc: Accuracy,
                      grid, initial=None, seed=0) -> CrossResult:
    def evaluator(indices):
        vals = u_tt.eval(indices)
        return scale * vals * vals

    gf = GridFunction(evaluator=evaluator, grid=list(grid))
    return tt_cross(gf, acc, initial=initial, seed=seed,
                    initial_rank=min(u_tt.max_rank + 2, 10))


def apply_constraint(u_tt: TTTensor, penalty: ControlPenalty, acc: Accuracy,
                     grid, initial=None, seed=0) -> CrossResult | None:
    """Soft-clip the feedback through the saturating reparametrization."""
    if penalty.kind == "unconstrained":
        return None
    cap = penalty.clip

    def evaluator(indices):
        return cap * np.tanh(u_tt.eval(indices) / cap)

    gf = GridFunction(evaluator=evaluator, grid=list(grid))
    return tt_cross(gf, acc, initial=initial, seed=seed,
                    initial_rank=min(u_tt.max_rank + 2, 10))


@dataclass
class GalerkinSystem:
    """Precomputed pieces of the policy-linearized equation for one model."""

    basis: SpectralBasis
    d: int
    drift: TTMatrix
    channel: ControlChannel
    bmap: TTMatrix
    ell_proj: TTTensor
    penalty: ControlPenalty
    acc: Accuracy
    seed: int = 0

    @property
    def grid(self) -> list:
        return [self.basis.nodes] * self.d

    def feedback(self, v: TTTensor) -> TTTensor:
        """Nodal values of the unconstrained minimizing control."""
        from .tt import tt_matvec

        return tt_round(tt_matvec(self.bmap, v), self.acc)

    def operator(self, u_tt: TTTensor | None) -> TTMatrix:
        if u_tt is None:
            return self.drift
        coupling = assemble_coupling(u_tt, self.channel, self.basis, self.acc)
        return (self.drift + coupling).round(self.acc)

    def rhs(self, u_tt: TTTensor | None, cross_state=None):
        """(b, new cross state); the u-dependent part may go through cross."""
        if u_tt is None:
            return self.ell_proj, None
        state = None
        if self.penalty.kind == "unconstrained" and u_tt.max_rank <= _HADAMARD_RANK_LIMIT:
            pen = tt_scale(tt_round(tt_hadamard(u_tt, u_tt), self.acc),
                           self.penalty.gamma)
        else:
            def evaluator(indices):
                return penalty_cost(u_tt.eval(indices), self.penalty)

            gf = GridFunction(evaluator=evaluator, grid=self.grid)
            res = tt_cross(gf, self.acc, initial=cross_state, seed=self.seed,
                           initial_rank=min(u_tt.max_rank + 2, 10))
            pen = res.tensor
            state = res.index_sets
        b = tt_round(self.ell_proj + project_to_basis(pen, self.basis), self.acc)
        return b, state
