"""Alternating low-rank solver for shifted linear systems in TT format.

Solves (A + mu I) v = b + mu v_prev one dimension at a time.  Each sweep
projects the full system onto the orthonormal frames around one TT block,
solves the small local system, and enriches the basis with a projection of
the current global residual so the iteration can escape a bad subspace.
The shift is never formed explicitly: the projected operator picks it up as
mu times the identity because the frames are orthonormal.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse.linalg

from .tt import (
    Accuracy,
    TTMatrix,
    TTTensor,
    orthogonalize_right,
    tt_matvec,
    tt_round,
    _svd,
    _chop,
)

__all__ = ["amen_solve_shifted", "reduce_system", "enrich", "residual_tt"]

log = logging.getLogger(__name__)

# largest local system solved by dense factorization; bigger ones go to GMRES
_DENSE_LIMIT = 2000


def _advance_op(L, vb, Ab, wb):
    """Push an operator interface through one block triple: (r,R,r') frames."""
    tmp = np.einsum("aAc,aib->bAic", L, vb, optimize=True)
    tmp = np.einsum("bAic,AijB->bBjc", tmp, Ab, optimize=True)
    return np.einsum("bBjc,cjd->bBd", tmp, wb, optimize=True)


def _advance_vec(L, vb, bb):
    """Push a vector interface (r, rho) through one block pair."""
    tmp = np.einsum("ap,aib->bip", L, vb, optimize=True)
    return np.einsum("bip,piq->bq", tmp, bb, optimize=True)


def _retreat_op(R, vb, Ab, wb):
    tmp = np.einsum("bBd,aib->aBid", R, vb, optimize=True)
    tmp = np.einsum("aBid,AijB->aAjd", tmp, Ab, optimize=True)
    return np.einsum("aAjd,cjd->aAc", tmp, wb, optimize=True)


def _retreat_vec(R, vb, bb):
    tmp = np.einsum("bq,aib->aiq", R, vb, optimize=True)
    return np.einsum("aiq,piq->ap", tmp, bb, optimize=True)


def _check_frame_orthogonality(v: TTTensor, k: int, tol: float = 1e-8) -> None:
    for j in range(k):
        r0, n, r1 = v.blocks[j].shape
        m = v.blocks[j].reshape(r0 * n, r1)
        if np.max(np.abs(m.T @ m - np.eye(r1))) > tol:
            raise ValueError(f"block {j} is not left-orthonormal")
    for j in range(k + 1, v.d):
        r0, n, r1 = v.blocks[j].shape
        m = v.blocks[j].reshape(r0, n * r1)
        if np.max(np.abs(m @ m.T - np.eye(r0))) > tol:
            raise ValueError(f"block {j} is not right-orthonormal")


def reduce_system(A: TTMatrix, b: TTTensor, v: TTTensor, k: int):
    """Dense local system (H, g) at position k for a frame-orthogonal v.

    v must be left-orthonormal up to k and right-orthonormal after k; the
    Galerkin projection is only valid in that gauge, so this is enforced.
    """
    if not 0 <= k < v.d:
        raise ValueError(f"position {k} out of range")
    _check_frame_orthogonality(v, k)
    LA = np.ones((1, 1, 1))
    Lb = np.ones((1, 1))
    for j in range(k):
        LA = _advance_op(LA, v.blocks[j], A.blocks[j], v.blocks[j])
        Lb = _advance_vec(Lb, v.blocks[j], b.blocks[j])
    RA = np.ones((1, 1, 1))
    Rb = np.ones((1, 1))
    for j in range(v.d - 1, k, -1):
        RA = _retreat_op(RA, v.blocks[j], A.blocks[j], v.blocks[j])
        Rb = _retreat_vec(Rb, v.blocks[j], b.blocks[j])
    H = _local_matrix(LA, A.blocks[k], RA)
    g = _local_rhs(Lb, b.blocks[k], Rb)
    return H, g


def _local_matrix(LA, Ab, RA):
    r0 = LA.shape[0]
    r1 = RA.shape[0]
    n = Ab.shape[1]
    H = np.einsum("aAc,AijB,bBd->aibcjd", LA, Ab, RA, optimize=True)
    return H.reshape(r0 * n * r1, r0 * n * r1)


def _local_rhs(Lb, bb, Rb):
    g = np.einsum("ap,piq,bq->aib", Lb, bb, Rb, optimize=True)
    return g.reshape(-1)


def _fit_combination(A: TTMatrix | None, v: TTTensor | None, terms,
                     rho: int, rng, sweeps: int = 2) -> TTTensor:
    """Rank-rho alternating fit of sum_i c_i t_i - A v.

    The product A v is never materialized: every local update only needs
    interface contractions of A and v against the orthonormal frames of the
    iterate, so the cost stays linear in d even when A v has huge ranks.
    """
    dims = terms[0][1].dims if terms else v.dims
    d = len(dims)
    ranks = [1] + [rho] * (d - 1) + [1]
    z = TTTensor.random(dims, ranks, rng)
    for _ in range(sweeps):
        z = orthogonalize_right(z, 1)
        RAv = [None] * (d + 1)
        Rts = [[None] * (d + 1) for _ in terms]
        RAv[d] = np.ones((1, 1, 1))
        for i in range(len(terms)):
            Rts[i][d] = np.ones((1, 1))
        for j in range(d - 1, 0, -1):
            if A is not None:
                RAv[j] = _retreat_op(RAv[j + 1], z.blocks[j], A.blocks[j],
                                     v.blocks[j])
            for i, (_, t) in enumerate(terms):
                Rts[i][j] = _retreat_vec(Rts[i][j + 1], z.blocks[j], t.blocks[j])
        LAv = np.ones((1, 1, 1))
        Lts = [np.ones((1, 1)) for _ in terms]
        blocks = list(z.blocks)
        for k in range(d):
            blk = None
            for i, (coef, t) in enumerate(terms):
                piece = coef * np.einsum("ap,piq,bq->aib", Lts[i], t.blocks[k],
                                         Rts[i][k + 1], optimize=True)
                blk = piece if blk is None else blk + piece
            if A is not None:
                piece = np.einsum("aAc,AijB,cjd,bBd->aib", LAv, A.blocks[k],
                                  v.blocks[k], RAv[k + 1], optimize=True)
                blk = -piece if blk is None else blk - piece
            if k == d - 1:
                blocks[k] = blk
                break
            r0, _, r1 = blk.shape
            q, _ = np.linalg.qr(blk.reshape(r0 * dims[k], r1))
            blocks[k] = q.reshape(r0, dims[k], q.shape[1])
            if A is not None:
                LAv = _advance_op(LAv, blocks[k], A.blocks[k], v.blocks[k])
            for i, (_, t) in enumerate(terms):
                Lts[i] = _advance_vec(Lts[i], blocks[k], t.blocks[k])
        z = TTTensor(blocks)
    return z


def residual_tt(A: TTMatrix, v: TTTensor, rhs: TTTensor, acc: Accuracy,
                rho_max: int = 4, rng=None) -> TTTensor:
    """Rank-capped approximation of rhs - A v, used only for basis enrichment.

    Small products are rounded exactly; otherwise an alternating fit avoids
    ever forming A v, whose ranks multiply.
    """
    if max(A.ranks) * max(v.ranks) <= 200:
        res = rhs - tt_matvec(A, v)
        return tt_round(res, Accuracy(delta=acc.delta, max_rank=rho_max))
    rng = np.random.default_rng(0) if rng is None else rng
    return _fit_combination(A, v, [(1.0, rhs)], rho_max, rng)


def enrich(v: TTTensor, k: int, z_block: np.ndarray, acc: Accuracy) -> TTTensor:
    """Append extra basis columns to block k, keeping the tensor unchanged.

    The augmented block is re-orthonormalized by QR and the transform is
    absorbed into block k+1, whose new rows are zero-padded so the
    represented tensor is identical.
    """
    if k >= v.d - 1:
        raise ValueError("cannot enrich the last block")
    blocks = list(v.blocks)
    r0, n, r1 = blocks[k].shape
    z = np.asarray(z_block, dtype=float).reshape(r0, n, -1)
    rho = z.shape[2]
    if acc.max_rank is not None:
        rho = min(rho, max(acc.max_rank - r1, 0))
        z = z[:, :, :rho]
    if rho == 0:
        return v
    aug = np.concatenate([blocks[k], z], axis=2).reshape(r0 * n, r1 + rho)
    q, rm = np.linalg.qr(aug)
    blocks[k] = q.reshape(r0, n, q.shape[1])
    nxt = np.concatenate(
        [blocks[k + 1], np.zeros((rho, blocks[k + 1].shape[1], blocks[k + 1].shape[2]))],
        axis=0,
    )
    blocks[k + 1] = np.tensordot(rm, nxt, axes=(1, 0))
    return TTTensor(blocks)


def _solve_local(H_parts, g, shift, x0, delta):
    """Solve (H + shift I) x = g; dense below _DENSE_LIMIT, else GMRES."""
    LA, Ab, RA = H_parts
    size = g.size
    if size <= _DENSE_LIMIT:
        H = _local_matrix(LA, Ab, RA)
        H[np.diag_indices_from(H)] += shift
        try:
            return np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, g, rcond=None)[0]
    r0, n, r1 = LA.shape[0], Ab.shape[1], RA.shape[0]

    def matvec(x):
        xc = x.reshape(r0, n, r1)
        y = np.einsum("aAc,AijB,bBd,cjd->aib", LA, Ab, RA, xc, optimize=True)
        return y.reshape(-1) + shift * x

    op = scipy.sparse.linalg.LinearOperator((size, size), matvec=matvec)
    tol = min(1e-8, 1e-2 * delta)
    x, info = scipy.sparse.linalg.gmres(op, g, x0=x0.reshape(-1), rtol=tol,
                                        atol=0.0, restart=60, maxiter=300)
    if info > 0:
        log.warning("local GMRES stopped at maxiter (size %d)", size)
    return x


def amen_solve_shifted(
    A: TTMatrix,
    b: TTTensor,
    v_prev: TTTensor,
    shift: float,
    acc: Accuracy,
    sweeps: int = 1,
    rho: int = 4,
    v0: TTTensor | None = None,
) -> TTTensor:
    """Sweeps of alternating solves for (A + shift I) v = b + shift v_prev.

    v_prev seeds the iteration unless an explicit v0 is given.  Each sweep
    runs left to right: local solve, SVD truncation to acc, residual-based
    enrichment (rank at most rho), then an interface update.
    """
    if shift < 0:
        raise ValueError("shift must be nonnegative")
    v = v0 if v0 is not None else v_prev
    d = v.d
    if d == 1:
        H, g = reduce_system(A, b, v, 0)
        H[np.diag_indices_from(H)] += shift
        g = g + shift * v_prev.blocks[0].reshape(-1)
        return TTTensor([np.linalg.solve(H, g).reshape(1, -1, 1)])
    rng = np.random.default_rng(1)
    for sweep in range(sweeps):
        v = orthogonalize_right(v, 1)
        # residual of the shifted system without forming (A + shift I) v
        res = _fit_combination(
            A, v, [(1.0, b), (shift, v_prev), (-shift, v)], rho, rng
        )
        # right interfaces of A, b, v_prev and the residual against v's frames
        RA = [None] * (d + 1)
        Rb = [None] * (d + 1)
        Rp = [None] * (d + 1)
        RA[d] = np.ones((1, 1, 1))
        Rb[d] = np.ones((1, 1))
        Rp[d] = np.ones((1, 1))
        for j in range(d - 1, 0, -1):
            RA[j] = _retreat_op(RA[j + 1], v.blocks[j], A.blocks[j], v.blocks[j])
            Rb[j] = _retreat_vec(Rb[j + 1], v.blocks[j], b.blocks[j])
            Rp[j] = _retreat_vec(Rp[j + 1], v.blocks[j], v_prev.blocks[j])
        LA = np.ones((1, 1, 1))
        Lb = np.ones((1, 1))
        Lp = np.ones((1, 1))
        Lz = np.ones((1, 1))
        blocks = list(v.blocks)
        max_local_res = 0.0
        for k in range(d):
            g = _local_rhs(Lb, b.blocks[k], Rb[k + 1])
            g = g + shift * _local_rhs(Lp, v_prev.blocks[k], Rp[k + 1])
            x = _solve_local((LA, A.blocks[k], RA[k + 1]), g, shift,
                             blocks[k], acc.delta)
            r0, n, r1 = blocks[k].shape
            if g.size <= _DENSE_LIMIT:
                H = _local_matrix(LA, A.blocks[k], RA[k + 1])
                max_local_res = max(
                    max_local_res,
                    float(np.linalg.norm(H @ x + shift * x - g)),
                )
            if k == d - 1:
                blocks[k] = x.reshape(r0, n, r1)
                break
            u, s, vt = _svd(x.reshape(r0 * n, r1))
            keep = _chop(s, acc.delta * np.linalg.norm(s) / np.sqrt(d - 1),
                         acc.max_rank)
            u = u[:, :keep]
            carry = s[:keep, None] * vt[:keep]
            # enrichment: project the global residual onto the left frame
            zb = np.einsum("as,sip->aip", Lz, res.blocks[k], optimize=True)
            aug = np.concatenate([u, zb.reshape(r0 * n, -1)], axis=1)
            rho_k = aug.shape[1] - keep
            q, rm = np.linalg.qr(aug)
            blocks[k] = q.reshape(r0, n, q.shape[1])
            carry = rm @ np.vstack([carry, np.zeros((rho_k, r1))])
            blocks[k + 1] = np.tensordot(carry, blocks[k + 1], axes=(1, 0))
            LA = _advance_op(LA, blocks[k], A.blocks[k], blocks[k])
            Lb = _advance_vec(Lb, blocks[k], b.blocks[k])
            Lp = _advance_vec(Lp, blocks[k], v_prev.blocks[k])
            Lz = _advance_vec(Lz, blocks[k], res.blocks[k])
        v = TTTensor(blocks)
        log.debug(
            "amen sweep %d: shift=%.3g max_rank=%d max_local_res=%.3g",
            sweep, shift, v.max_rank, max_local_res,
        )
    return v
