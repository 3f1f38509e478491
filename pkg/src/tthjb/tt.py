"""Tensor-train tensors and operators.

A d-way tensor is stored as a chain of 3-way blocks, block k shaped
``(r_{k-1}, n_k, r_k)`` with boundary ranks ``r_0 = r_d = 1``.  Operators use
4-way blocks ``(R_{k-1}, n_k, n'_k, R_k)`` with paired row/column indices.
All values are immutable by convention: every operation returns new block
lists, so tensors can be shared freely across threads.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Accuracy",
    "TTTensor",
    "TTMatrix",
    "tt_from_dense",
    "tt_to_dense",
    "tt_round",
    "tt_add",
    "tt_scale",
    "tt_matvec",
    "tt_dot",
    "tt_norm",
    "tt_hadamard",
    "orthogonalize_left",
    "orthogonalize_right",
    "quadratic_to_tt",
    "linear_to_tt",
    "save_tt",
    "load_tt",
]

_MAGIC = b"TTHJB1"
# materialization guard for to_dense / from_dense
_MAX_DENSE_SIZE = 1 << 26


@dataclass(frozen=True)
class Accuracy:
    """Relative truncation/stopping threshold plus an optional hard rank cap."""

    delta: float = 1e-12
    max_rank: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.delta < 1.0):
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")


def _chop(s: np.ndarray, budget: float, max_rank: int | None) -> int:
    """Smallest kept rank whose discarded singular-value tail is <= budget."""
    if s.size == 0:
        return 1
    tail = np.sqrt(np.cumsum(s[::-1] ** 2))
    discard = int(np.searchsorted(tail, budget, side="right"))
    keep = max(1, s.size - discard)
    if max_rank is not None:
        keep = min(keep, max_rank)
    return keep


def _svd(mat: np.ndarray):
    """SVD with a transposed-unfolding retry; failure here must not pass silently."""
    try:
        return np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            u, s, vt = np.linalg.svd(mat.T, full_matrices=False)
            return vt.T, s, u.T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"SVD failed on block unfolding of shape {mat.shape}"
            ) from exc


class TTTensor:
    """d-dimensional tensor in TT format."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
        if not blocks:
            raise ValueError("TTTensor needs at least one block")
        for k, b in enumerate(blocks):
            if b.ndim != 3:
                raise ValueError(f"block {k} must be 3-way, got shape {b.shape}")
            if b.shape[1] < 1:
                raise ValueError(f"block {k} has empty mode")
            if k + 1 < len(blocks) and b.shape[2] != blocks[k + 1].shape[0]:
                raise ValueError(
                    f"rank mismatch between blocks {k} and {k + 1}: "
                    f"{b.shape[2]} != {blocks[k + 1].shape[0]}"
                )
        if blocks[0].shape[0] != 1 or blocks[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        object.__setattr__(self, "blocks", blocks)

    def __setattr__(self, name, value):
        raise AttributeError("TTTensor is immutable")

    @property
    def d(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(b.shape[2] for b in self.blocks)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    @classmethod
    def zeros(cls, dims) -> "TTTensor":
        # all-rank-1 zero blocks, not empty blocks: arithmetic needs no special case
        return cls([np.zeros((1, n, 1)) for n in dims])

    @classmethod
    def rank_one(cls, factors) -> "TTTensor":
        return cls([np.asarray(f, dtype=float).reshape(1, -1, 1) for f in factors])

    @classmethod
    def random(cls, dims, ranks, rng=None) -> "TTTensor":
        rng = np.random.default_rng(rng)
        ranks = list(ranks)
        if len(ranks) != len(dims) + 1 or ranks[0] != 1 or ranks[-1] != 1:
            raise ValueError("ranks must have length d+1 with unit boundaries")
        return cls(
            [
                rng.standard_normal((ranks[k], n, ranks[k + 1]))
                for k, n in enumerate(dims)
            ]
        )

    def to_dense(self) -> np.ndarray:
        return tt_to_dense(self)

    def eval(self, indices: np.ndarray) -> np.ndarray:
        """Entries at a batch of multi-indices, shape (N, d) -> (N,)."""
        indices = np.atleast_2d(np.asarray(indices, dtype=int))
        if indices.shape[1] != self.d:
            raise ValueError("index batch has wrong dimensionality")
        cur = np.ones((indices.shape[0], 1, 1))
        for k, b in enumerate(self.blocks):
            cur = cur @ b[:, indices[:, k], :].transpose(1, 0, 2)
        return cur[:, 0, 0]

    def round(self, acc: Accuracy) -> "TTTensor":
        return tt_round(self, acc)

    def norm(self) -> float:
        return tt_norm(self)

    def dot(self, other: "TTTensor") -> float:
        return tt_dot(self, other)

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_add(self, tt_scale(other, -1.0))

    def __mul__(self, c):
        return tt_scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"TTTensor(dims={self.dims}, ranks={self.ranks})"


class TTMatrix:
    """Operator in matrix-TT format with paired row/column indices."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
        if not blocks:
            raise ValueError("TTMatrix needs at least one block")
        for k, b in enumerate(blocks):
            if b.ndim != 4:
                raise ValueError(f"block {k} must be 4-way, got shape {b.shape}")
            if k + 1 < len(blocks) and b.shape[3] != blocks[k + 1].shape[0]:
                raise ValueError(f"rank mismatch between blocks {k} and {k + 1}")
        if blocks[0].shape[0] != 1 or blocks[-1].shape[3] != 1:
            raise ValueError("boundary ranks must be 1")
        object.__setattr__(self, "blocks", blocks)

    def __setattr__(self, name, value):
        raise AttributeError("TTMatrix is immutable")

    @property
    def d(self) -> int:
        return len(self.blocks)

    @property
    def row_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def col_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[2] for b in self.blocks)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(b.shape[3] for b in self.blocks)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    @classmethod
    def identity(cls, dims) -> "TTMatrix":
        return cls([np.eye(n).reshape(1, n, n, 1) for n in dims])

    def fuse(self) -> TTTensor:
        """View with row/column pairs merged into one mode (for add/round)."""
        return TTTensor(
            [b.reshape(b.shape[0], b.shape[1] * b.shape[2], b.shape[3]) for b in self.blocks]
        )

    @classmethod
    def unfuse(cls, t: TTTensor, row_dims, col_dims) -> "TTMatrix":
        return cls(
            [
                b.reshape(b.shape[0], row_dims[k], col_dims[k], b.shape[2])
                for k, b in enumerate(t.blocks)
            ]
        )

    def round(self, acc: Accuracy) -> "TTMatrix":
        return TTMatrix.unfuse(self.fuse().round(acc), self.row_dims, self.col_dims)

    def __add__(self, other):
        if self.row_dims != other.row_dims or self.col_dims != other.col_dims:
            raise ValueError("dimension mismatch in TTMatrix add")
        return TTMatrix.unfuse(
            tt_add(self.fuse(), other.fuse()), self.row_dims, self.col_dims
        )

    def __mul__(self, c):
        return TTMatrix.unfuse(tt_scale(self.fuse(), c), self.row_dims, self.col_dims)

    __rmul__ = __mul__

    def to_dense(self) -> np.ndarray:
        d = self.d
        total_rows = int(np.prod(self.row_dims))
        total_cols = int(np.prod(self.col_dims))
        if total_rows * total_cols > _MAX_DENSE_SIZE:
            raise MemoryError(
                f"dense operator would hold {total_rows * total_cols} entries"
            )
        cur = self.blocks[0]
        for b in self.blocks[1:]:
            cur = np.einsum("aijb,bklc->aikjlc", cur, b).reshape(
                1, cur.shape[1] * b.shape[1], cur.shape[2] * b.shape[2], b.shape[3]
            )
        return cur[0, :, :, 0]

    def __repr__(self):
        return (
            f"TTMatrix(row_dims={self.row_dims}, col_dims={self.col_dims}, "
            f"ranks={self.ranks})"
        )


def tt_from_dense(tensor: np.ndarray, acc: Accuracy = Accuracy()) -> TTTensor:
    """TT decomposition of a dense array via d-1 sequential SVDs.

    The global relative tolerance is distributed as delta/sqrt(d-1) per
    truncation step, which guarantees the overall 2-norm error bound.
    """
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 0 or any(s < 1 for s in tensor.shape):
        raise ValueError("dense tensor must have at least one nonempty mode")
    if tensor.size > _MAX_DENSE_SIZE:
        raise MemoryError(f"refusing to decompose {tensor.size} entries")
    if not np.all(np.isfinite(tensor)):
        raise ValueError("dense tensor contains non-finite entries")
    dims = tensor.shape
    d = len(dims)
    budget = acc.delta * np.linalg.norm(tensor) / np.sqrt(max(d - 1, 1))
    blocks = []
    cur = tensor.reshape(1, -1)
    r = 1
    for k in range(d - 1):
        mat = cur.reshape(r * dims[k], -1)
        u, s, vt = _svd(mat)
        rk = _chop(s, budget, acc.max_rank)
        blocks.append(u[:, :rk].reshape(r, dims[k], rk))
        cur = s[:rk, None] * vt[:rk]
        r = rk
    blocks.append(cur.reshape(r, dims[-1], 1))
    return TTTensor(blocks)


def tt_to_dense(t: TTTensor) -> np.ndarray:
    total = int(np.prod(t.dims))
    if total > _MAX_DENSE_SIZE:
        raise MemoryError(f"dense tensor would hold {total} entries")
    cur = t.blocks[0]
    for b in t.blocks[1:]:
        cur = np.tensordot(cur, b, axes=(-1, 0)).reshape(1, -1, b.shape[2])
    return cur.reshape(t.dims)


def tt_add(a: TTTensor, b: TTTensor) -> TTTensor:
    """Exact sum; interior ranks add."""
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    if a.d == 1:
        return TTTensor([a.blocks[0] + b.blocks[0]])
    blocks = []
    for k in range(a.d):
        ab, bb = a.blocks[k], b.blocks[k]
        if k == 0:
            blocks.append(np.concatenate([ab, bb], axis=2))
        elif k == a.d - 1:
            blocks.append(np.concatenate([ab, bb], axis=0))
        else:
            ra0, n, ra1 = ab.shape
            rb0, _, rb1 = bb.shape
            blk = np.zeros((ra0 + rb0, n, ra1 + rb1))
            blk[:ra0, :, :ra1] = ab
            blk[ra0:, :, ra1:] = bb
            blocks.append(blk)
    return TTTensor(blocks)


def tt_scale(a: TTTensor, c: float) -> TTTensor:
    blocks = list(a.blocks)
    blocks[0] = blocks[0] * float(c)
    return TTTensor(blocks)


def tt_dot(a: TTTensor, b: TTTensor) -> float:
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    cur = np.ones((1, 1))
    for ab, bb in zip(a.blocks, b.blocks):
        cur = np.einsum("ab,aic,bid->cd", cur, ab, bb, optimize=True)
    return float(cur[0, 0])


def tt_norm(a: TTTensor) -> float:
    return float(np.sqrt(max(tt_dot(a, a), 0.0)))


def tt_matvec(A: TTMatrix, v: TTTensor) -> TTTensor:
    if A.col_dims != v.dims:
        raise ValueError(f"dimension mismatch: {A.col_dims} vs {v.dims}")
    blocks = []
    for ab, vb in zip(A.blocks, v.blocks):
        R0, n, _, R1 = ab.shape
        r0, _, r1 = vb.shape
        blk = np.einsum("bijc,ajd->baicd", ab, vb, optimize=True)
        blocks.append(blk.reshape(R0 * r0, n, R1 * r1))
    return TTTensor(blocks)


def tt_hadamard(a: TTTensor, b: TTTensor) -> TTTensor:
    """Exact entrywise product; ranks multiply."""
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    blocks = []
    for ab, bb in zip(a.blocks, b.blocks):
        ra0, n, ra1 = ab.shape
        rb0, _, rb1 = bb.shape
        blk = np.einsum("aib,cid->acibd", ab, bb, optimize=True)
        blocks.append(blk.reshape(ra0 * rb0, n, ra1 * rb1))
    return TTTensor(blocks)


def orthogonalize_left(t: TTTensor, upto: int) -> TTTensor:
    """Make blocks 0..upto-1 left-orthonormal without changing the tensor."""
    if not 0 <= upto <= t.d:
        raise ValueError(f"upto out of range: {upto}")
    blocks = list(t.blocks)
    for k in range(min(upto, t.d - 1)):
        r0, n, r1 = blocks[k].shape
        q, rm = np.linalg.qr(blocks[k].reshape(r0 * n, r1))
        blocks[k] = q.reshape(r0, n, q.shape[1])
        blocks[k + 1] = np.tensordot(rm, blocks[k + 1], axes=(1, 0))
    return TTTensor(blocks)


def orthogonalize_right(t: TTTensor, downto: int) -> TTTensor:
    """Make blocks downto..d-1 right-orthonormal without changing the tensor."""
    if not 0 <= downto <= t.d:
        raise ValueError(f"downto out of range: {downto}")
    blocks = list(t.blocks)
    for k in range(t.d - 1, max(downto, 1) - 1, -1):
        r0, n, r1 = blocks[k].shape
        q, rm = np.linalg.qr(blocks[k].reshape(r0, n * r1).T)
        blocks[k] = q.T.reshape(q.shape[1], n, r1)
        blocks[k - 1] = np.tensordot(blocks[k - 1], rm.T, axes=(2, 0))
    return TTTensor(blocks)


def tt_round(t: TTTensor, acc: Accuracy) -> TTTensor:
    """Truncate TT ranks to the relative tolerance acc.delta in the 2-norm."""
    if t.d == 1:
        return t
    t = orthogonalize_right(t, 1)
    nrm = np.linalg.norm(t.blocks[0])
    budget = acc.delta * nrm / np.sqrt(max(t.d - 1, 1))
    blocks = list(t.blocks)
    for k in range(t.d - 1):
        r0, n, r1 = blocks[k].shape
        u, s, vt = _svd(blocks[k].reshape(r0 * n, r1))
        rk = _chop(s, budget, acc.max_rank)
        blocks[k] = u[:, :rk].reshape(r0, n, rk)
        blocks[k + 1] = np.tensordot(s[:rk, None] * vt[:rk], blocks[k + 1], axes=(1, 0))
    # never exceed the input ranks: exact nullspaces aside, _chop keeps rk <= r1
    return TTTensor(blocks)


def linear_to_tt(c, grids) -> TTTensor:
    """Exact TT tensor of the linear form sum_p c_p x_p on a tensor grid."""
    c = np.asarray(c, dtype=float)
    d = c.size
    if len(grids) != d:
        raise ValueError("need one grid per dimension")
    if d == 1:
        return TTTensor([(c[0] * np.asarray(grids[0])).reshape(1, -1, 1)])
    blocks = []
    for k, g in enumerate(grids):
        g = np.asarray(g, dtype=float)
        n = g.size
        if k == 0:
            blk = np.zeros((1, n, 2))
            blk[0, :, 0] = c[0] * g
            blk[0, :, 1] = 1.0
        elif k == d - 1:
            blk = np.zeros((2, n, 1))
            blk[0, :, 0] = 1.0
            blk[1, :, 0] = c[k] * g
        else:
            blk = np.zeros((2, n, 2))
            blk[0, :, 0] = 1.0
            blk[1, :, 0] = c[k] * g
            blk[1, :, 1] = 1.0
        blocks.append(blk)
    return TTTensor(blocks)


def quadratic_to_tt(P: np.ndarray, grids) -> TTTensor:
    """Exact TT tensor of the quadratic form x^T P x sampled on a tensor grid.

    After compression the interior ranks are bounded by the ranks of the
    off-diagonal blocks of P plus two, hence by min(k, d-k) + 2.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("P must be square")
    if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ValueError("P must be symmetric")
    d = P.shape[0]
    if len(grids) != d:
        raise ValueError("need one grid per dimension")
    if d == 1:
        g = np.asarray(grids[0], dtype=float)
        return TTTensor([(P[0, 0] * g * g).reshape(1, -1, 1)])
    blocks = []
    for k in range(d):
        g = np.asarray(grids[k], dtype=float)
        n = g.size
        if k == 0:
            blk = np.zeros((1, n, 3))
            blk[0, :, 0] = 1.0
            blk[0, :, 1] = g
            blk[0, :, 2] = P[0, 0] * g * g
        elif k == d - 1:
            # incoming state: [1, x_0..x_{d-2}, s]
            blk = np.zeros((d + 1, n, 1))
            blk[0, :, 0] = P[k, k] * g * g
            for j in range(k):
                blk[1 + j, :, 0] = 2.0 * P[j, k] * g
            blk[d, :, 0] = 1.0
        else:
            blk = np.zeros((k + 2, n, k + 3))
            blk[0, :, 0] = 1.0
            for j in range(k):
                blk[1 + j, :, 1 + j] = 1.0
            blk[0, :, k + 1] = g
            blk[k + 1, :, k + 2] = 1.0
            blk[0, :, k + 2] = P[k, k] * g * g
            for j in range(k):
                blk[1 + j, :, k + 2] = 2.0 * P[j, k] * g
        blocks.append(blk)
    return tt_round(TTTensor(blocks), Accuracy(1e-14))


def _write_header(buf, d, dims, ranks):
    buf.write(_MAGIC)
    header = np.array([d, *dims, *ranks], dtype="<i8")
    buf.write(header.tobytes())


def save_tt(t: TTTensor, path) -> None:
    """Binary serialization: magic, d, dims, ranks as int64 LE, then blocks."""
    with open(path, "wb") as fh:
        _write_header(fh, t.d, t.dims, t.ranks)
        for b in t.blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_tt(path) -> TTTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(len(_MAGIC))
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    d = int(np.frombuffer(buf.read(8), dtype="<i8")[0])
    dims = np.frombuffer(buf.read(8 * d), dtype="<i8").astype(int)
    ranks = np.frombuffer(buf.read(8 * (d + 1)), dtype="<i8").astype(int)
    blocks = []
    for k in range(d):
        size = ranks[k] * dims[k] * ranks[k + 1]
        raw = np.frombuffer(buf.read(8 * size), dtype="<f8")
        blocks.append(raw.reshape(ranks[k], dims[k], ranks[k + 1]).copy())
    return TTTensor(blocks)
