"""Black-box TT approximation of grid functions: maxvol pivoting and TT-Cross.

The cross iteration alternates left-to-right and right-to-left passes over
the dimensions, keeping nested index sets whose intersection matrices are
kept well conditioned by maxvol.  Blocks are assembled in interpolation form
``F * inv(F[selected rows])`` computed through a QR factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .tt import Accuracy, TTTensor, tt_norm

__all__ = ["GridFunction", "CrossIndexSets", "CrossResult", "maxvol", "tt_cross", "rank_adapt", "random_index_sets", "tt_function_cross"]


@dataclass
class GridFunction:
    """Pure batch evaluator over a tensor-product grid.

    ``evaluator`` maps an (N, d) integer index array to N values; it must be
    reentrant (batches may be evaluated concurrently).  ``grid`` holds the
    per-dimension node coordinates.
    """

    evaluator: callable
    grid: list
    n_evals: int = field(default=0, compare=False)
    sweep_evals: list = field(default_factory=list, compare=False)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.grid)

    def __call__(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=int)
        self.n_evals += indices.shape[0]
        if self.sweep_evals:
            self.sweep_evals[-1] += indices.shape[0]
        vals = np.asarray(self.evaluator(indices), dtype=float).reshape(-1)
        if vals.size != indices.shape[0]:
            raise ValueError("evaluator returned wrong batch size")
        return vals

    def points(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=int)
        return np.stack(
            [np.asarray(self.grid[k])[indices[:, k]] for k in range(indices.shape[1])],
            axis=1,
        )


def grid_function_from_pointwise(func, grid) -> GridFunction:
    """Wrap a pointwise evaluator f(points (N,d)) -> (N,) as a GridFunction."""
    grid = [np.asarray(g, dtype=float) for g in grid]

    def evaluator(indices):
        pts = np.stack([grid[k][indices[:, k]] for k in range(indices.shape[1])], axis=1)
        return func(pts)

    return GridFunction(evaluator=evaluator, grid=grid)


@dataclass(frozen=True)
class CrossIndexSets:
    """Nested left/right partial multi-index sets for a d-dimensional grid.

    ``left[k]`` has shape (R_{k+1}, k+1) and ``right[k]`` shape
    (R_{k+1}, d-k-1) for k = 0..d-2; the boundary sets are empty by
    convention.
    """

    dims: tuple
    left: tuple
    right: tuple

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(r.shape[0] for r in self.right) + (1,)


def random_index_sets(dims, rank: int, rng) -> CrossIndexSets:
    """Uniform random distinct right sets at the given rank; left sets empty."""
    dims = tuple(int(n) for n in dims)
    d = len(dims)
    right = []
    for k in range(d - 1):
        tail = dims[k + 1 :]
        cap = int(np.prod([min(n, 1 << 16) for n in tail], dtype=float))
        r = min(rank, cap, int(np.prod(dims[: k + 1], dtype=float)))
        rows = _distinct_rows(tail, r, rng)
        right.append(rows)
    left = tuple(np.zeros((0, k + 1), dtype=int) for k in range(d - 1))
    return CrossIndexSets(dims=dims, left=left, right=tuple(right))


def _distinct_rows(dims, count, rng, existing=None):
    """count distinct random multi-indices over dims, avoiding existing rows."""
    seen = set(map(tuple, existing)) if existing is not None else set()
    rows = []
    attempts = 0
    while len(rows) < count:
        cand = tuple(int(rng.integers(0, n)) for n in dims)
        attempts += 1
        if cand not in seen:
            seen.add(cand)
            rows.append(cand)
        if attempts > 1000 * max(count, 1):
            raise RuntimeError("could not sample enough distinct multi-indices")
    return np.array(rows, dtype=int).reshape(count, len(dims))


def maxvol(F: np.ndarray, tol: float = 5e-2, max_iters: int = 500) -> np.ndarray:
    """Rows of a dominant (locally maximum-volume) square submatrix of F.

    On exit every entry of F @ inv(F[rows]) has magnitude <= 1 + tol.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2:
        raise ValueError("F must be a matrix")
    nrows, r = F.shape
    if nrows < r:
        raise ValueError(f"need at least {r} rows, got {nrows}")
    # pivoted QR detects rank deficiency before any inversion happens
    _, rq, _ = scipy.linalg.qr(F, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rq))
    if diag[0] == 0.0 or diag[-1] < 1e-12 * diag[0]:
        raise ValueError("maxvol requires a full-column-rank matrix")
    _, piv = scipy.linalg.lu_factor(F, check_finite=False)
    perm = np.arange(nrows)
    for i, p in enumerate(piv[:r]):
        perm[i], perm[p] = perm[p], perm[i]
    rows = perm[:r].copy()
    B = F @ np.linalg.inv(F[rows])
    for _ in range(max_iters):
        flat = np.argmax(np.abs(B))
        i, j = np.unravel_index(flat, B.shape)
        if abs(B[i, j]) <= 1.0 + tol:
            break
        # swap row rows[j] <- i with a rank-1 update of B
        ej = np.zeros(r)
        ej[j] = 1.0
        B = B - np.outer(B[:, j], (B[i, :] - ej) / B[i, j])
        rows[j] = i
    return np.sort(rows)


@dataclass
class CrossResult:
    tensor: TTTensor
    index_sets: CrossIndexSets
    n_evals: int
    sweeps: int
    per_sweep_evals: list
    converged: bool
    saturated: bool


def rank_adapt(state: CrossIndexSets, error_estimate: float, acc: Accuracy, rng,
               increment: int = 2):
    """Grow right index sets where the sweep-to-sweep change exceeds delta.

    Returns (new state, saturated flag); ranks never exceed acc.max_rank nor
    the combinatorial capacity of the grid.
    """
    if error_estimate <= acc.delta:
        return state, False
    dims = state.dims
    d = len(dims)
    new_right = []
    saturated = True
    for k in range(d - 1):
        rows = state.right[k]
        cap = int(min(np.prod(dims[k + 1 :], dtype=float), np.prod(dims[: k + 1], dtype=float), 1 << 20))
        target = rows.shape[0] + increment
        if acc.max_rank is not None:
            target = min(target, acc.max_rank)
        target = min(target, cap)
        if target > rows.shape[0]:
            saturated = False
            extra = _distinct_rows(dims[k + 1 :], target - rows.shape[0], rng, existing=rows)
            rows = np.vstack([rows, extra])
        new_right.append(rows)
    # enforce the nestedness-compatible chain R_k <= R_{k-1} * m_k
    for k in range(d - 1):
        lim = (new_right[k - 1].shape[0] if k > 0 else 1) * dims[k]
        if new_right[k].shape[0] > lim:
            new_right[k] = new_right[k][:lim]
    for k in range(d - 2, -1, -1):
        lim = (new_right[k + 1].shape[0] if k < d - 2 else 1) * dims[k + 1]
        if new_right[k].shape[0] > lim:
            new_right[k] = new_right[k][:lim]
    return replace(state, right=tuple(new_right)), saturated


def _combine_indices(left_rows, k, m, right_rows, d):
    """All multi-indices I_left x {0..m-1} x I_right in row-major order."""
    nl = max(left_rows.shape[0], 1)
    nr = max(right_rows.shape[0], 1)
    out = np.empty((nl * m * nr, d), dtype=int)
    li = np.repeat(np.arange(nl), m * nr)
    mi = np.tile(np.repeat(np.arange(m), nr), nl)
    ri = np.tile(np.arange(nr), nl * m)
    if left_rows.shape[1]:
        out[:, : left_rows.shape[1]] = left_rows[li]
    out[:, k] = mi
    if right_rows.shape[1]:
        out[:, k + 1 :] = right_rows[ri]
    return out


def _trimmed_basis(F: np.ndarray, delta: float) -> np.ndarray:
    """Orthonormal column basis of F trimmed to its numerical rank.

    Keeping exactly-zero directions would inject arbitrary noise into the
    interpolant, which stalls convergence and inflates ranks, so singular
    values below a small fraction of the truncation target are dropped.
    """
    u, s, _ = np.linalg.svd(F, full_matrices=False)
    tol = max(1e-14, 1e-2 * delta) * (s[0] if s[0] > 0 else 1.0)
    keep = max(int(np.sum(s > tol)), 1)
    return u[:, :keep]


def _forward_pass(f: GridFunction, right_sets, delta: float):
    """Left-to-right pass: assemble interpolation cores, refresh left sets."""
    dims = f.dims
    d = len(dims)
    cores = []
    left_sets = []
    left_rows = np.zeros((1, 0), dtype=int)
    for k in range(d):
        right_rows = right_sets[k] if k < d - 1 else np.zeros((1, 0), dtype=int)
        combos = _combine_indices(left_rows, k, dims[k], right_rows, d)
        vals = f(combos)
        rl = max(left_rows.shape[0], 1)
        rr = right_rows.shape[0] if k < d - 1 else 1
        F = vals.reshape(rl * dims[k], rr)
        if k == d - 1:
            cores.append(F.reshape(rl, dims[k], 1))
            break
        q = _trimmed_basis(F, delta)
        sel = maxvol(q)
        core = q @ np.linalg.inv(q[sel])
        cores.append(core.reshape(rl, dims[k], q.shape[1]))
        # combos are ordered left-major, so row index maps back directly
        left_rows = combos[np.arange(combos.shape[0]).reshape(rl * dims[k], rr)[sel, 0]][:, : k + 1]
        left_sets.append(left_rows)
    return cores, left_sets


def _backward_pass(f: GridFunction, left_sets, right_sets, delta: float):
    """Right-to-left pass refreshing the right index sets."""
    dims = f.dims
    d = len(dims)
    new_right = list(right_sets)
    right_rows = np.zeros((1, 0), dtype=int)
    for k in range(d - 1, 0, -1):
        left_rows = left_sets[k - 1]
        combos = _combine_indices(left_rows, k, dims[k], right_rows, d)
        vals = f(combos)
        rl = left_rows.shape[0]
        rr = max(right_rows.shape[0], 1)
        F = vals.reshape(rl, dims[k] * rr)
        q = _trimmed_basis(F.T, delta)
        sel = maxvol(q)
        # columns of F enumerate (i_k, right) pairs in row-major order
        pair_idx = np.arange(dims[k] * rr)[sel]
        ik = pair_idx // rr
        rsel = pair_idx % rr
        rows = np.empty((sel.size, d - k), dtype=int)
        rows[:, 0] = ik
        if right_rows.shape[1]:
            rows[:, 1:] = right_rows[rsel]
        new_right[k - 1] = rows
        right_rows = rows
    return tuple(new_right)


def tt_cross(
    f: GridFunction,
    acc: Accuracy,
    initial: CrossIndexSets | None = None,
    seed: int | np.random.Generator = 0,
    max_sweeps: int = 20,
    initial_rank: int = 2,
    kick_rank: int = 2,
    adapt: bool = True,
) -> CrossResult:
    """TT-Cross iteration with maxvol pivot selection and rank adaptation.

    One sweep is a full left-to-right pass (which also assembles the TT
    blocks from the inverted intersection matrices) followed by a
    right-to-left pass.  Convergence is declared when the relative change of
    the assembled iterate drops below acc.delta.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = f.dims
    d = len(dims)
    state = initial if initial is not None else random_index_sets(dims, initial_rank, rng)
    if state.dims != dims:
        raise ValueError("initial index sets built for a different grid")
    prev = None
    tensor = None
    converged = False
    saturated = False
    sweeps = 0
    for sweep in range(max_sweeps):
        f.sweep_evals.append(0)
        sweeps = sweep + 1
        cores, left_sets = _forward_pass(f, state.right, acc.delta)
        tensor = TTTensor(cores)
        change = None
        if prev is not None:
            denom = max(tt_norm(tensor), 1e-300)
            change = tt_norm(tensor - prev) / denom
            if change <= acc.delta:
                converged = True
                break
        new_right = _backward_pass(f, left_sets, state.right, acc.delta)
        state = replace(state, left=tuple(left_sets), right=new_right)
        # expansion must come after the backward pass: the maxvol reselection
        # sizes right sets by the left ranks, so earlier growth would be lost
        if adapt and (change is None or change > acc.delta):
            state, saturated = rank_adapt(state, np.inf if change is None else change,
                                          acc, rng, kick_rank)
        prev = tensor
    return CrossResult(
        tensor=tensor,
        index_sets=state,
        n_evals=f.n_evals,
        sweeps=sweeps,
        per_sweep_evals=list(f.sweep_evals),
        converged=converged,
        saturated=saturated,
    )


def tt_function_cross(func, grid, acc: Accuracy, seed=0, **kwargs) -> CrossResult:
    """Cross-approximate a pointwise function of grid coordinates."""
    return tt_cross(grid_function_from_pointwise(func, grid), acc, seed=seed, **kwargs)
