import numpy as np
import pytest

from tthjb.amen import amen_solve_shifted, enrich, reduce_system, residual_tt
from tthjb.tt import (
    Accuracy,
    TTMatrix,
    TTTensor,
    orthogonalize_right,
    tt_from_dense,
    tt_matvec,
    tt_norm,
    tt_round,
    tt_to_dense,
)


def random_tt_matrix(rng, dims, ranks):
    return TTMatrix(
        [rng.standard_normal((ranks[k], n, n, ranks[k + 1]))
         for k, n in enumerate(dims)]
    )


def frame_matrix(v, k):
    """Dense V_{!=k}: maps local block entries to the full tensor."""
    d = v.d
    left = np.ones((1, 1))
    for j in range(k):
        b = v.blocks[j]
        left = np.einsum("Ia,aib->Iib", left.reshape(left.shape[0], -1), b)
        left = left.reshape(-1, b.shape[2])
    right = np.ones((1, 1))
    for j in range(d - 1, k, -1):
        b = v.blocks[j]
        right = np.einsum("aib,bJ->aiJ", b, right.reshape(b.shape[2], -1))
        right = right.reshape(b.shape[0], -1)
    r0, n, r1 = v.blocks[k].shape
    N = int(np.prod(v.dims))
    V = np.einsum("Ia,ij,bJ->IiJajb", left, np.eye(n), right)
    return V.reshape(N, r0 * n * r1)


class TestReduceSystem:
    def test_identity_operator(self, rng):
        v = orthogonalize_right(TTTensor.random((3, 4, 3), [1, 2, 2, 1], rng), 0)
        A = TTMatrix.identity((3, 4, 3))
        H, _ = reduce_system(A, TTTensor.zeros((3, 4, 3)), v, 0)
        assert np.allclose(H, np.eye(H.shape[0]), atol=1e-12)

    def test_dense_frame_oracle(self, rng):
        dims = (4, 4, 4)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        b = TTTensor.random(dims, [1, 2, 2, 1], rng)
        v = TTTensor.random(dims, [1, 2, 2, 1], rng)
        Ad = A.to_dense()
        bd = tt_to_dense(b).reshape(-1)
        from tthjb.tt import orthogonalize_left

        for k in range(3):
            w = orthogonalize_left(orthogonalize_right(v, max(k, 1)), k)
            H, g = reduce_system(A, b, w, k)
            V = frame_matrix(w, k)
            assert np.allclose(H, V.T @ Ad @ V, atol=1e-10)
            assert np.allclose(g, V.T @ bd, atol=1e-10)

    def test_rhs_consistency(self, rng):
        dims = (3, 3, 3)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        v = orthogonalize_right(TTTensor.random(dims, [1, 2, 2, 1], rng), 1)
        b = tt_round(tt_matvec(A, v), Accuracy(1e-14))
        H, g = reduce_system(A, b, v, 0)
        vbar = v.blocks[0].reshape(-1)
        assert np.allclose(g, H @ vbar, atol=1e-10)

    def test_rejects_non_orthogonal_gauge(self, rng):
        dims = (3, 3, 3)
        A = TTMatrix.identity(dims)
        v = TTTensor.random(dims, [1, 2, 2, 1], rng)
        with pytest.raises(ValueError):
            reduce_system(A, TTTensor.zeros(dims), v, 0)


class TestEnrich:
    def test_zero_rho_identity(self, rng):
        v = orthogonalize_right(TTTensor.random((3, 3, 3), [1, 2, 2, 1], rng), 1)
        out = enrich(v, 0, np.zeros((1, 3, 0)), Accuracy(1e-12))
        assert out is v

    def test_tensor_unchanged(self, rng):
        v = orthogonalize_right(TTTensor.random((4, 4, 3), [1, 2, 2, 1], rng), 1)
        z = rng.standard_normal((1, 4, 2))
        out = enrich(v, 0, z, Accuracy(1e-12))
        assert out.ranks[1] == v.ranks[1] + 2
        assert np.linalg.norm(tt_to_dense(out) - tt_to_dense(v)) \
            <= 1e-12 * tt_norm(v)

    def test_round_removes_redundancy(self, rng):
        v = orthogonalize_right(TTTensor.random((3, 3, 3), [1, 2, 2, 1], rng), 1)
        out = enrich(v, 1, rng.standard_normal((2, 3, 1)), Accuracy(1e-12))
        back = tt_round(out, Accuracy(1e-12))
        assert back.ranks == v.ranks

    def test_last_block_rejected(self, rng):
        v = TTTensor.random((3, 3), [1, 2, 1], rng)
        with pytest.raises(ValueError):
            enrich(v, 1, np.zeros((2, 3, 1)), Accuracy(1e-12))


class TestResidual:
    def test_exact_solution(self, rng):
        dims = (3, 3, 3)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        v = TTTensor.random(dims, [1, 2, 2, 1], rng)
        b = tt_round(tt_matvec(A, v), Accuracy(1e-14))
        r = residual_tt(A, v, b, Accuracy(1e-12), rho_max=8)
        assert tt_norm(r) <= 1e-10 * tt_norm(b)

    def test_zero_iterate(self, rng):
        dims = (3, 3, 3)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        b = TTTensor.random(dims, [1, 2, 2, 1], rng)
        r = residual_tt(A, TTTensor.zeros(dims), b, Accuracy(1e-12), rho_max=8)
        # dense comparison: tt_norm of a near-zero difference loses half the
        # digits to cancellation
        assert np.linalg.norm(tt_to_dense(r) - tt_to_dense(b)) \
            <= 1e-10 * tt_norm(b)

    def test_dense_oracle_within_cap(self, rng):
        dims = (3, 3, 3)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        v = TTTensor.random(dims, [1, 2, 2, 1], rng)
        b = TTTensor.random(dims, [1, 2, 2, 1], rng)
        r = residual_tt(A, v, b, Accuracy(1e-12), rho_max=27)
        want = tt_to_dense(b).reshape(-1) - A.to_dense() @ tt_to_dense(v).reshape(-1)
        assert np.allclose(tt_to_dense(r).reshape(-1), want,
                           atol=1e-9 * np.linalg.norm(want))


def spd_tt_matrix(rng, dims):
    """Diagonally dominant dense SPD matrix compressed into TT form."""
    N = int(np.prod(dims))
    M = rng.standard_normal((N, N))
    M = M @ M.T / N + 3.0 * np.eye(N)
    fused = tt_from_dense(M.reshape(dims[0], dims[1], dims[2],
                                    dims[0], dims[1], dims[2])
                          .transpose(0, 3, 1, 4, 2, 5)
                          .reshape(dims[0] * dims[0],
                                   dims[1] * dims[1],
                                   dims[2] * dims[2]),
                          Accuracy(1e-13))
    return TTMatrix.unfuse(fused, dims, dims)


class TestAmenSolve:
    def test_scalar_identity_system(self):
        dims = (3, 3, 3)
        A = TTMatrix.identity(dims)
        ones = TTTensor.rank_one([np.ones(3)] * 3)
        b = 2.0 * ones
        v = amen_solve_shifted(A, b, ones, 1.0, Accuracy(1e-12), sweeps=3)
        assert np.allclose(tt_to_dense(v), 1.5, atol=1e-10)

    def test_dense_solve_oracle(self, rng):
        dims = (4, 4, 4)
        A = random_tt_matrix(rng, dims, [1, 2, 2, 1])
        # push the field of values into the right half plane so the shifted
        # fixed point is well conditioned
        A = A + 8.0 * TTMatrix.identity(dims)
        b = TTTensor.random(dims, [1, 2, 2, 1], rng)
        v_prev = TTTensor.random(dims, [1, 2, 2, 1], rng)
        mu = 0.5
        v = amen_solve_shifted(A, b, v_prev, mu, Accuracy(1e-10), sweeps=8)
        want = np.linalg.solve(
            A.to_dense() + mu * np.eye(64),
            tt_to_dense(b).reshape(-1) + mu * tt_to_dense(v_prev).reshape(-1),
        )
        got = tt_to_dense(v).reshape(-1)
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)

    def test_degenerate_operator_with_shift(self, rng):
        # operator with a constant-vector nullspace, like the drift Galerkin
        # matrix: solvable only thanks to the shift
        dims = (3, 3)
        N = 9
        M = rng.standard_normal((N, N))
        ones = np.ones(N) / 3.0
        M = M - np.outer(M @ ones, ones) / (ones @ ones)  # kill e direction
        M = M.T @ M  # PSD with the same nullspace
        fused = tt_from_dense(
            M.reshape(3, 3, 3, 3).transpose(0, 2, 1, 3).reshape(9, 9),
            Accuracy(1e-13),
        )
        A = TTMatrix.unfuse(fused, dims, dims)
        b = TTTensor.random(dims, [1, 2, 1], rng)
        v_prev = TTTensor.zeros(dims)
        v = amen_solve_shifted(A, b, v_prev, 1.0, Accuracy(1e-10), sweeps=6)
        want = np.linalg.solve(M + np.eye(N), tt_to_dense(b).reshape(-1))
        assert np.allclose(tt_to_dense(v).reshape(-1), want, atol=1e-7)

    def test_negative_shift_rejected(self, rng):
        dims = (3, 3)
        A = TTMatrix.identity(dims)
        b = TTTensor.random(dims, [1, 2, 1], rng)
        with pytest.raises(ValueError):
            amen_solve_shifted(A, b, b, -1.0, Accuracy(1e-10))

    def test_monotone_residual_on_spd(self, rng):
        dims = (3, 3, 3)
        A = spd_tt_matrix(rng, dims)
        b = TTTensor.random(dims, [1, 2, 2, 1], rng)
        v_prev = TTTensor.zeros(dims)
        Ad = A.to_dense()
        bd = tt_to_dense(b).reshape(-1)
        prev_res = np.inf
        v = None
        for s in range(1, 5):
            v = amen_solve_shifted(A, b, v_prev, 0.0, Accuracy(1e-12),
                                   sweeps=s, v0=v_prev)
            res = np.linalg.norm(bd - Ad @ tt_to_dense(v).reshape(-1))
            assert res <= prev_res * (1 + 1e-9)
            prev_res = res

    def test_contractive_fixed_point_map(self, rng):
        # spectral radius of mu (A + mu I)^{-1} < 1 when Re(eig A) >= 0
        N = 12
        M = rng.standard_normal((N, N))
        M = M - (np.min(np.linalg.eigvals(M).real) - 0.1) * np.eye(N)
        for mu in (0.5, 5.0, 50.0):
            G = mu * np.linalg.inv(M + mu * np.eye(N))
            assert np.max(np.abs(np.linalg.eigvals(G))) < 1.0
