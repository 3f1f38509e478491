import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import solve_ivp

from tthjb.models import (
    MODELS,
    allen_cahn_1d,
    allen_cahn_2d,
    chebyshev_interior_nodes,
    fokker_planck,
    fokker_planck_unshifted,
    lq,
    solve_riccati,
)


def fd_jacobian(f, d, h=1e-7):
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (f((e).reshape(1, -1))[0] - f((-e).reshape(1, -1))[0]) / (2 * h)
    return J


class TestAllenCahn1D:
    def test_equilibria(self):
        m = allen_cahn_1d(10)
        for x in (np.zeros(10), np.ones(10), -np.ones(10)):
            assert np.max(np.abs(m.drift(x.reshape(1, -1)))) <= 1e-9

    def test_zero_state_cost(self):
        m = allen_cahn_1d(8)
        assert m.state_cost(np.zeros((1, 8)))[0] == 0.0

    def test_linearization_is_a_plus_identity(self):
        m = allen_cahn_1d(8)
        J = fd_jacobian(m.drift, 8)
        assert np.allclose(J, m.lin_A, atol=1e-5)
        # the linear part stored in extras is the diffusion operator alone
        sigma_L = m.lin_A - np.eye(8)
        assert np.allclose(J - np.eye(8), sigma_L, atol=1e-5)

    def test_uncontrolled_flows_to_ones(self):
        m = allen_cahn_1d(10)
        sol = solve_ivp(lambda t, x: m.drift(x.reshape(1, -1))[0], (0, 20.0),
                        m.x0_default, rtol=1e-8, atol=1e-10)
        assert np.allclose(sol.y[:, -1], 1.0, atol=1e-3)

    def test_actuator_support(self):
        m = allen_cahn_1d(10)
        xi = m.extras["xi"]
        B = m.lin_B.reshape(-1)
        inside = (xi >= -0.5 - 1e-9) & (xi <= 0.2 + 1e-9)
        assert np.array_equal(B != 0.0, inside)

    def test_state_cost_is_l2_quadrature(self):
        # constant state 1 has squared L2 norm 2 on (-1, 1)
        m = allen_cahn_1d(12)
        assert np.isclose(m.state_cost(np.ones((1, 12)))[0], 2.0, atol=1e-6)

    def test_pseudospectral_derivative_exactness(self):
        d = 10
        m = allen_cahn_1d(d)
        xi = m.extras["xi"]
        E = m.extras["extension"]
        full = m.extras["full_nodes"]
        # quadratic with zero Neumann data at +-1: p(x) = 1 (trivial) is too
        # weak; use the sigma-Laplacian on cos(pi x), whose derivative
        # vanishes at the boundary
        x = np.cos(np.pi * xi)
        lap = m.lin_A - np.eye(d)   # sigma * D2 with Neumann closure
        want = m.extras["sigma"] * (-np.pi**2) * np.cos(np.pi * xi)
        got = lap @ x
        assert np.max(np.abs(got - want)) <= 1e-3 * np.max(np.abs(want))

    def test_cos_bump_initial_state(self):
        m = allen_cahn_1d(10)
        xi = m.extras["xi"]
        assert np.allclose(m.x0_default,
                           2.0 + np.cos(2 * np.pi * xi) * np.cos(np.pi * xi))

    def test_constrained_variant(self):
        m = allen_cahn_1d(10, u_max=2.0)
        assert m.penalty.kind == "tanh"
        assert m.penalty.u_max == 2.0


class TestAllenCahn2D:
    @pytest.mark.parametrize("pts", [9, 11])
    def test_constructible(self, pts):
        m = allen_cahn_2d(pts)
        assert m.dim == pts * pts

    def test_origin_equilibrium(self):
        m = allen_cahn_2d(4)
        assert np.max(np.abs(m.drift(np.zeros((1, 16))))) <= 1e-10

    def test_linearization_consistency(self):
        m = allen_cahn_2d(4)
        J = fd_jacobian(m.drift, 16)
        assert np.allclose(J, m.lin_A, atol=1e-5)

    def test_symmetry(self):
        # the operator commutes with the xi1 <-> xi2 swap
        pts = 5
        m = allen_cahn_2d(pts)
        perm = np.arange(pts * pts).reshape(pts, pts).T.reshape(-1)
        rng = np.random.default_rng(0)
        x = rng.standard_normal(pts * pts)
        fx = m.drift(x.reshape(1, -1))[0]
        fxs = m.drift(x[perm].reshape(1, -1))[0]
        assert np.allclose(fx[perm], fxs, atol=1e-9)


class TestFokkerPlanck:
    def test_ground_potential_at_zero(self):
        from tthjb.models import _ground_potential

        assert np.isclose(_ground_potential(0.0), 0.25)

    def test_steady_state_annihilated(self):
        m = fokker_planck(D=32)
        L = m.extras["L"]
        x_inf = m.extras["x_inf"]
        assert np.linalg.norm(L @ x_inf) <= 1e-8 * np.linalg.norm(x_inf)

    def test_projection_is_zero_mass(self, rng):
        m = fokker_planck(D=16)
        Z = m.extras["Z"]
        y = Z @ rng.standard_normal(m.dim)
        assert abs(np.sum(y)) <= 1e-10
        P = m.extras["P"]
        w = rng.standard_normal(16)
        assert abs(np.sum(P @ w)) <= 1e-9 * np.linalg.norm(w)

    def test_shift_enters_drift(self):
        m = fokker_planck(D=16, sigma_shift=0.2)
        m0 = fokker_planck_unshifted(m)
        assert np.allclose(m.lin_A - m0.lin_A, 0.2 * np.eye(m.dim), atol=1e-10)

    def test_x0_presets_are_zero_mass(self):
        m = fokker_planck(D=16)
        Z = m.extras["Z"]
        for z0 in (m.x0_default, m.extras["x0_uniform"]):
            assert abs(np.sum(Z @ z0)) <= 1e-8

    def test_uncontrolled_reference_decay_rate(self):
        # high-resolution reference: squared deviation decays near exp(-0.29 t)
        m = fokker_planck(D=255)
        m0 = fokker_planck_unshifted(m)
        sol = solve_ivp(lambda t, z: m0.drift(z.reshape(1, -1))[0], (0, 9.2),
                        m.x0_default, method="BDF", rtol=1e-8, atol=1e-10,
                        dense_output=True)
        ts = np.linspace(2.0, 9.2, 200)
        e2 = np.sum(sol.sol(ts) ** 2, axis=0) * m.extras["h"]
        rate = np.polyfit(ts, np.log(e2), 1)[0]
        assert -0.40 <= rate <= -0.20

    def test_min_cells(self):
        with pytest.raises(ValueError):
            fokker_planck(D=4)


class TestRiccati:
    def test_scalar_quadratic_formula(self):
        sol = solve_riccati(np.array([[1.0]]), np.array([[1.0]]),
                            np.array([[2.0]]), 1.0)
        assert np.isclose(sol.Pi[0, 0], 1.0 + np.sqrt(3.0))

    def test_stable_no_control_is_lyapunov(self):
        A = np.array([[-1.0, 0.3], [0.0, -2.0]])
        Q = np.eye(2)
        sol = solve_riccati(A, np.zeros((2, 1)), Q, 1.0)
        want = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
        assert np.allclose(sol.Pi, want, atol=1e-8)
        assert np.allclose(sol.K, 0.0, atol=1e-10)

    def test_laplacian_chain(self):
        m = lq(6)
        sol = solve_riccati(m.lin_A, m.lin_B, m.cost_matrix, m.gamma)
        res = (m.lin_A.T @ sol.Pi + sol.Pi @ m.lin_A
               - sol.Pi @ m.lin_B @ m.lin_B.T @ sol.Pi / m.gamma + m.cost_matrix)
        assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(m.cost_matrix)
        cl = m.lin_A - m.lin_B @ sol.K
        assert np.max(np.linalg.eigvals(cl).real) < 0

    def test_unstable_stiff_system_warm_start(self):
        # Chebyshev diffusion with unstable shift: the direct ARE call can
        # fail, the Bass fallback must still produce a stabilizing gain
        m = allen_cahn_1d(10)
        sol = solve_riccati(m.lin_A, m.lin_B, m.cost_matrix, m.gamma)
        cl = m.lin_A - m.lin_B @ sol.K
        assert np.max(np.linalg.eigvals(cl).real) < 0


class TestRegistry:
    def test_names(self):
        assert set(MODELS) == {"allen_cahn_1d", "allen_cahn_2d",
                               "fokker_planck", "lq"}

    def test_equilibrium_invariants(self):
        built = [allen_cahn_1d(8), allen_cahn_2d(3), fokker_planck(D=12), lq(6)]
        for m in built:
            z = np.zeros((1, m.dim))
            assert np.max(np.abs(m.drift(z))) <= 1e-9
            assert abs(m.state_cost(z)[0]) <= 1e-12

    def test_interior_nodes(self):
        xi = chebyshev_interior_nodes(5)
        assert np.all(np.diff(xi) > 0)
        assert np.all(np.abs(xi) < 1)
