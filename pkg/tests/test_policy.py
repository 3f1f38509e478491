import numpy as np
import pytest

from tthjb.assembly import ControlPenalty
from tthjb.basis import build_basis
from tthjb.models import ControlledDynamics, lq, solve_riccati
from tthjb.policy import (
    SolverConfig,
    ValueFunction,
    feedback,
    initial_policy,
    policy_iterate,
    value_gradient,
)
from tthjb.tt import TTTensor, linear_to_tt, quadratic_to_tt, tt_norm


def scalar_unstable_model(u_max=None):
    """dy/dt = y + u with unit quadratic costs; Riccati gives K = 1 + sqrt(2)."""
    A = np.array([[1.0]])
    B = np.array([[1.0]])

    def drift(X):
        return np.atleast_2d(X) @ A.T

    def channel_eval(X):
        return np.ones((np.atleast_2d(X).shape[0], 1))

    def f_tts(grids):
        return [linear_to_tt(A[0], grids)]

    def channel(grids):
        from tthjb.assembly import ControlChannel

        return ControlChannel(constant=np.ones(1))

    kind = "unconstrained" if u_max is None else "tanh"
    return ControlledDynamics(
        name="scalar", dim=1, gamma=1.0, a=2.0,
        penalty=ControlPenalty(gamma=1.0, kind=kind, u_max=u_max),
        lin_A=A, lin_B=B, cost_matrix=np.eye(1),
        drift=drift, channel_eval=channel_eval,
        f_tt_builder=f_tts, channel_builder=channel,
        admissible_uncontrolled=False,
    )


class TestInitialPolicy:
    def test_stable_linear_model_zero_policy(self):
        model = lq(4)
        basis = build_basis(3, model.a)
        u = initial_policy(model, basis, SolverConfig())
        assert tt_norm(u) == 0.0

    def test_scalar_unstable_lqr_warm_start(self):
        model = scalar_unstable_model()
        basis = build_basis(4, model.a)
        u = initial_policy(model, basis, SolverConfig())
        # u(x) = -K x with K = 1 + sqrt(2)
        want = -(1.0 + np.sqrt(2.0)) * basis.nodes
        assert np.allclose(u.to_dense(), want, atol=1e-8)


class TestValueGradient:
    def test_projected_norm_squared(self):
        basis = build_basis(4, 1.0)
        grids = [basis.nodes] * 3
        from tthjb.assembly import project_to_basis

        v = project_to_basis(quadratic_to_tt(np.eye(3), grids), basis)
        V = ValueFunction(v, basis)
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.uniform(-0.8, 0.8, size=3)
            assert np.allclose(value_gradient(V, x), 2.0 * x, atol=1e-8)

    def test_constant_value_zero_gradient(self):
        basis = build_basis(3, 1.0)
        v = TTTensor.rank_one([np.eye(3, 1).reshape(-1)] * 4)
        V = ValueFunction(v, basis)
        g = value_gradient(V, np.array([0.3, -0.2, 0.5, 0.0]))
        assert np.max(np.abs(g)) <= 1e-12

    def test_extrapolation_flagged(self):
        basis = build_basis(3, 1.0)
        v = TTTensor.rank_one([np.ones(3)] * 2)
        V = ValueFunction(v, basis)
        _, flags = V.gradient(np.array([[0.0, 1.5]]))
        assert flags[0]


class TestFeedback:
    def test_scalar_analytic(self):
        model = scalar_unstable_model()
        basis = build_basis(4, model.a)
        pi = 1.0 + np.sqrt(2.0)
        coeffs = basis.phi.T @ (basis.weights * (pi * basis.nodes**2))
        V = ValueFunction(TTTensor.rank_one([coeffs]), basis)
        for x in (-1.0, 0.25, 1.5):
            assert np.isclose(feedback(V, model, np.array([x])), -pi * x,
                              atol=1e-8)

    def test_zero_gradient_zero_control(self):
        model = scalar_unstable_model()
        basis = build_basis(3, model.a)
        V = ValueFunction(TTTensor.rank_one([np.eye(3, 1).reshape(-1)]), basis)
        assert feedback(V, model, np.array([0.7])) == 0.0

    def test_constrained_range(self):
        model = scalar_unstable_model(u_max=2.0)
        basis = build_basis(4, model.a)
        coeffs = basis.phi.T @ (basis.weights * (50.0 * basis.nodes**2))
        V = ValueFunction(TTTensor.rank_one([coeffs]), basis)
        u = feedback(V, model, np.array([1.5]))
        assert -2.0 < u < 2.0
        assert abs(u) > 1.9  # large gradient saturates


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(delta=0.0)
        with pytest.raises(ValueError):
            SolverConfig(q=1.0)
        with pytest.raises(ValueError):
            SolverConfig(mu0=-1.0)

    def test_value_accuracy_defaults_to_delta(self):
        c = SolverConfig(delta=1e-4, max_rank=7)
        assert c.value_accuracy.delta == 1e-4
        assert c.value_accuracy.max_rank == 7
        c2 = SolverConfig(delta=1e-4, trunc_delta=1e-6)
        assert c2.value_accuracy.delta == 1e-6


class TestPolicyIterationLQ:
    @pytest.fixture(scope="class")
    def solved(self):
        model = lq(6)
        config = SolverConfig(delta=1e-4, n=4, mu0=50.0)
        V, state = policy_iterate(model, config)
        return model, config, V, state

    def test_matches_riccati(self, solved, rng):
        model, config, V, state = solved
        sol = solve_riccati(model.lin_A, model.lin_B, model.cost_matrix,
                            model.gamma)
        pts = rng.uniform(-0.5 * model.a, 0.5 * model.a, size=(100, 6))
        want = np.einsum("ni,ij,nj->n", pts, sol.Pi, pts)
        err = np.max(np.abs(V.eval(pts) - want) / np.abs(want))
        assert err <= 10 * config.delta

    def test_rank_bound(self, solved):
        _, _, V, _ = solved
        d = V.d
        for k, r in enumerate(V.v.ranks[1:-1], start=1):
            assert r <= min(k, d - k) + 3

    def test_stopping_and_shift_schedule(self, solved):
        _, config, _, state = solved
        assert state.converged
        assert state.history[-1]["rel_change"] <= config.delta
        shifts = [row["shift"] for row in state.history]
        want = [max(config.mu0 * config.q ** (s + 1), config.mu_min)
                for s in range(len(shifts))]
        assert np.allclose(shifts, want, rtol=1e-12)

    def test_anchored_at_origin_and_positive(self, solved, rng):
        model, config, V, _ = solved
        pts = rng.uniform(-0.5 * model.a, 0.5 * model.a, size=(50, 6))
        vals = V.eval(pts)
        assert np.all(vals > 0)
        assert abs(V.eval(np.zeros((1, 6)))[0]) <= config.delta * np.max(vals)

    def test_history_csv(self, solved, tmp_path):
        from tthjb.policy import history_to_csv

        _, _, _, state = solved
        path = tmp_path / "hist.csv"
        history_to_csv(state, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,rel_change,max_rank,shift,seconds"
        assert len(lines) == len(state.history) + 1
