"""Benchmark controlled dynamics and the Riccati baseline.

All models expose the origin as an equilibrium with zero state cost, batch
evaluators for rollouts, and TT builders used by the Galerkin assembly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .assembly import ControlChannel, ControlPenalty
from .tt import Accuracy, TTTensor, linear_to_tt, quadratic_to_tt, tt_round

__all__ = [
    "ControlledDynamics",
    "LQRSolution",
    "allen_cahn_1d",
    "allen_cahn_2d",
    "fokker_planck",
    "lq",
    "solve_riccati",
    "MODELS",
    "chebyshev_interior_nodes",
]


@dataclass
class ControlledDynamics:
    """A control-affine system dx/dt = f(x) + g(x) u with quadratic state cost."""

    name: str
    dim: int
    gamma: float
    a: float
    penalty: ControlPenalty
    lin_A: np.ndarray
    lin_B: np.ndarray
    cost_matrix: np.ndarray
    drift: callable
    channel_eval: callable
    f_tt_builder: callable
    channel_builder: callable
    admissible_uncontrolled: bool
    x0_default: np.ndarray | None = None
    horizon: float = 3.2
    extras: dict = field(default_factory=dict)

    def state_cost(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("ni,ij,nj->n", X, self.cost_matrix, X)

    def ell_tt(self, grids) -> TTTensor:
        return quadratic_to_tt(self.cost_matrix, grids)


# ---------------------------------------------------------------------------
# Chebyshev pseudospectral pieces (1D Allen-Cahn and its 2D tensorization)

def chebyshev_interior_nodes(d: int) -> np.ndarray:
    k = np.arange(1, d + 1)
    return -np.cos(np.pi * k / (d + 1))


def _chebyshev_full_nodes(d: int) -> np.ndarray:
    k = np.arange(0, d + 2)
    return -np.cos(np.pi * k / (d + 1))


def _barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    # second-kind Chebyshev points: w_k = (-1)^k, halved at the ends
    n = nodes.size
    w = (-1.0) ** np.arange(n)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _diff_matrix(nodes: np.ndarray) -> np.ndarray:
    """Barycentric differentiation matrix with negative-sum-trick diagonal."""
    n = nodes.size
    w = _barycentric_weights(nodes)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (nodes[i] - nodes[j])
        D[i, i] = -np.sum(D[i, :])
    return D


def _clenshaw_curtis_weights(nodes: np.ndarray) -> np.ndarray:
    """Weights exact for polynomials up to the node count on [-1, 1].

    Solved from moment conditions in the Chebyshev basis, which is perfectly
    conditioned on these nodes (the collocation matrix is a cosine table).
    """
    n = nodes.size
    theta = np.arccos(np.clip(nodes, -1.0, 1.0))
    C = np.cos(np.outer(np.arange(n), theta))  # C[j, k] = T_j(x_k)
    moments = np.zeros(n)
    j = np.arange(n)
    even = j % 2 == 0
    moments[even] = 2.0 / (1.0 - j[even] ** 2)
    return np.linalg.solve(C, moments)


def _neumann_closure(d: int):
    """Extension matrix expressing boundary values from interior ones.

    Boundary bordering: the two rows of the first-derivative matrix at the
    endpoints are set to zero and solved for the endpoint values.
    """
    full = _chebyshev_full_nodes(d)
    D = _diff_matrix(full)
    bnd = [0, d + 1]
    interior = np.arange(1, d + 1)
    M = D[np.ix_(bnd, bnd)]
    rhs = -D[np.ix_(bnd, interior)]
    corr = np.linalg.solve(M, rhs)  # (2, d)
    E = np.zeros((d + 2, d))
    E[interior, np.arange(d)] = 1.0
    E[0] = corr[0]
    E[d + 1] = corr[1]
    lap_full = D @ D
    L = lap_full[interior] @ E
    return E, L, full


def _cubic_reaction_tts(A_lin: np.ndarray, grids) -> list:
    """TT components of f(x) = A_lin x - x.^3 (the linear part holds A + I)."""
    d = A_lin.shape[0]
    out = []
    for p in range(d):
        lin = linear_to_tt(A_lin[p], grids)
        g = np.asarray(grids[p], dtype=float)
        cubic = TTTensor(
            [
                (-(g**3)).reshape(1, -1, 1) if k == p
                else np.ones((1, len(grids[k]), 1))
                for k in range(d)
            ]
        )
        out.append(tt_round(lin + cubic, Accuracy(1e-14)))
    return out


def allen_cahn_1d(
    d: int,
    sigma: float = 0.2,
    omega=(-0.5, 0.2),
    gamma: float = 0.1,
    u_max: float | None = None,
    a: float = 3.0,
) -> ControlledDynamics:
    """Controlled reaction-diffusion chain on d interior Chebyshev nodes.

    dX/dt = A X + X (1 - X^2) + B u with A the sigma-scaled pseudospectral
    Laplacian under homogeneous Neumann conditions and B the indicator of
    the actuated subinterval.
    """
    if d < 3:
        raise ValueError("need at least 3 interior nodes for the boundary closure")
    E, L, full = _neumann_closure(d)
    xi = full[1 : d + 1]
    A = sigma * L
    # tolerance so nodes landing exactly on the actuated boundary stay inside
    B = ((xi >= omega[0] - 1e-12) & (xi <= omega[1] + 1e-12)).astype(float)
    w_full = _clenshaw_curtis_weights(full)
    Q = E.T @ (w_full[:, None] * E)
    Q = 0.5 * (Q + Q.T)
    A_lin = A + np.eye(d)

    def drift(X):
        X = np.atleast_2d(X)
        return X @ A.T + X * (1.0 - X * X)

    def channel_eval(X):
        X = np.atleast_2d(X)
        return np.broadcast_to(B, X.shape)

    if u_max is None:
        penalty = ControlPenalty(gamma=gamma)
    else:
        penalty = ControlPenalty(gamma=gamma, kind="tanh", u_max=u_max)

    x0 = 2.0 + np.cos(2 * np.pi * xi) * np.cos(np.pi * xi)
    return ControlledDynamics(
        name="allen_cahn_1d",
        dim=d,
        gamma=gamma,
        a=a,
        penalty=penalty,
        lin_A=A_lin,
        lin_B=B.reshape(-1, 1),
        cost_matrix=Q,
        drift=drift,
        channel_eval=channel_eval,
        f_tt_builder=lambda grids: _cubic_reaction_tts(A_lin, grids),
        channel_builder=lambda grids: ControlChannel(constant=B),
        admissible_uncontrolled=False,
        x0_default=x0,
        horizon=3.2,
        extras={"xi": xi, "full_nodes": full, "extension": E, "sigma": sigma,
                "omega": tuple(omega)},
    )


def allen_cahn_2d(
    points_per_axis: int,
    sigma: float = 0.2,
    gamma: float = 0.1,
    a: float = 3.0,
) -> ControlledDynamics:
    """Tensorized variant on a points_per_axis^2 interior Chebyshev grid."""
    p = points_per_axis
    if p < 3:
        raise ValueError("need at least 3 interior nodes per axis")
    d = p * p
    E, L, full = _neumann_closure(p)
    xi = full[1 : p + 1]
    eye = np.eye(p)
    A = sigma * (np.kron(L, eye) + np.kron(eye, L))
    ind = ((xi >= -0.5 - 1e-12) & (xi <= 0.2 + 1e-12)).astype(float)
    B = np.kron(ind, ind)
    w_full = _clenshaw_curtis_weights(full)
    Q1 = E.T @ (w_full[:, None] * E)
    Q1 = 0.5 * (Q1 + Q1.T)
    Q = np.kron(Q1, Q1)
    A_lin = A + np.eye(d)

    def drift(X):
        X = np.atleast_2d(X)
        return X @ A.T + X * (1.0 - X * X)

    def channel_eval(X):
        X = np.atleast_2d(X)
        return np.broadcast_to(B, X.shape)

    x2, y2 = np.meshgrid(xi, xi, indexing="ij")
    x0 = (2.0 + np.cos(2 * np.pi * x2) * np.cos(np.pi * x2)
          * np.cos(2 * np.pi * y2) * np.cos(np.pi * y2)).reshape(-1)
    return ControlledDynamics(
        name="allen_cahn_2d",
        dim=d,
        gamma=gamma,
        a=a,
        penalty=ControlPenalty(gamma=gamma),
        lin_A=A_lin,
        lin_B=B.reshape(-1, 1),
        cost_matrix=Q,
        drift=drift,
        channel_eval=channel_eval,
        f_tt_builder=lambda grids: _cubic_reaction_tts(A_lin, grids),
        channel_builder=lambda grids: ControlChannel(constant=B),
        admissible_uncontrolled=False,
        x0_default=x0,
        horizon=3.2,
        extras={"xi": xi, "full_nodes": full, "extension": E, "sigma": sigma,
                "points_per_axis": p},
    )


# ---------------------------------------------------------------------------
# Fokker-Planck chain

def _ground_potential(xi):
    xi = np.asarray(xi, dtype=float)
    return (((0.5 * xi**2 - 15.0) * xi**2 + 119.0) * xi**2 + 28.0 * xi + 50.0) / 200.0


def _ground_potential_deriv(xi):
    xi = np.asarray(xi, dtype=float)
    return ((3.0 * xi**4 - 60.0 * xi**2 + 238.0) * xi + 28.0) / 200.0


def _control_potential(xi):
    """Ramp xi/12 capped at -1/2 and 1/2, blended by cubic Hermite pieces."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    out = xi / 12.0
    out = np.where(xi <= -5.9, -0.5, out)
    out = np.where(xi >= 5.9, 0.5, out)
    for lo, hi, v_out in ((-5.9, -5.8, -0.5), (5.8, 5.9, 0.5)):
        mask = (xi > lo) & (xi < hi)
        if not np.any(mask):
            continue
        if v_out < 0:
            x0, y0, m0 = lo, v_out, 0.0
            x1, y1, m1 = hi, hi / 12.0, 1.0 / 12.0
        else:
            x0, y0, m0 = lo, lo / 12.0, 1.0 / 12.0
            x1, y1, m1 = hi, v_out, 0.0
        t = (xi[mask] - x0) / (x1 - x0)
        h = x1 - x0
        h00 = 2 * t**3 - 3 * t**2 + 1
        h10 = t**3 - 2 * t**2 + t
        h01 = -2 * t**3 + 3 * t**2
        h11 = t**3 - t**2
        out[mask] = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1
    return out


def _control_potential_deriv(xi):
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    out = np.full_like(xi, 1.0 / 12.0)
    out = np.where(np.abs(xi) >= 5.9, 0.0, out)
    for lo, hi, v_out in ((-5.9, -5.8, -0.5), (5.8, 5.9, 0.5)):
        mask = (xi > lo) & (xi < hi)
        if not np.any(mask):
            continue
        if v_out < 0:
            x0, y0, m0 = lo, v_out, 0.0
            x1, y1, m1 = hi, hi / 12.0, 1.0 / 12.0
        else:
            x0, y0, m0 = lo, lo / 12.0, 1.0 / 12.0
            x1, y1, m1 = hi, v_out, 0.0
        t = (xi[mask] - x0) / (x1 - x0)
        h = x1 - x0
        d00 = (6 * t**2 - 6 * t) / h
        d10 = 3 * t**2 - 4 * t + 1
        d01 = (-6 * t**2 + 6 * t) / h
        d11 = 3 * t**2 - 2 * t
        out[mask] = d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1
    return out


def _bernoulli(z):
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-10
    out[nz] = z[nz] / np.expm1(z[nz])
    out[~nz] = 1.0 - z[~nz] / 2.0
    return out


def _fp_operators(D: int, nu: float):
    """Drift and control operators of the finite-volume chain on (-6, 6).

    The diffusion-plus-ground-drift flux uses exponential fitting, which is
    stable at coarse resolutions where the cell Peclet number is large and
    whose discrete kernel is a positive steady state by construction.
    """
    h = 12.0 / D
    centers = -6.0 + (np.arange(D) + 0.5) * h
    faces = -6.0 + np.arange(1, D) * h
    z = _ground_potential_deriv(faces) * h / nu
    bp = _bernoulli(z)      # weight of the left cell
    bm = _bernoulli(-z)     # weight of the right cell
    L = np.zeros((D, D))
    for j in range(D - 1):
        # S_{j+1/2} = (nu/h) (bm x_{j+1} - bp x_j); dx_j/dt += S_{j+1/2}/h
        c = nu / (h * h)
        L[j, j] -= c * bp[j]
        L[j, j + 1] += c * bm[j]
        L[j + 1, j] += c * bp[j]
        L[j + 1, j + 1] -= c * bm[j]
    hp = _control_potential_deriv(faces)
    N = np.zeros((D, D))
    for j in range(D - 1):
        c = hp[j] / (2.0 * h)
        N[j, j] -= c
        N[j, j + 1] -= c
        N[j + 1, j] += c
        N[j + 1, j + 1] += c
    # discrete steady state from the zero-flux recurrence, L2-normalized
    x_inf = np.ones(D)
    for j in range(D - 1):
        x_inf[j + 1] = x_inf[j] * bp[j] / bm[j]
    x_inf /= np.sqrt(np.sum(x_inf**2) * h)
    return centers, h, L, N, x_inf


def fokker_planck(
    D: int = 12,
    nu: float = 1.0,
    sigma_shift: float = 0.2,
    gamma: float = 1e-2,
    a: float = 20.0,
) -> ControlledDynamics:
    """Shifted, projected density-deviation chain in D-1 coordinates.

    The physical density x relaxes to x_inf; the deviation y = x - x_inf is
    projected onto the zero-mass subspace along x_inf and expressed in an
    orthonormal basis Z of that subspace, giving a linear drift (with the
    destabilizing shift included) and a single affine control channel.
    """
    if D < 8:
        raise ValueError("need at least 8 cells")
    centers, h, L, N, x_inf = _fp_operators(D, nu)
    if not np.all(np.isfinite(x_inf)) or np.linalg.norm(x_inf) == 0:
        raise ValueError("steady state is not normalizable")
    d = D - 1
    # orthonormal basis of {y : sum(y) = 0}
    ones = np.ones((D, 1)) / np.sqrt(D)
    Z = scipy.linalg.null_space(ones.T)
    mass_inf = np.sum(x_inf) * h

    # oblique projection onto zero-mass vectors along x_inf
    P = np.eye(D) - np.outer(x_inf, np.ones(D)) * h / mass_inf
    F = Z.T @ P @ (L + sigma_shift * np.eye(D)) @ Z
    M = Z.T @ P @ N @ Z
    c = Z.T @ P @ N @ x_inf
    Q = h * np.eye(d)

    def drift(Xz):
        Xz = np.atleast_2d(Xz)
        return Xz @ F.T

    def channel_eval(Xz):
        Xz = np.atleast_2d(Xz)
        return Xz @ M.T + c

    def f_tts(grids):
        return [linear_to_tt(F[p], grids) for p in range(d)]

    def channel(grids):
        g_tts = []
        for p in range(d):
            lin = linear_to_tt(M[p], grids)
            const = TTTensor(
                [np.full((1, len(grids[k]), 1), c[p] if k == 0 else 1.0)
                 for k in range(d)]
            )
            g_tts.append(tt_round(lin + const, Accuracy(1e-14)))
        return ControlChannel(g_tts=tuple(g_tts))

    # right-sided density preset, mass-matched to the steady state so the
    # deviation lies in the zero-mass subspace
    x0_phys = np.exp(-2.0 * (centers - 3.8) ** 2)
    x0_phys *= mass_inf / (np.sum(x0_phys) * h)
    z0 = Z.T @ (x0_phys - x_inf)

    uniform = np.full(D, 1.0 / 12.0)
    uniform *= mass_inf / (np.sum(uniform) * h)
    z0_uniform = Z.T @ (uniform - x_inf)

    return ControlledDynamics(
        name="fokker_planck",
        dim=d,
        gamma=gamma,
        a=a,
        penalty=ControlPenalty(gamma=gamma),
        lin_A=F,
        lin_B=c.reshape(-1, 1),
        cost_matrix=Q,
        drift=drift,
        channel_eval=channel_eval,
        f_tt_builder=f_tts,
        channel_builder=channel,
        admissible_uncontrolled=False,
        x0_default=z0,
        horizon=9.2,
        extras={
            "D": D, "h": h, "centers": centers, "L": L, "N": N,
            "x_inf": x_inf, "Z": Z, "P": P, "sigma_shift": sigma_shift,
            "F_unshifted": Z.T @ P @ L @ Z, "M": M, "c": c,
            "x0_uniform": z0_uniform,
        },
    )


def fokker_planck_unshifted(model: ControlledDynamics) -> ControlledDynamics:
    """Physical (shift-free) variant used for closed-loop evaluation."""
    F0 = model.extras["F_unshifted"]
    M = model.extras["M"]
    c = model.extras["c"]

    def drift(Xz):
        Xz = np.atleast_2d(Xz)
        return Xz @ F0.T

    out = ControlledDynamics(
        name="fokker_planck_unshifted",
        dim=model.dim,
        gamma=model.gamma,
        a=model.a,
        penalty=model.penalty,
        lin_A=F0,
        lin_B=c.reshape(-1, 1),
        cost_matrix=model.cost_matrix,
        drift=drift,
        channel_eval=model.channel_eval,
        f_tt_builder=None,
        channel_builder=None,
        admissible_uncontrolled=True,
        x0_default=model.x0_default,
        horizon=model.horizon,
        extras=dict(model.extras),
    )
    return out


# ---------------------------------------------------------------------------
# Linear-quadratic instance and Riccati baseline

def lq(d: int = 6, gamma: float = 1.0, a: float = 3.0) -> ControlledDynamics:
    """Stable tridiagonal chain with a single two-node actuator."""
    A = np.diag(-2.0 * np.ones(d)) + np.diag(np.ones(d - 1), 1) + np.diag(np.ones(d - 1), -1)
    B = np.zeros(d)
    B[d // 2] = 1.0
    Q = np.eye(d)

    def drift(X):
        X = np.atleast_2d(X)
        return X @ A.T

    def channel_eval(X):
        X = np.atleast_2d(X)
        return np.broadcast_to(B, X.shape)

    return ControlledDynamics(
        name="lq",
        dim=d,
        gamma=gamma,
        a=a,
        penalty=ControlPenalty(gamma=gamma),
        lin_A=A,
        lin_B=B.reshape(-1, 1),
        cost_matrix=Q,
        drift=drift,
        channel_eval=channel_eval,
        f_tt_builder=lambda grids: [linear_to_tt(A[p], grids) for p in range(d)],
        channel_builder=lambda grids: ControlChannel(constant=B),
        admissible_uncontrolled=True,
        x0_default=np.ones(d),
        horizon=10.0,
        extras={},
    )


@dataclass(frozen=True)
class LQRSolution:
    Pi: np.ndarray
    K: np.ndarray

    def value(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("ni,ij,nj->n", X, self.Pi, X)

    def feedback(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return -(X @ self.K.reshape(-1))


def _stabilizing_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray,
                      gamma: float) -> np.ndarray:
    """Initial stabilizing gain for the Newton iteration.

    Tries the direct algebraic Riccati solve first; for stiff spectra (e.g.
    pseudospectral Laplacians) where that fails, falls back to the Bass shift
    method.
    """
    try:
        Pi = scipy.linalg.solve_continuous_are(A, B, Q, gamma * np.eye(B.shape[1]))
        K = (1.0 / gamma) * B.T @ Pi
        if np.max(np.linalg.eigvals(A - B @ K).real) < 0:
            return K
    except (np.linalg.LinAlgError, ValueError):
        pass
    beta = 1.1 * max(np.max(np.abs(np.linalg.eigvals(A).real)), 1.0)
    As = A + beta * np.eye(A.shape[0])
    X = scipy.linalg.solve_continuous_lyapunov(As, 2.0 * B @ B.T)
    try:
        K = np.linalg.solve(X, B).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("system appears unstabilizable (singular Bass Gramian)") from exc
    if np.max(np.linalg.eigvals(A - B @ K).real) >= 0:
        raise ValueError("failed to produce an initial stabilizing gain")
    return K


def solve_riccati(A: np.ndarray, B: np.ndarray, Q: np.ndarray, gamma: float,
                  tol: float = 1e-10, max_iters: int = 100) -> LQRSolution:
    """Stabilizing Riccati solution by Newton iteration on Lyapunov equations.

    Solves A' Pi + Pi A - (1/gamma) Pi B B' Pi + Q = 0 with the cost
    convention l(x) + gamma u^2, so the gain is K = (1/gamma) B' Pi.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.asarray(Q, dtype=float)
    if np.max(np.linalg.eigvals(A).real) < 0:
        K = np.zeros((B.shape[1], A.shape[0]))
    else:
        K = _stabilizing_gain(A, B, Q, gamma)
    Pi = None
    for _ in range(max_iters):
        Acl = A - B @ K
        rhs = -(Q + gamma * K.T @ K)
        Pi = scipy.linalg.solve_continuous_lyapunov(Acl.T, rhs)
        Pi = 0.5 * (Pi + Pi.T)
        K_new = (1.0 / gamma) * B.T @ Pi
        res = A.T @ Pi + Pi @ A - (1.0 / gamma) * Pi @ B @ B.T @ Pi + Q
        if np.linalg.norm(res) <= max(tol, 1e-8) * np.linalg.norm(Q):
            K = K_new
            break
        K = K_new
    else:
        raise RuntimeError("Riccati Newton iteration did not converge")
    if np.max(np.linalg.eigvals(A - (1.0 / gamma) * B @ B.T @ Pi).real) >= 0:
        raise ValueError("computed Riccati solution is not stabilizing")
    return LQRSolution(Pi=Pi, K=(1.0 / gamma) * (B.T @ Pi))


MODELS = {
    "allen_cahn_1d": allen_cahn_1d,
    "allen_cahn_2d": allen_cahn_2d,
    "fokker_planck": fokker_planck,
    "lq": lq,
}
