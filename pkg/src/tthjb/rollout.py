"""Closed-loop trajectory rollouts, cost accounting, and controller comparison."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .assembly import penalty_cost
from .models import ControlledDynamics

__all__ = [
    "Trajectory",
    "rollout",
    "interpolate_controller",
    "compare",
    "trajectory_to_csv",
    "comparison_to_json",
]

log = logging.getLogger(__name__)


class _NonFiniteDynamics(RuntimeError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # (steps, d)
    controls: np.ndarray
    running_cost: np.ndarray
    total_cost: float
    failed: bool = False
    message: str = ""

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def rollout(model: ControlledDynamics, controller, x0, T: float,
            tol: float = 1e-8, method: str = "RK45",
            max_points: int = 2001) -> Trajectory:
    """Integrate dx/dt = f(x) + g(x) u(x) under a feedback law.

    controller is a map x -> scalar u, or None for the uncontrolled system.
    Controls and running costs are recorded on a uniform grid of at most
    max_points times; the total cost is their trapezoid quadrature.  On
    integrator failure the partial trajectory is returned with failed=True.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != model.dim:
        raise ValueError(f"x0 has size {x0.size}, model dimension is {model.dim}")
    if np.max(np.abs(x0)) > model.a:
        warnings.warn("initial state lies outside the value-function domain",
                      stacklevel=2)
    ctrl = (lambda x: 0.0) if controller is None else controller

    def rhs(t, x):
        u = ctrl(x)
        dx = (model.drift(x.reshape(1, -1))[0]
              + model.channel_eval(x.reshape(1, -1))[0] * u)
        # NaN poisons the integrator's step-size control (NaN error norm ->
        # NaN step -> infinite loop), so fail hard instead
        if not np.all(np.isfinite(dx)):
            raise _NonFiniteDynamics(f"non-finite dynamics at t={t:.3g}")
        return dx

    try:
        sol = solve_ivp(rhs, (0.0, T), x0, method=method, rtol=tol,
                        atol=tol * 1e-2, dense_output=True)
    except _NonFiniteDynamics as exc:
        log.warning("rollout aborted: %s", exc)
        return Trajectory(times=np.zeros(1), states=x0.reshape(1, -1),
                          controls=np.full(1, np.nan),
                          running_cost=np.full(1, np.nan),
                          total_cost=float("nan"), failed=True,
                          message=str(exc))
    t_end = sol.t[-1]
    ts = np.linspace(0.0, t_end, max_points)
    X = sol.sol(ts).T
    us = np.array([ctrl(X[i]) for i in range(len(ts))], dtype=float)
    cost = model.state_cost(X) + penalty_cost(us, model.penalty)
    total = float(np.trapezoid(cost, ts))
    failed = not sol.success or not np.all(np.isfinite(X))
    if failed:
        log.warning("rollout stopped at t=%.3g: %s", t_end, sol.message)
    return Trajectory(times=ts, states=X, controls=us, running_cost=cost,
                      total_cost=total, failed=failed,
                      message="" if sol.success else sol.message)


def interpolate_controller(V, coarse_model: ControlledDynamics,
                           fine_model: ControlledDynamics):
    """Feedback for a finer discretization of the same underlying dynamics.

    The fine nodal state is resampled onto the coarse interior nodes by
    barycentric interpolation over the full node set (boundary values come
    from each model's Neumann extension), and the coarse feedback is applied.
    """
    from .policy import feedback as coarse_feedback

    for key in ("extension", "full_nodes"):
        if key not in coarse_model.extras or key not in fine_model.extras:
            raise ValueError("both models must carry Chebyshev node metadata")
    if coarse_model.name != fine_model.name:
        raise ValueError("models discretize different dynamics")
    Ef = fine_model.extras["extension"]
    fine_full = fine_model.extras["full_nodes"]
    coarse_xi = coarse_model.extras["xi"]
    w = (-1.0) ** np.arange(fine_full.size)
    w[0] *= 0.5
    w[-1] *= 0.5
    # barycentric interpolation matrix from fine full nodes to coarse interior
    P = np.empty((coarse_xi.size, fine_full.size))
    for i, x in enumerate(coarse_xi):
        diff = x - fine_full
        hit = np.isclose(diff, 0.0)
        if np.any(hit):
            P[i] = hit.astype(float)
        else:
            r = w / diff
            P[i] = r / np.sum(r)
    R = P @ Ef   # fine interior values -> coarse interior values

    def controller(x):
        return coarse_feedback(V, coarse_model, R @ np.asarray(x, dtype=float))

    return controller


def _decay_rate(traj: Trajectory) -> float:
    """Least-squares slope of log running cost over the last 60% of the run."""
    t0 = traj.times[-1] * 0.4
    sel = (traj.times >= t0) & (traj.running_cost > 0)
    if np.count_nonzero(sel) < 2:
        return np.nan
    t = traj.times[sel]
    y = np.log(traj.running_cost[sel])
    slope = np.polyfit(t, y, 1)[0]
    return float(slope)


def compare(model: ControlledDynamics, controllers: dict, x0, T: float,
            tol: float = 1e-8, method: str = "RK45") -> dict:
    """Roll out each named controller; failures are isolated per controller."""
    report = {}
    for name, ctrl in controllers.items():
        try:
            traj = rollout(model, ctrl, x0, T, tol=tol, method=method)
            report[name] = {
                "total_cost": traj.total_cost,
                "decay_rate": _decay_rate(traj),
                "steps": int(traj.times.size),
                "failed": traj.failed,
            }
        except Exception as exc:  # noqa: BLE001 - isolate per controller
            log.warning("controller %s failed: %s", name, exc)
            report[name] = {"total_cost": np.nan, "decay_rate": np.nan,
                            "steps": 0, "failed": True}
    return report


def trajectory_to_csv(traj: Trajectory, path, include_states: bool = False) -> None:
    d = traj.states.shape[1]
    cols = ["t"] + ([f"x_{k + 1}" for k in range(d)] if include_states else []) \
        + ["u", "running_cost"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(traj.times.size):
            row = [traj.times[i]]
            if include_states:
                row.extend(traj.states[i])
            row.extend([traj.controls[i], traj.running_cost[i]])
            writer.writerow(row)


def comparison_to_json(report: dict, path) -> None:
    def clean(x):
        return None if isinstance(x, float) and not np.isfinite(x) else x

    out = {name: {k: clean(v) for k, v in entry.items()}
           for name, entry in report.items()}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
