"""Bridge proposal simulators.

Every simulator takes ``(model, spec, grid, dW)`` plus its own configuration
and returns a SamplePath that ends at ``spec.v`` exactly: the last Euler step
is replaced by assignment, so drifts carrying 1/(T - t) are only evaluated at
nodes i < N.  Drifts use the left endpoint of each interval.

For the residual family the deterministic flow enters through exact flow
increments x(t_{i+1}) - x(t_i) rather than an Euler step of dx = b(t, x) dt,
which keeps the residual and direct forms (and the adjusted-residual /
guided pairs) algebraically identical on the grid.
"""
from __future__ import annotations

import enum
from typing import Callable, Optional

import numpy as np

from .auxiliary import BackwardTable, rtilde
from .linalg_ode import IntegrationError, OdeTrajectory, rk4_solve, rk_backward
from .sde_core import BridgeSpec, DiffusionModel, SamplePath, TimeGrid, _as_dw, solve_flow


class ProposalKind(str, enum.Enum):
    DELYON_HU_0 = "delyon-hu-0"
    DELYON_HU_1 = "delyon-hu-1"
    RESIDUAL = "residual"
    LNA_RESIDUAL = "lna-residual"
    GUIDED = "guided"
    ADJ_RESIDUAL_V1 = "adj-residual-v1"
    ADJ_RESIDUAL_V2 = "adj-residual-v2"


def kappa(spec: BridgeSpec, t: float, x: np.ndarray) -> np.ndarray:
    """Pulling term (v - x) / (T - t)."""
    return (spec.v - x) / (spec.T - t)


def _mv(M, x):
    return np.einsum("...ij,...j->...i", M, x)


def _run(step: Callable, x0, grid: TimeGrid, dW, end) -> SamplePath:
    """Drive ``x <- step(i, x, dw_i)`` for i < N - 1 and pin the last node."""
    inc = _as_dw(dW)
    if inc.shape[-2] != grid.n_steps:
        raise ValueError("increments do not match the grid")
    batch = inc.ndim == 3
    x = np.asarray(x0, dtype=float)
    if batch:
        x = np.broadcast_to(x, (inc.shape[0], x.shape[-1])).copy()
        inc = np.swapaxes(inc, 0, 1)
    states = np.empty((grid.n_steps + 1,) + x.shape)
    states[0] = x
    for i in range(grid.n_steps - 1):
        x = step(i, x, inc[i])
        if not np.all(np.isfinite(x)):
            raise IntegrationError(i + 1)
        states[i + 1] = x
    states[-1] = end
    if batch:
        states = np.swapaxes(states, 0, 1)
    return SamplePath(grid, states, getattr(dW, "path_ids", None))


def delyon_hu(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW, lam: int = 0) -> SamplePath:
    """Euler path of dX = (lam b + (v - X)/(T - t)) dt + sigma dW, lam in {0, 1}."""
    if lam not in (0, 1):
        raise ValueError("lambda must be 0 or 1")
    t, h = grid.nodes, grid.steps

    def step(i, x, dw):
        drift = kappa(spec, t[i], x)
        if lam:
            drift = drift + model.b(t[i], x)
        return x + drift * h[i] + _mv(model.sigma(t[i], x), dw)

    return _run(step, spec.u, grid, dW, spec.v)


def _flow_states(model, spec, grid, flow: Optional[OdeTrajectory]) -> np.ndarray:
    if flow is None:
        flow = solve_flow(model, spec.u, grid)
    if len(flow.grid) != len(grid) or not np.allclose(flow.grid, grid.nodes, rtol=0, atol=1e-14):
        raise ValueError("flow must be tabulated on the simulation grid")
    return flow.states


def residual(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW,
             flow: Optional[OdeTrajectory] = None, form: str = "residual") -> SamplePath:
    """Flow plus residual: X = x(t) + C with C pulled to v - x(T).

    ``form="residual"`` simulates C and adds the flow; ``form="direct"``
    steps X itself.  Both give the same path up to rounding.
    """
    xs = _flow_states(model, spec, grid, flow)
    t, h = grid.nodes, grid.steps
    target = spec.v - xs[-1]
    if form == "residual":
        def step(i, c, dw):
            return (c + (target - c) / (spec.T - t[i]) * h[i]
                    + _mv(model.sigma(t[i], xs[i] + c), dw))

        path = _run(step, np.zeros(spec.dim), grid, dW, target)
        states = path.states + xs
        states[..., -1, :] = spec.v
        return SamplePath(grid, states, path.path_ids)
    if form == "direct":
        def step(i, x, dw):
            pull = (spec.v - x - (xs[-1] - xs[i])) / (spec.T - t[i])
            return x + (xs[i + 1] - xs[i]) + pull * h[i] + _mv(model.sigma(t[i], x), dw)

        return _run(step, spec.u, grid, dW, spec.v)
    raise ValueError(f"unknown form {form!r}")


def lna_conditional_mean(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid,
                         flow: Optional[OdeTrajectory] = None) -> np.ndarray:
    """z(t) = x(t) + E[R_t | R_T = v - x(T)] for the linearised residual

        dR = V(t, x(t)) R dt + sigma(t, x(t)) dW,  R_0 = 0.

    Uses Cov(R_t, R_T) = P(t) Phi(T, t)' with P from the forward Lyapunov ODE
    and Phi(T, t) integrated backwards from the identity.
    """
    if flow is None:
        flow = solve_flow(model, spec.u, grid)
    d = spec.dim

    def dP(s, P):
        x = flow(s)
        V = model.V(s, x)
        return V @ P + P @ V.T + model.a(s, x)

    def dPhi(s, F):
        return -F @ model.V(s, flow(s))

    P = rk4_solve(dP, np.zeros((d, d)), grid.nodes).states
    Phi = rk_backward(dPhi, np.eye(d), grid.nodes).states
    Q = 0.5 * (P[-1] + P[-1].T)
    try:
        gain = np.linalg.solve(Q, spec.v - flow.states[-1])
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("residual covariance at T is singular") from err
    rho = np.einsum("nij,nkj,k->ni", P, Phi, gain)
    z = flow.states + rho
    z[-1] = spec.v
    return z


def lna_residual(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW,
                 flow: Optional[OdeTrajectory] = None) -> SamplePath:
    """X = z(t) + C where z is the LNA bridge mean and C a zero-to-zero bridge."""
    z = lna_conditional_mean(model, spec, grid, flow)
    t, h = grid.nodes, grid.steps

    def step(i, c, dw):
        return c - c / (spec.T - t[i]) * h[i] + _mv(model.sigma(t[i], z[i] + c), dw)

    path = _run(step, np.zeros(spec.dim), grid, dW, 0.0)
    states = path.states + z
    states[..., -1, :] = spec.v
    return SamplePath(grid, states, path.path_ids)


def guided(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW,
           table: BackwardTable) -> SamplePath:
    """Euler path of dX = (b + a r~) dt + sigma dW with r~ from ``table``."""
    if table.grid.n_steps != grid.n_steps:
        raise ValueError("table was built on a different grid")
    t, h = grid.nodes, grid.steps

    def step(i, x, dw):
        s = model.sigma(t[i], x)
        a = s @ np.swapaxes(s, -1, -2)
        drift = model.b(t[i], x) + _mv(a, rtilde(table, i, x))
        return x + drift * h[i] + _mv(s, dw)

    return _run(step, spec.u, grid, dW, spec.v)


def _adjusted(model, spec, grid, dW, flow, scale_pull: bool) -> SamplePath:
    xs = _flow_states(model, spec, grid, flow)
    t, h = grid.nodes, grid.steps
    target = spec.v - xs[-1]
    a_end_inv = np.linalg.inv(model.a(spec.T, spec.v))

    def step(i, c, dw):
        x = xs[i] + c
        s = model.sigma(t[i], x)
        pull = (target - c) / (spec.T - t[i])
        if scale_pull:
            a = s @ np.swapaxes(s, -1, -2)
            pull = _mv(a @ a_end_inv, pull)
        # b(t, x(t)) dt integrated exactly along the flow
        return c + model.b(t[i], x) * h[i] - (xs[i + 1] - xs[i]) + pull * h[i] + _mv(s, dw)

    path = _run(step, np.zeros(spec.dim), grid, dW, target)
    states = path.states + xs
    states[..., -1, :] = spec.v
    return SamplePath(grid, states, path.path_ids)


def adjusted_residual_v1(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW,
                         flow: Optional[OdeTrajectory] = None) -> SamplePath:
    """Residual proposal with the drift correction b(x + C) - b(x); constant sigma only."""
    if not np.allclose(model.sigma(0.0, spec.u), model.sigma(spec.T, spec.v), rtol=0, atol=1e-12):
        raise ValueError("adjusted_residual_v1 needs constant sigma; use adjusted_residual_v2")
    return _adjusted(model, spec, grid, dW, flow, scale_pull=False)


def adjusted_residual_v2(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, dW,
                         flow: Optional[OdeTrajectory] = None) -> SamplePath:
    """As v1 with the pulling term premultiplied by a(t, x + C) a(T, v)^{-1}."""
    return _adjusted(model, spec, grid, dW, flow, scale_pull=True)
