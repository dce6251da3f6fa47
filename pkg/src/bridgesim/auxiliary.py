"""Linear auxiliary processes and the backward quantities that guide proposals.

The auxiliary is dX~ = (B(t) X~ + beta(t)) dt + sigma~(t) dW.  For a bridge to
``v`` at ``T`` the guiding term is r~(t, x) = H(t) (v(t) - x) where
H = K^{-1} and K, v solve

    dK/dt = B K + K B' - a~,   K(T) = 0
    dv/dt = B v + beta,        v(T) = v

backwards in time.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linalg_ode import (
    LyapunovError,
    NotSPDError,
    OdeTrajectory,
    cholesky,
    expm,
    rk4_solve,
    rk_backward,
    solve_lyapunov,
    spd_inverse,
)
from .sde_core import BridgeSpec, DiffusionModel, TimeGrid

MatrixFn = Callable[[float], np.ndarray]


class TableError(ValueError):
    pass


def _const(value) -> MatrixFn:
    value = np.array(value, dtype=float)
    value.setflags(write=False)
    return lambda t: value


@dataclass(frozen=True)
class LinearAuxiliary:
    """Coefficients of dX~ = (B(t) X~ + beta(t)) dt + sigma(t) dW.

    ``homogeneous`` asserts all three coefficients are time-constant.
    ``simple`` asserts B == 0 and sigma constant (beta may vary); together with
    ``beta_integral(t) = int_t^T beta(s) ds`` it admits exact tables.
    """

    B: MatrixFn
    beta: MatrixFn
    sigma: MatrixFn
    homogeneous: bool = False
    simple: bool = False
    beta_integral: Optional[Callable[[float], np.ndarray]] = None

    @classmethod
    def constant(cls, B, beta, sigma) -> "LinearAuxiliary":
        B = np.atleast_2d(np.asarray(B, dtype=float))
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        return cls(_const(B), _const(beta), _const(sigma), homogeneous=True,
                   simple=not np.any(B))

    @classmethod
    def brownian(cls, d: int, sigma=None) -> "LinearAuxiliary":
        sigma = np.eye(d) if sigma is None else sigma
        return cls.constant(np.zeros((d, d)), np.zeros(d), sigma)

    def a(self, t: float) -> np.ndarray:
        s = self.sigma(t)
        return s @ s.T

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.B(t).T + self.beta(t)

    @property
    def dim(self) -> int:
        return self.B(0.0).shape[0]


@dataclass(frozen=True)
class BackwardTable:
    """K, H = K^{-1} and v(t) per grid node.  H is only stored for i < N."""

    grid: TimeGrid
    K: np.ndarray
    H: np.ndarray
    v: np.ndarray
    spec: BridgeSpec

    @classmethod
    def from_K_v(cls, grid: TimeGrid, K: np.ndarray, v: np.ndarray, spec: BridgeSpec):
        K = 0.5 * (K + np.swapaxes(K, -1, -2))
        K[-1] = 0.0
        v = np.array(v, dtype=float)
        v[-1] = spec.v
        H = np.empty_like(K[:-1])
        for i in range(grid.n_steps):
            try:
                H[i] = spd_inverse(K[i])
            except NotSPDError as err:
                raise TableError(
                    f"K(t_{i}) is not SPD (pivot {err.pivot}); the auxiliary "
                    "diffusion may be degenerate or the grid too coarse near T"
                ) from err
        return cls(grid, K, H, v, spec)


def backward_tables_ode(aux: LinearAuxiliary, grid: TimeGrid, spec: BridgeSpec) -> BackwardTable:
    """Integrate the K and v equations backwards with RK4 on ``grid``."""
    d = spec.dim

    def dK(t, K):
        B = aux.B(t)
        return B @ K + K @ B.T - aux.a(t)

    def dv(t, v):
        return aux.B(t) @ v + aux.beta(t)

    K = rk_backward(dK, np.zeros((d, d)), grid.nodes).states
    v = rk_backward(dv, spec.v, grid.nodes).states
    return BackwardTable.from_K_v(grid, K, v, spec)


def backward_tables_closed(aux: LinearAuxiliary, grid: TimeGrid, spec: BridgeSpec) -> BackwardTable:
    """Closed-form tables via a Lyapunov solve and matrix exponentials.

    Requires a homogeneous auxiliary, or a ``simple`` one (B == 0) carrying
    ``beta_integral``.
    """
    T = spec.T
    tau = T - grid.nodes
    if aux.simple and (aux.homogeneous or aux.beta_integral is not None):
        a = aux.a(0.0)
        K = tau[:, None, None] * a
        if aux.beta_integral is not None:
            v = spec.v - np.array([aux.beta_integral(t) for t in grid.nodes])
        else:
            v = spec.v - tau[:, None] * aux.beta(0.0)
        return BackwardTable.from_K_v(grid, K, v, spec)
    if not aux.homogeneous:
        raise TableError("closed form needs a homogeneous auxiliary; use backward_tables_ode")
    B, beta, a = aux.B(0.0), aux.beta(0.0), aux.a(0.0)
    try:
        lam = solve_lyapunov(B, a)
    except LyapunovError as err:
        raise TableError(f"{err}; use backward_tables_ode") from err
    if not np.any(beta):
        mu = np.zeros_like(beta)
    else:
        try:
            mu = np.linalg.solve(B, -beta)
        except np.linalg.LinAlgError as err:
            raise TableError("B is singular with beta != 0; use backward_tables_ode") from err
    K = np.empty((len(grid), spec.dim, spec.dim))
    v = np.empty((len(grid), spec.dim))
    for i, s in enumerate(tau):
        E = expm(-s * B)
        K[i] = E @ lam @ E.T - lam
        v[i] = E @ (spec.v - mu) + mu
    return BackwardTable.from_K_v(grid, K, v, spec)


def rtilde(table: BackwardTable, i: int, x: np.ndarray) -> np.ndarray:
    """H(t_i) (v(t_i) - x); x may be a batch of states."""
    if not 0 <= i < table.grid.n_steps:
        raise IndexError(f"r~ is only defined at nodes 0..{table.grid.n_steps - 1}, got {i}")
    return (table.v[i] - np.asarray(x)) @ table.H[i].T


@dataclass(frozen=True)
class ForwardMoments:
    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


def forward_moments(aux: LinearAuxiliary, u, grid) -> ForwardMoments:
    """Mean and covariance of X~_t started from u at grid[0]."""
    nodes = grid.nodes if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = u.shape[0]
    m = rk4_solve(lambda t, m: aux.B(t) @ m + aux.beta(t), u, nodes).states

    def dQ(t, Q):
        B = aux.B(t)
        return B @ Q + Q @ B.T + aux.a(t)

    Q = rk4_solve(dQ, np.zeros((d, d)), nodes).states
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    return ForwardMoments(nodes, m, Q)


def log_normal_density(x, mean, cov) -> float:
    """log phi(x; mean, cov) for a multivariate normal."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    L = cholesky(np.atleast_2d(cov))
    z = np.linalg.solve(L, x - np.atleast_1d(mean))
    d = x.shape[0]
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * d * np.log(2 * np.pi))


def log_ptilde_endpoint(aux: LinearAuxiliary, spec: BridgeSpec, grid) -> float:
    """log of the auxiliary transition density from (0, u) to (T, v)."""
    fm = forward_moments(aux, spec.u, grid)
    try:
        return log_normal_density(spec.v, fm.mean[-1], fm.cov[-1])
    except NotSPDError as err:
        raise TableError("auxiliary covariance at T is singular") from err


class SigmaPolicy(str, enum.Enum):
    CONSTANT_END = "constant-end"
    INTERPOLATE = "interpolate"


def sigma_tilde_policy(
    model: DiffusionModel,
    spec: BridgeSpec,
    policy: SigmaPolicy | str = SigmaPolicy.CONSTANT_END,
    t0: Optional[float] = None,
    flow: Optional[OdeTrajectory] = None,
) -> MatrixFn:
    """Auxiliary dispersion with sigma~(T) = sigma(T, v) exactly.

    INTERPOLATE follows sigma(t, x(t)) up to ``t0`` and then moves linearly to
    sigma(T, v); it needs the flow and an explicit 0 < t0 < T.
    """
    policy = SigmaPolicy(policy)
    s_end = model.sigma(spec.T, spec.v)
    if policy is SigmaPolicy.CONSTANT_END:
        return _const(s_end)
    if t0 is None or not 0 < t0 < spec.T:
        raise ValueError(f"interpolate policy needs 0 < t0 < T, got t0={t0}")
    if flow is None:
        raise ValueError("interpolate policy needs the deterministic flow")
    s0 = model.sigma(t0, flow(t0))
    T = spec.T

    def sigma(t):
        if t <= t0:
            return model.sigma(t, flow(t))
        if t == T:
            return s_end
        return (s_end - s0) / (T - t0) * (t - t0) + s0

    return sigma


def lna_auxiliary(model: DiffusionModel, flow: OdeTrajectory, sigma: MatrixFn) -> LinearAuxiliary:
    """Linearise the drift around the flow: B~ = V(t, x(t)), beta~ = b - V x."""

    def B(t):
        return model.V(t, flow(t))

    def beta(t):
        x = flow(t)
        return model.b(t, x) - model.V(t, x) @ x

    return LinearAuxiliary(B, beta, sigma)


def simple_auxiliary(model: DiffusionModel, spec: BridgeSpec, flow: OdeTrajectory) -> LinearAuxiliary:
    """B~ = 0, beta~(t) = b(t, x(t)), sigma~ = sigma(T, v).

    Since beta~ is the flow's derivative, int_t^T beta~ = x(T) - x(t) exactly.
    """
    xT = flow.states[-1]
    nodes = flow.grid
    d = spec.dim

    def beta(t):
        return model.b(t, flow(t))

    def beta_integral(t):
        i = np.searchsorted(nodes, t)
        x = flow.states[i] if i < len(nodes) and nodes[i] == t else flow(t)
        return xT - x

    return LinearAuxiliary(
        _const(np.zeros((d, d))), beta, _const(model.sigma(spec.T, spec.v)),
        homogeneous=False, simple=True, beta_integral=beta_integral,
    )


def write_table_csv(table: BackwardTable, fh) -> None:
    """Rows ``t,K_00,...,v_0,...``; H is derivable and not written."""
    d = table.spec.dim
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"K_{i}{j}" for i in range(d) for j in range(d)]
               + [f"v_{i}" for i in range(d)])
    for t, K, v in zip(table.grid.nodes, table.K, table.v):
        w.writerow([repr(float(t))] + [repr(float(c)) for c in K.ravel()]
                   + [repr(float(c)) for c in v])
