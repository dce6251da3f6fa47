"""Diffusion models, time grids, Wiener increments and Euler-Maruyama.

State arrays are batched: a single state has shape ``(d,)`` and a batch of
paths at one time has shape ``(n, d)``.  Model callables must accept either
and broadcast over leading axes.

Gaussian draws come from numpy's ``Generator.standard_normal`` (Ziggurat) on
PCG64 bit generators.  Path ``k`` of a seeded batch uses the ``k``-th child of
``SeedSequence(seed)``, so its increments do not depend on the batch size.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg_ode import IntegrationError, OdeTrajectory, rk4_solve

Drift = Callable[[float, np.ndarray], np.ndarray]
Dispersion = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionModel:
    """dX = b(t, X) dt + sigma(t, X) dW with X in R^d and W in R^d'."""

    dim: int
    noise_dim: int
    drift: Drift
    dispersion: Dispersion
    jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def b(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float)

    def sigma(self, t, x):
        return np.asarray(self.dispersion(t, x), dtype=float)

    def a(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def V(self, t, x):
        """Drift Jacobian, by central differences if none was supplied."""
        if self.jacobian is not None:
            return np.asarray(self.jacobian(t, x), dtype=float)
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(self.dim):
            step = 1e-6 * np.maximum(1.0, np.abs(x[..., j]))
            e = np.zeros(x.shape)
            e[..., j] = step
            cols.append((self.b(t, x + e) - self.b(t, x - e)) / (2 * step)[..., None])
        return np.stack(cols, axis=-1)


def linear_model(B, beta, sigma, name: str = "linear") -> DiffusionModel:
    """Model with drift B x + beta and constant dispersion."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d, dp = sigma.shape

    def drift(t, x):
        return np.asarray(x) @ B.T + beta

    def dispersion(t, x):
        return np.broadcast_to(sigma, np.shape(x)[:-1] + (d, dp))

    def jac(t, x):
        return np.broadcast_to(B, np.shape(x)[:-1] + (d, d))

    return DiffusionModel(d, dp, drift, dispersion, jac, name)


@dataclass(frozen=True)
class BridgeSpec:
    u: np.ndarray
    v: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same dimension")

    @property
    def dim(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise ValueError("grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, n_steps: Optional[int] = None, h: Optional[float] = None):
        if n_steps is None:
            if h is None:
                raise ValueError("give n_steps or h")
            n_steps = max(1, int(round(T / h)))
        nodes = np.linspace(0.0, T, n_steps + 1)
        nodes[-1] = T
        return cls(nodes)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_steps(self) -> int:
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class WienerIncrements:
    """Increments of shape (N, d') for one path or (n, N, d') for a batch."""

    increments: np.ndarray
    seed: Optional[int] = None
    path_ids: Optional[np.ndarray] = None

    @property
    def batched(self) -> bool:
        return self.increments.ndim == 3


def sample_wiener(
    grid: TimeGrid, noise_dim: int, seed: int, n_paths: Optional[int] = None,
    first_path: int = 0,
) -> WienerIncrements:
    """Draw Brownian increments on ``grid``.

    With ``n_paths`` set, path ids ``first_path .. first_path + n_paths - 1``
    are drawn, each from its own spawned generator.
    """
    if noise_dim < 1:
        raise ValueError("noise dimension must be >= 1")
    sd = np.sqrt(grid.steps)[:, None]
    if n_paths is None:
        z = np.random.default_rng(seed).standard_normal((grid.n_steps, noise_dim))
        return WienerIncrements(z * sd, seed)
    ids = np.arange(first_path, first_path + n_paths)
    out = np.empty((n_paths, grid.n_steps, noise_dim))
    for k, pid in enumerate(ids):
        out[k] = path_rng(seed, pid).standard_normal((grid.n_steps, noise_dim))
    return WienerIncrements(out * sd, seed, ids)


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    """Generator of path ``path_id``; equals child ``path_id`` of SeedSequence(seed).spawn."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(path_id),)))


@dataclass(frozen=True)
class SamplePath:
    """States on a grid: shape (N+1, d), or (n, N+1, d) for a batch."""

    grid: TimeGrid
    states: np.ndarray
    path_ids: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def batched(self) -> bool:
        return self.states.ndim == 3

    @property
    def n_paths(self) -> int:
        return self.states.shape[0] if self.batched else 1

    def __getitem__(self, k) -> "SamplePath":
        if not self.batched:
            raise TypeError("not a batch")
        ids = None if self.path_ids is None else self.path_ids[k]
        return SamplePath(self.grid, self.states[k], ids)

    def as_batch(self) -> np.ndarray:
        return self.states if self.batched else self.states[None]

    def at(self, t: float) -> np.ndarray:
        """States at the grid node nearest to t."""
        i = int(np.argmin(np.abs(self.grid.nodes - t)))
        return self.states[..., i, :]


def _as_dw(dW) -> np.ndarray:
    return dW.increments if isinstance(dW, WienerIncrements) else np.asarray(dW, dtype=float)


def euler_maruyama(drift: Drift, dispersion: Dispersion, x0, grid: TimeGrid, dW) -> SamplePath:
    """X[i+1] = X[i] + drift(t_i, X[i]) h_i + dispersion(t_i, X[i]) dW_i."""
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
    t, h = grid.nodes, grid.steps
    for i in range(grid.n_steps):
        x = x + drift(t[i], x) * h[i] + _apply(dispersion(t[i], x), inc[i])
        if not np.all(np.isfinite(x)):
            raise IntegrationError(i + 1)
        states[i + 1] = x
    if batch:
        states = np.swapaxes(states, 0, 1)
    return SamplePath(grid, states, getattr(dW, "path_ids", None))


def _apply(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mat, vec)


def solve_flow(model: DiffusionModel, u, grid) -> OdeTrajectory:
    """Deterministic flow dx/dt = b(t, x), x(0) = u, by RK4 on the grid.

    The trajectory carries b(t_i, x_i) so off-grid values use Hermite
    interpolation.
    """
    nodes = grid.nodes if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    traj = rk4_solve(model.b, np.asarray(u, dtype=float), nodes)
    derivs = np.array([model.b(t, x) for t, x in zip(nodes, traj.states)])
    return OdeTrajectory(traj.grid, traj.states, derivs)


def write_paths_csv(path: SamplePath, fh, path_ids: Optional[Sequence[int]] = None,
                    header: bool = True) -> None:
    """Rows ``path_id,t,x_0,...,x_{d-1}`` with 17 significant digits."""
    states = path.as_batch()
    if path_ids is None:
        path_ids = path.path_ids if path.path_ids is not None else range(states.shape[0])
    d = states.shape[-1]
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(["path_id", "t"] + [f"x_{j}" for j in range(d)])
    for pid, xs in zip(path_ids, states):
        for t, x in zip(path.grid.nodes, xs):
            w.writerow([int(pid), repr(float(t))] + [repr(float(c)) for c in x])


def read_paths_csv(fh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of write_paths_csv: (path_ids, grid, states[n, N+1, d])."""
    rows = list(csv.reader(fh))
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    ids = body[:, 0].astype(int)
    uniq = list(dict.fromkeys(ids))
    n = len(uniq)
    per = len(body) // n
    grid = body[:per, 1]
    states = body[:, 2:].reshape(n, per, -1)
    return np.array(uniq), grid, states
