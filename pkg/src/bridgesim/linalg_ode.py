"""Small dense linear algebra and fixed-grid Runge-Kutta integration.

Everything here works on tiny matrices (d <= 8) and user-supplied grids; there
is no adaptive step control.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg.lapack import dpotrf


class NotSPDError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, node: Optional[int] = None):
        self.pivot = pivot
        self.node = node
        where = f" at grid node {node}" if node is not None else ""
        super().__init__(f"matrix is not SPD: non-positive pivot {pivot}{where}")


class LyapunovError(np.linalg.LinAlgError):
    pass


class IntegrationError(FloatingPointError):
    def __init__(self, node: int, message: str = "non-finite state"):
        self.node = node
        super().__init__(f"{message} at grid node {node}")


def cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NotSPDError carrying the (0-based) index of the failing pivot.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise NotSPDError(0)
    L, info = dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotSPDError(info - 1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return L


def cholesky_solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A y = rhs for SPD A via its Cholesky factor."""
    L = cholesky(A)
    return scipy.linalg.cho_solve((L, True), np.asarray(rhs, dtype=float))


def spd_inverse(A: np.ndarray) -> np.ndarray:
    L = cholesky(A)
    inv = scipy.linalg.cho_solve((L, True), np.eye(L.shape[0]))
    return 0.5 * (inv + inv.T)


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a Pade core)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return scipy.linalg.expm(A)


def solve_lyapunov(B: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Solve B L + L B' + a = 0 for L.

    For d <= 2 the vectorized (Kronecker) system is solved directly; larger
    problems go through Bartels-Stewart.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = B.shape[0]
    eig = np.linalg.eigvals(B)
    scale = max(1.0, float(np.max(np.abs(eig))))
    if np.min(np.abs(eig[:, None] + eig[None, :])) <= 1e-12 * scale:
        raise LyapunovError("Lyapunov operator is singular: eigenvalues of B sum to zero")
    if d <= 2:
        eye = np.eye(d)
        op = np.kron(eye, B) + np.kron(B, eye)
        # column-major vec so that vec(B L + L B') = op @ vec(L)
        lam = np.linalg.solve(op, -a.reshape(-1, order="F")).reshape(d, d, order="F")
    else:
        lam = scipy.linalg.solve_continuous_lyapunov(B, -a)
    return 0.5 * (lam + lam.T)


@dataclass(frozen=True)
class OdeTrajectory:
    """ODE solution tabulated on a grid, states[i] belonging to grid[i].

    When ``derivatives`` is present, off-grid evaluation uses cubic Hermite
    interpolation; otherwise piecewise-linear.
    """

    grid: np.ndarray
    states: np.ndarray
    derivatives: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.grid) != len(self.states):
            raise ValueError("one state per grid node required")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    def __len__(self) -> int:
        return len(self.grid)

    def __call__(self, t: float) -> np.ndarray:
        return self._interp(t)

    @property
    def _interp(self):
        cache = self.__dict__.get("_interp_cache")
        if cache is None:
            flat = self.states.reshape(len(self.grid), -1)
            shape = self.states.shape[1:]
            if self.derivatives is not None:
                spline = CubicHermiteSpline(
                    self.grid, flat, self.derivatives.reshape(len(self.grid), -1), axis=0
                )

                def cache(t):
                    return spline(t).reshape(shape)
            else:
                grid = self.grid

                def cache(t):
                    return np.array(
                        [np.interp(t, grid, flat[:, j]) for j in range(flat.shape[1])]
                    ).reshape(shape)

            object.__setattr__(self, "_interp_cache", cache)
        return cache


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_solve(
    f: Callable[[float, np.ndarray], np.ndarray], y0, grid
) -> OdeTrajectory:
    """Classical RK4, stepping node to node over ``grid`` (forward)."""
    grid = np.asarray(grid, dtype=float)
    y = np.asarray(y0, dtype=float)
    states = np.empty((len(grid),) + y.shape)
    states[0] = y
    for i in range(len(grid) - 1):
        y = _rk4_step(f, grid[i], y, grid[i + 1] - grid[i])
        if not np.all(np.isfinite(y)):
            raise IntegrationError(i + 1)
        states[i + 1] = y
    return OdeTrajectory(grid, states)


def rk_backward(
    f: Callable[[float, np.ndarray], np.ndarray], yT, grid
) -> OdeTrajectory:
    """RK4 from the terminal value at grid[-1] down to grid[0].

    The result is indexed by the forward grid.
    """
    grid = np.asarray(grid, dtype=float)
    y = np.asarray(yT, dtype=float)
    states = np.empty((len(grid),) + y.shape)
    states[-1] = y
    for i in range(len(grid) - 1, 0, -1):
        y = _rk4_step(f, grid[i], y, grid[i - 1] - grid[i])
        if not np.all(np.isfinite(y)):
            raise IntegrationError(i - 1)
        states[i - 1] = y
    return OdeTrajectory(grid, states)
