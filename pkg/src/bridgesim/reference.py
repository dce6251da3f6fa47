"""Ground-truth oracles and the built-in example models."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .proposals import _mv, _run
from .sde_core import (
    BridgeSpec,
    DiffusionModel,
    SamplePath,
    TimeGrid,
    WienerIncrements,
    _apply,
    euler_maruyama,
    path_rng,
)


class RejectionError(RuntimeError):
    pass


class ExampleTag(str, enum.Enum):
    OU = "ou"
    SINE = "sine"
    OU_SINE = "ou-sine"


def _constant_dispersion(sigma: float):
    s = np.array([[float(sigma)]])

    def dispersion(t, x):
        return np.broadcast_to(s, np.shape(x)[:-1] + (1, 1))

    return dispersion


def ou_model(alpha: float = 2.0, sigma: float = 0.1) -> DiffusionModel:
    def drift(t, x):
        return -alpha * np.asarray(x)

    def jac(t, x):
        return np.full(np.shape(x)[:-1] + (1, 1), -alpha)

    return DiffusionModel(1, 1, drift, _constant_dispersion(sigma), jac, "ou")


def sine_model(sigma: float = 0.5) -> DiffusionModel:
    def drift(t, x):
        return -np.sin(2 * np.pi * np.asarray(x))

    def jac(t, x):
        return (-2 * np.pi * np.cos(2 * np.pi * np.asarray(x)))[..., None]

    return DiffusionModel(1, 1, drift, _constant_dispersion(sigma), jac, "sine")


def ou_sine_model(sigma: float = 0.15) -> DiffusionModel:
    def drift(t, x):
        x = np.asarray(x)
        return -0.5 * x - np.sin(2 * np.pi * x)

    def jac(t, x):
        return (-0.5 - 2 * np.pi * np.cos(2 * np.pi * np.asarray(x)))[..., None]

    return DiffusionModel(1, 1, drift, _constant_dispersion(sigma), jac, "ou-sine")


@dataclass(frozen=True)
class ExampleModel:
    """One of the three scalar test problems with its default bridge."""

    tag: ExampleTag
    sigma: float
    alpha: float = 2.0
    u: float = 0.0
    v: float = 1.0
    T: float = 1.0

    def model(self) -> DiffusionModel:
        if self.tag is ExampleTag.OU:
            return ou_model(self.alpha, self.sigma)
        if self.tag is ExampleTag.SINE:
            return sine_model(self.sigma)
        return ou_sine_model(self.sigma)

    def spec(self) -> BridgeSpec:
        return BridgeSpec([self.u], [self.v], self.T)


EXAMPLES = {
    ExampleTag.OU: ExampleModel(ExampleTag.OU, sigma=0.1, alpha=2.0, u=0.1, v=1.0, T=3.0),
    # x(t) = 0 from u = 0; endpoint and noise level are our choice
    ExampleTag.SINE: ExampleModel(ExampleTag.SINE, sigma=0.5, u=0.0, v=1.0, T=1.0),
    ExampleTag.OU_SINE: ExampleModel(ExampleTag.OU_SINE, sigma=0.15, u=5.0, v=2.0, T=5.0),
}


def ou_bridge_exact(alpha: float, sigma: float, spec: BridgeSpec, grid: TimeGrid, dW) -> SamplePath:
    """Euler path of the OU bridge

        dX = -alpha X dt + 2 alpha (e^{alpha (T-t)} v - X) / (e^{2 alpha (T-t)} - 1) dt + sigma dW.
    """
    if alpha == 0:
        raise ValueError("alpha must be nonzero; use delyon_hu(lam=0) for Brownian bridges")
    t, h = grid.nodes, grid.steps
    s = np.atleast_2d(float(sigma)) if np.ndim(sigma) == 0 else np.asarray(sigma)
    T, v = spec.T, spec.v

    def step(i, x, dw):
        tau = T - t[i]
        pull = 2 * alpha * (np.exp(alpha * tau) * v - x) / np.expm1(2 * alpha * tau)
        return x + (-alpha * x + pull) * h[i] + _mv(s, dw)

    return _run(step, spec.u, grid, dW, spec.v)


def ou_bridge_mean(alpha: float, spec: BridgeSpec, t):
    """E[X*_t] = (u sinh(alpha (T - t)) + v sinh(alpha t)) / sinh(alpha T)."""
    t = np.asarray(t, dtype=float)
    T = spec.T
    if np.any(t < 0) or np.any(t > T):
        raise ValueError("t must lie in [0, T]")
    w0 = np.sinh(alpha * (T - t)) / np.sinh(alpha * T)
    w1 = np.sinh(alpha * t) / np.sinh(alpha * T)
    return np.multiply.outer(w0, spec.u) + np.multiply.outer(w1, spec.v)


def ou_bridge_var(alpha: float, sigma: float, spec: BridgeSpec, t):
    """Var[X*_t] = sigma^2 sinh(alpha t) sinh(alpha (T - t)) / (alpha sinh(alpha T))."""
    t = np.asarray(t, dtype=float)
    T = spec.T
    return sigma**2 * np.sinh(alpha * t) * np.sinh(alpha * (T - t)) / (alpha * np.sinh(alpha * T))


@dataclass
class RejectionResult:
    paths: SamplePath
    acceptance_rate: float
    n_simulated: int


def default_epsilon(model: DiffusionModel, spec: BridgeSpec) -> float:
    s = float(np.max(np.abs(model.sigma(spec.T, spec.v))))
    return s * np.sqrt(spec.T) / 20


def rejection_oracle(model: DiffusionModel, spec: BridgeSpec, grid: TimeGrid, eps: float,
                     n_accept: int, seed: int, batch: int = 5000,
                     max_paths: int = 2_000_000, min_rate: float = 1e-4) -> RejectionResult:
    """Forward paths from u kept when |X_T - v|_inf <= eps.

    Each batch is stepped forward keeping only the current state; the
    increments of accepted paths are retained and their full trajectories
    rebuilt at the end, so memory scales with ``batch`` and ``n_accept``.
    Path k uses the same noise as ``sample_wiener(grid, ., seed)`` path k.
    Raises RejectionError once ``max_paths`` have been spent, or earlier when
    the running acceptance rate is below ``min_rate``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if n_accept < 1:
        raise ValueError("n_accept must be >= 1")
    N, dn = grid.n_steps, model.noise_dim
    sd = np.sqrt(grid.steps)[:, None, None]
    t, h = grid.nodes, grid.steps
    u = np.asarray(spec.u, dtype=float)
    kept_inc: list[np.ndarray] = []
    kept_ids: list[np.ndarray] = []
    n_kept = n_sim = 0
    while n_kept < n_accept:
        if n_sim >= max_paths:
            raise RejectionError(
                f"only {n_kept} of {n_accept} paths accepted after {n_sim}; increase eps")
        m = min(batch, max_paths - n_sim)
        ids = np.arange(n_sim, n_sim + m)
        inc = np.empty((N, m, dn))
        for k, pid in enumerate(ids):
            inc[:, k, :] = path_rng(seed, pid).standard_normal((N, dn))
        inc *= sd
        x = np.broadcast_to(u, (m, u.size)).copy()
        for i in range(N):
            x = x + model.b(t[i], x) * h[i] + _apply(model.sigma(t[i], x), inc[i])
        n_sim += m
        with np.errstate(invalid="ignore"):
            ok = np.max(np.abs(x - spec.v), axis=-1) <= eps
        if ok.any():
            kept_inc.append(np.swapaxes(inc[:, ok, :], 0, 1))
            kept_ids.append(ids[ok])
            n_kept += int(ok.sum())
        if n_sim >= 10 * batch and n_kept / n_sim < min_rate:
            raise RejectionError(
                f"acceptance rate {n_kept / n_sim:.2e} below floor {min_rate:.0e}; increase eps")
    dW = WienerIncrements(np.concatenate(kept_inc)[:n_accept], seed,
                          np.concatenate(kept_ids)[:n_accept])
    paths = euler_maruyama(model.b, model.sigma, spec.u, grid, dW)
    return RejectionResult(paths, n_kept / n_sim, n_sim)
