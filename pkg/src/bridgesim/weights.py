"""Log-likelihood ratios of proposals against the true bridge.

All weights omit the factor 1/p(0, u; T, v), which is common to every path
of a given bridge and cancels in self-normalised estimates and in
Metropolis-Hastings ratios.  Functions are vectorised over path batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .auxiliary import BackwardTable, LinearAuxiliary, log_normal_density, log_ptilde_endpoint
from .linalg_ode import OdeTrajectory
from .sde_core import BridgeSpec, DiffusionModel, SamplePath

OMITTED_P = "-log p(0,u;T,v)"


class WeightError(ValueError):
    pass


@dataclass
class LogWeight:
    """Total log weight (scalar or one per path) and its named components."""

    components: dict
    omitted_constant: str = OMITTED_P
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total = sum(np.asarray(c, dtype=float) for c in self.components.values())

    def __getitem__(self, k) -> "LogWeight":
        comps = {n: (c[k] if np.ndim(c) else c) for n, c in self.components.items()}
        return LogWeight(comps, self.omitted_constant)


@dataclass
class WeightedSample:
    path: SamplePath
    log_weight: LogWeight


def _inv_a(model, t, x, node):
    a = model.a(t, x)
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError as err:
        raise WeightError(f"diffusion matrix a is singular at grid node {node}") from err


def _quad(u, M, w):
    return np.einsum("...i,...ij,...j->...", u, M, w)


def log_psi1(path: SamplePath, model: DiffusionModel, spec: BridgeSpec,
             parts: bool = False):
    """Log of the Delyon-Hu (lambda = 0) likelihood ratio factor.

    Left-point Ito sums for the b' a^{-1} dX and b' a^{-1} b dt integrals; the
    diamond integral against d(a^{-1}) evaluates its integrand at the right
    end of each interval, and its last interval contributes 0.
    """
    X = np.swapaxes(path.as_batch(), 0, 1)
    t, h = path.grid.nodes, path.grid.steps
    N = path.grid.n_steps
    term1 = term2 = term3 = 0.0
    ainv_prev = _inv_a(model, t[0], X[0], 0)
    for i in range(N):
        b = model.b(t[i], X[i])
        term1 = term1 + _quad(b, ainv_prev, X[i + 1] - X[i])
        term2 = term2 - 0.5 * _quad(b, ainv_prev, b) * h[i]
        if i + 1 < N:
            ainv_next = _inv_a(model, t[i + 1], X[i + 1], i + 1)
            r = spec.v - X[i + 1]
            term3 = term3 - 0.5 * _quad(r / (spec.T - t[i + 1]), ainv_next - ainv_prev, r)
            ainv_prev = ainv_next
    out = [np.asarray(term) for term in (term1, term2, term3)]
    if not path.batched:
        out = [o[0] for o in out]
    return tuple(out) if parts else out[0] + out[1] + out[2]


def log_psi2(path: SamplePath, model: DiffusionModel, spec: BridgeSpec,
             flow: OdeTrajectory) -> np.ndarray:
    """Log of the residual-to-Delyon-Hu likelihood ratio factor.

    f(s) = b(s, x(s)) - (x(T) - x(s)) / (T - s) from the flow; all sums are
    left-point over i = 0..N-1.
    """
    X = np.swapaxes(path.as_batch(), 0, 1)
    t, h = path.grid.nodes, path.grid.steps
    offsets = flow_offset(model, spec, flow)
    total = 0.0
    for i, f in enumerate(offsets):
        ainv = _inv_a(model, t[i], X[i], i)
        k = (spec.v - X[i]) / (spec.T - t[i])
        total = total + (0.5 * _quad(f, ainv, f) * h[i]
                         - _quad(f, ainv, X[i + 1] - X[i])
                         + _quad(f, ainv, k) * h[i])
    total = np.asarray(total)
    return total if path.batched else total[0]


def flow_offset(model: DiffusionModel, spec: BridgeSpec, flow: OdeTrajectory) -> np.ndarray:
    """f(t_i) = b(t_i, x(t_i)) - (x(T) - x(t_i)) / (T - t_i) for i < N."""
    t, xs = flow.grid[:-1], flow.states
    return np.array([model.b(s, x) for s, x in zip(t, xs[:-1])]) - (xs[-1] - xs[:-1]) / (spec.T - t)[:, None]


def log_const_residual(model: DiffusionModel, spec: BridgeSpec) -> float:
    """log phi(v; u, a(0,u) T) + 0.5 log(|a(0,u)| / |a(T,v)|)."""
    a0 = model.a(0.0, spec.u)
    aT = model.a(spec.T, spec.v)
    try:
        lp = log_normal_density(spec.v, spec.u, a0 * spec.T)
        _, ld0 = np.linalg.slogdet(a0)
        _, ldT = np.linalg.slogdet(aT)
    except np.linalg.LinAlgError as err:
        raise WeightError("a(0,u) or a(T,v) is singular") from err
    return lp + 0.5 * (ld0 - ldT)


def g_functional(i: int, x, model: DiffusionModel, aux: LinearAuxiliary,
                 table: BackwardTable) -> np.ndarray:
    """G(t_i, x) = (b - b~)' r~ - 0.5 tr[(a - a~)(H - r~ r~')]."""
    if not 0 <= i < table.grid.n_steps:
        raise IndexError(f"G is only evaluated at nodes 0..{table.grid.n_steps - 1}, got {i}")
    t = table.grid.nodes[i]
    x = np.asarray(x, dtype=float)
    r = (table.v[i] - x) @ table.H[i].T
    db = model.b(t, x) - aux.drift(t, x)
    da = model.a(t, x) - aux.a(t)
    first = np.einsum("...i,...i->...", db, r)
    trace_h = np.einsum("...ij,ji->...", da, table.H[i])
    trace_rr = _quad(r, da, r)
    return first - 0.5 * (trace_h - trace_rr)


def log_weight_guided(path: SamplePath, model: DiffusionModel, aux: LinearAuxiliary,
                      table: BackwardTable, spec: BridgeSpec,
                      log_ptilde: Optional[float] = None) -> LogWeight:
    """log p~(0,u;T,v) + sum_i G(t_i, X_i) h_i (left-point)."""
    if path.grid.n_steps != table.grid.n_steps:
        raise WeightError("path and table grids differ")
    X = np.swapaxes(path.as_batch(), 0, 1)
    h = path.grid.steps
    g = 0.0
    for i in range(path.grid.n_steps):
        g = g + g_functional(i, X[i], model, aux, table) * h[i]
    g = np.asarray(g)
    if not path.batched:
        g = g[0]
    if log_ptilde is None:
        log_ptilde = log_ptilde_endpoint(aux, spec, path.grid)
    return LogWeight({"log_ptilde": log_ptilde, "g_integral": g})


def log_weight_residual(path: SamplePath, model: DiffusionModel, spec: BridgeSpec,
                        flow: OdeTrajectory, psi1_reading: str = "log") -> LogWeight:
    """Constant + log Psi1 + log Psi2 for residual proposal paths.

    ``psi1_reading="log"`` treats the bracketed Psi1 expression as the log of
    the factor (the Girsanov form).  ``"exp"`` takes the bracket itself as the
    multiplicative factor; non-positive values then get zero weight.  The
    second reading exists only as a consistency discriminator.
    """
    psi1 = log_psi1(path, model, spec)
    if psi1_reading == "exp":
        with np.errstate(divide="ignore", invalid="ignore"):
            psi1 = np.where(psi1 > 0, np.log(np.where(psi1 > 0, psi1, 1.0)), -np.inf)
    elif psi1_reading != "log":
        raise ValueError(f"unknown psi1 reading {psi1_reading!r}")
    return LogWeight({
        "log_const": log_const_residual(model, spec),
        "log_psi1": psi1,
        "log_psi2": log_psi2(path, model, spec, flow),
    })


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise WeightError("no weights")
    m = np.max(lw)
    if not np.isfinite(m):
        raise WeightError("no finite log weight")
    w = np.exp(lw - m)
    return w / w.sum()


def ess(log_weights) -> float:
    """(sum w)^2 / sum w^2, computed after a max shift (equal weights give n exactly)."""
    lw = np.asarray(log_weights, dtype=float)
    normalized_weights(lw)  # validation
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / np.sum(w**2))


def is_estimate(log_weights, values) -> tuple[float, float]:
    """Self-normalised IS estimate and its delta-method standard error."""
    w = normalized_weights(log_weights)
    values = np.asarray(values, dtype=float)
    est = float(np.sum(w * values))
    se = float(np.sqrt(np.sum(w**2 * (values - est) ** 2)))
    return est, se


def mh_log_ratio(current: WeightedSample, candidate: WeightedSample) -> float:
    """Independence-sampler log acceptance ratio between two bridge proposals."""
    if current.log_weight.omitted_constant != candidate.log_weight.omitted_constant:
        raise WeightError("weights omit different constants and are not comparable")
    return float(candidate.log_weight.total - current.log_weight.total)
