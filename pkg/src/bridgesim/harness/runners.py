"""Experiment runners behind the CLI subcommands."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from ..auxiliary import (
    BackwardTable,
    LinearAuxiliary,
    SigmaPolicy,
    _const,
    backward_tables_closed,
    backward_tables_ode,
    lna_auxiliary,
    log_ptilde_endpoint,
    sigma_tilde_policy,
    simple_auxiliary,
    write_table_csv,
)
from ..proposals import (
    ProposalKind,
    adjusted_residual_v1,
    adjusted_residual_v2,
    delyon_hu,
    guided,
    lna_residual,
    residual,
)
from ..reference import (
    ExampleTag,
    default_epsilon,
    ou_bridge_exact,
    ou_bridge_mean,
    ou_model,
    ou_sine_model,
    rejection_oracle,
    sine_model,
)
from ..sde_core import BridgeSpec, SamplePath, TimeGrid, linear_model, sample_wiener, solve_flow, write_paths_csv
from ..weights import (
    LogWeight,
    ess,
    is_estimate,
    log_const_residual,
    log_psi1,
    log_weight_guided,
    log_weight_residual,
    normalized_weights,
)
from . import svg
from .config import ConfigError, ExperimentConfig, load_config, read_config_file

WEIGHT_COLUMNS = ("log_psi1", "log_psi2", "log_const", "g_integral")
WEIGHTED = {
    ProposalKind.GUIDED, ProposalKind.RESIDUAL, ProposalKind.DELYON_HU_0,
    ProposalKind.ADJ_RESIDUAL_V1, ProposalKind.ADJ_RESIDUAL_V2,
}


@dataclass
class Setup:
    """Model, bridge, grid and lazily built flow, auxiliary and tables."""

    cfg: ExperimentConfig

    @cached_property
    def model(self):
        c = self.cfg
        if c.model == "linear":
            beta = c.model_beta if c.model_beta is not None else np.zeros(c.dim)
            return linear_model(c.model_B, beta, c.model_sigma, "linear")
        if c.model == ExampleTag.OU:
            return ou_model(c.alpha, c.sigma)
        if c.model == ExampleTag.SINE:
            return sine_model(c.sigma)
        return ou_sine_model(c.sigma)

    @cached_property
    def spec(self) -> BridgeSpec:
        return BridgeSpec(self.cfg.u, self.cfg.v, self.cfg.T)

    @cached_property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.cfg.T, h=self.cfg.h)

    @cached_property
    def flow(self):
        return solve_flow(self.model, self.spec.u, self.grid)

    def _sigma_tilde(self):
        return sigma_tilde_policy(self.model, self.spec, self.cfg.sigma_policy, self.cfg.t0, self.flow)

    @cached_property
    def simple_aux(self) -> LinearAuxiliary:
        return simple_auxiliary(self.model, self.spec, self.flow)

    @cached_property
    def aux(self) -> LinearAuxiliary:
        c = self.cfg
        interpolate = SigmaPolicy(c.sigma_policy) is SigmaPolicy.INTERPOLATE
        if c.aux == "custom":
            beta = c.aux_beta if c.aux_beta is not None else np.zeros(c.dim)
            return LinearAuxiliary.constant(c.aux_B, beta, c.aux_sigma)
        if c.aux == "lna":
            return lna_auxiliary(self.model, self.flow, self._sigma_tilde())
        d = c.dim
        if c.aux == "brownian":
            if interpolate:
                return LinearAuxiliary(_const(np.zeros((d, d))), _const(np.zeros(d)), self._sigma_tilde())
            return LinearAuxiliary.brownian(d, self.model.sigma(self.spec.T, self.spec.v))
        if interpolate:
            base = self.simple_aux
            return LinearAuxiliary(base.B, base.beta, self._sigma_tilde())
        return self.simple_aux

    def tables(self, aux: LinearAuxiliary, method: Optional[str] = None) -> BackwardTable:
        closed_ok = aux.homogeneous or (aux.simple and aux.beta_integral is not None)
        method = method or ("closed" if closed_ok else "ode")
        if method == "closed":
            if not closed_ok:
                raise ConfigError("tables", "closed form needs a time-constant or simple auxiliary; use ode")
            return backward_tables_closed(aux, self.grid, self.spec)
        return backward_tables_ode(aux, self.grid, self.spec)

    @cached_property
    def table(self) -> BackwardTable:
        return self.tables(self.aux)

    @cached_property
    def simple_table(self) -> BackwardTable:
        return self.tables(self.simple_aux)

    def simulate(self, kind: ProposalKind, dW) -> SamplePath:
        m, s, g = self.model, self.spec, self.grid
        if kind is ProposalKind.GUIDED:
            return guided(m, s, g, dW, self.table)
        if kind is ProposalKind.RESIDUAL:
            return residual(m, s, g, dW, self.flow)
        if kind is ProposalKind.LNA_RESIDUAL:
            return lna_residual(m, s, g, dW, self.flow)
        if kind is ProposalKind.ADJ_RESIDUAL_V1:
            return adjusted_residual_v1(m, s, g, dW, self.flow)
        if kind is ProposalKind.ADJ_RESIDUAL_V2:
            return adjusted_residual_v2(m, s, g, dW, self.flow)
        return delyon_hu(m, s, g, dW, lam=0 if kind is ProposalKind.DELYON_HU_0 else 1)

    def weigh(self, kind: ProposalKind, path: SamplePath) -> Optional[LogWeight]:
        m, s = self.model, self.spec
        if kind is ProposalKind.GUIDED:
            return log_weight_guided(path, m, self.aux, self.table, s, self.log_ptilde)
        if kind in (ProposalKind.ADJ_RESIDUAL_V1, ProposalKind.ADJ_RESIDUAL_V2):
            # both coincide with the guided proposal under the simple auxiliary
            return log_weight_guided(path, m, self.simple_aux, self.simple_table, s, self.simple_log_ptilde)
        if kind is ProposalKind.RESIDUAL:
            return log_weight_residual(path, m, s, self.flow)
        if kind is ProposalKind.DELYON_HU_0:
            return LogWeight({"log_const": log_const_residual(m, s), "log_psi1": log_psi1(path, m, s)})
        return None

    @cached_property
    def log_ptilde(self) -> float:
        return log_ptilde_endpoint(self.aux, self.spec, self.grid)

    @cached_property
    def simple_log_ptilde(self) -> float:
        return log_ptilde_endpoint(self.simple_aux, self.spec, self.grid)

    def _prepare(self, kind: ProposalKind) -> None:
        """Build the lazy pieces ``kind`` needs before worker threads share them."""
        _ = self.flow
        if kind is ProposalKind.GUIDED:
            _ = (self.table, self.log_ptilde)
        elif kind in (ProposalKind.ADJ_RESIDUAL_V1, ProposalKind.ADJ_RESIDUAL_V2):
            _ = (self.simple_table, self.simple_log_ptilde)

    def run_paths(self, kind: ProposalKind, n: int, first: int = 0, seed: Optional[int] = None):
        """Simulate path ids first..first+n-1 (in worker threads), weights included."""
        seed = self.cfg.seed if seed is None else seed
        threads = min(self.cfg.threads, n)
        bounds = np.linspace(first, first + n, threads + 1).astype(int)

        def work(lo_hi):
            lo, hi = lo_hi
            dW = sample_wiener(self.grid, self.model.noise_dim, seed, hi - lo, first_path=lo)
            path = self.simulate(kind, dW)
            return path, self.weigh(kind, path)

        self._prepare(kind)
        chunks = list(zip(bounds[:-1], bounds[1:]))
        if threads == 1:
            results = [work(c) for c in chunks]
        else:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(work, chunks))
        paths = SamplePath(self.grid, np.concatenate([p.states for p, _ in results]),
                           np.arange(first, first + n))
        if results[0][1] is None:
            return paths, None
        names = results[0][1].components
        comps = {k: np.concatenate([np.broadcast_to(w.components[k], (p.n_paths,)) for p, w in results])
                 for k in names}
        return paths, LogWeight(comps)


def _kinds(cfg: ExperimentConfig) -> list[ProposalKind]:
    return [ProposalKind(p) for p in cfg.proposal]


def write_weights_csv(fh, path_ids, weight: Optional[LogWeight]) -> None:
    """Rows ``path_id,log_total,log_psi1,log_psi2,log_const,g_integral``; absent parts empty.

    The guided family's log p~(0,u;T,v) is reported in ``log_const``.
    """
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("path_id", "log_total") + WEIGHT_COLUMNS)
    comps = {}
    if weight is not None:
        comps = dict(weight.components)
        if "log_ptilde" in comps:
            comps["log_const"] = comps.pop("log_ptilde")
    n = len(path_ids)
    cols = {k: np.broadcast_to(np.asarray(v, dtype=float), (n,)) for k, v in comps.items()}
    total = np.broadcast_to(weight.total, (n,)) if weight is not None else None
    for k, pid in enumerate(path_ids):
        row = [int(pid), "" if total is None else repr(float(total[k]))]
        row += [repr(float(cols[c][k])) if c in cols else "" for c in WEIGHT_COLUMNS]
        w.writerow(row)


def read_weights_csv(fh) -> dict:
    rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])
            for key in ("path_id", "log_total") + WEIGHT_COLUMNS}


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_simulate(cfg: ExperimentConfig, log=print) -> dict:
    """Write ``<proposal>_paths.csv`` and ``<proposal>_weights.csv``; returns ESS per proposal."""
    setup, out, result = Setup(cfg), _out(cfg), {}
    for kind in _kinds(cfg):
        paths, weight = setup.run_paths(kind, cfg.paths)
        with open(out / f"{kind.value}_paths.csv", "w", newline="") as fh:
            write_paths_csv(paths, fh)
        with open(out / f"{kind.value}_weights.csv", "w", newline="") as fh:
            write_weights_csv(fh, paths.path_ids, weight)
        if weight is None:
            log(f"{kind.value}: {cfg.paths} paths; no likelihood ratio available, weights left empty")
            result[kind.value] = None
        else:
            result[kind.value] = ess(np.broadcast_to(weight.total, (cfg.paths,)))
            log(f"{kind.value}: {cfg.paths} paths, ESS {result[kind.value]:.2f}")
    return result


def _reference_mean(setup: Setup) -> tuple[str, np.ndarray]:
    c = setup.cfg
    if c.model == "ou":
        return "exact", ou_bridge_mean(c.alpha, setup.spec, setup.grid.nodes)
    eps = c.eps if c.eps is not None else default_epsilon(setup.model, setup.spec)
    res = rejection_oracle(setup.model, setup.spec, setup.grid, eps, c.paths, c.seed + 1)
    return "oracle", res.paths.states.mean(axis=0)


def run_compare(cfg: ExperimentConfig, log=print) -> list[dict]:
    """ESS, IS moments at T/2 and weighted-mean-path distance per proposal; writes compare.csv."""
    kinds = _kinds(cfg)
    if len(kinds) < 2:
        raise ConfigError("proposal", "compare needs at least two proposals")
    if len(set(kinds)) != len(kinds):
        raise ConfigError("proposal", "compare needs distinct proposals")
    for k in kinds:
        if k not in WEIGHTED:
            raise ConfigError("proposal", f"{k.value} has no likelihood ratio to compare")
    setup = Setup(cfg)
    ref_name, ref = _reference_mean(setup)
    j = int(np.argmin(np.abs(setup.grid.nodes - cfg.T / 2)))
    rows = []
    for kind in kinds:
        paths, weight = setup.run_paths(kind, cfg.paths)
        lw = np.broadcast_to(weight.total, (cfg.paths,))
        w = normalized_weights(lw)
        mean_path = np.einsum("k,kid->id", w, paths.states)
        for coord in range(cfg.dim):
            x = paths.states[:, j, coord]
            m1, s1 = is_estimate(lw, x)
            m2, s2 = is_estimate(lw, x**2)
            rows.append(dict(
                proposal=kind.value, coord=coord, ess=ess(lw), mean=m1, mean_se=s1,
                second_moment=m2, second_moment_se=s2,
                mean_path_sup_distance=float(np.max(np.abs(mean_path[:, coord] - ref[:, coord]))),
                reference=ref_name,
            ))
    with open(_out(cfg) / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    for r in rows:
        log(f"{r['proposal']}[{r['coord']}]: ESS {r['ess']:.1f}  E[X] {r['mean']:.6g} +- {r['mean_se']:.2g}  "
            f"E[X^2] {r['second_moment']:.6g} +- {r['second_moment_se']:.2g}  "
            f"sup|mean - {ref_name}| {r['mean_path_sup_distance']:.4g}")
    return rows


@dataclass
class ChainResult:
    acceptance_rate: float
    accepted: np.ndarray
    log_weights: np.ndarray
    path_ids: np.ndarray


def run_mh(cfg: ExperimentConfig, n_iterations: Optional[int] = None, log=print,
           block: int = 500) -> ChainResult:
    """Independence sampler over proposal bridges; writes mh_trace.csv and mh_paths.csv.

    Candidate k uses path id k (the initial state is id 0).  Every ``thin``-th
    current state is stored.
    """
    n_iterations = cfg.iterations if n_iterations is None else n_iterations
    if n_iterations < 1:
        raise ConfigError("iterations", "must be >= 1")
    kind = _kinds(cfg)[0]
    if kind not in WEIGHTED:
        raise ConfigError("proposal", f"{kind.value} has no likelihood ratio for MH")
    setup = Setup(cfg)
    uniform = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    accepted = np.zeros(n_iterations, dtype=bool)
    trace_lw = np.empty(n_iterations + 1)
    trace_id = np.empty(n_iterations + 1, dtype=int)
    kept_states, kept_ids = [], []
    current_state = current_lw = None
    current_id = 0
    total = n_iterations + 1
    for lo in range(0, total, block):
        n = min(block, total - lo)
        paths, weight = setup.run_paths(kind, n, first=lo)
        lw = np.broadcast_to(weight.total, (n,))
        for k in range(n):
            it = lo + k
            if it == 0:
                current_state, current_lw, current_id = paths.states[k], lw[k], it
            else:
                ratio = lw[k] - current_lw
                if np.log(uniform.random()) <= ratio:
                    accepted[it - 1] = True
                    current_state, current_lw, current_id = paths.states[k], lw[k], it
            trace_lw[it], trace_id[it] = current_lw, current_id
            if it % cfg.thin == 0:
                kept_states.append(current_state)
                kept_ids.append(current_id)
    rate = float(accepted.mean())
    out = _out(cfg)
    with open(out / "mh_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "accepted", "log_weight", "path_id"])
        for it in range(total):
            acc = "" if it == 0 else int(accepted[it - 1])
            w.writerow([it, acc, repr(float(trace_lw[it])), int(trace_id[it])])
    with open(out / "mh_paths.csv", "w", newline="") as fh:
        # the same path may be kept several times, so rows are keyed by sample index
        write_paths_csv(SamplePath(setup.grid, np.array(kept_states)), fh)
    log(f"{kind.value}: {n_iterations} iterations, acceptance rate {rate:.4f}")
    return ChainResult(rate, accepted, trace_lw, trace_id)


def run_tables(cfg: ExperimentConfig, log=print) -> BackwardTable:
    setup = Setup(cfg)
    table = setup.tables(setup.aux, cfg.tables)
    with open(_out(cfg) / "tables.csv", "w", newline="") as fh:
        write_table_csv(table, fh)
    log(f"{cfg.tables} backward filter: {setup.grid.n_steps + 1} nodes written")
    return table


FIGURES = {
    "ou": dict(model="ou", paths=5),
    "sine-well": dict(model="ou-sine", paths=25),
}


def figure_config(name: str, path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    if name not in FIGURES:
        raise ConfigError("figure", f"unknown figure {name!r}; choose from {', '.join(FIGURES)}")
    defaults = dict(FIGURES[name])
    if path is not None:
        defaults.update(read_config_file(path))
    defaults.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if defaults.get("model") != FIGURES[name]["model"]:
        raise ConfigError("model", f"figure {name} is fixed to model {FIGURES[name]['model']}")
    return load_config(None, defaults)


def run_figure(name: str, cfg: ExperimentConfig, log=print) -> Path:
    """Four panels (flow, guided, residual, reference bridges) as SVG plus one CSV per panel."""
    setup, out = Setup(cfg), _out(cfg)
    grid, n = setup.grid, cfg.paths
    dW = sample_wiener(grid, 1, cfg.seed, n)
    flow_path = SamplePath(grid, setup.flow.states[None], np.array([0]))
    g = setup.simulate(ProposalKind.GUIDED, dW)
    r = setup.simulate(ProposalKind.RESIDUAL, dW)
    if name == "ou":
        truth = ou_bridge_exact(cfg.alpha, cfg.sigma, setup.spec, grid, dW)
        truth_title = f"{n} exact bridges"
    else:
        eps = cfg.eps if cfg.eps is not None else default_epsilon(setup.model, setup.spec)
        truth = rejection_oracle(setup.model, setup.spec, grid, eps, n, cfg.seed + 1).paths
        truth_title = f"{n} rejection-oracle bridges (eps={eps:.3g})"
    sets = [
        ("flow", "deterministic flow", flow_path),
        ("guided", f"{n} guided proposals", g),
        ("residual", f"{n} residual proposals", r),
        ("reference", truth_title, truth),
    ]
    panels = []
    for key, title, paths in sets:
        with open(out / f"figure_{name}_{key}.csv", "w", newline="") as fh:
            write_paths_csv(paths, fh)
        panel = svg.Panel(title, grid.nodes)
        for states in paths.as_batch():
            panel.add(states[:, 0])
        panels.append(panel)
    target = out / f"figure_{name}.svg"
    target.write_text(svg.render(panels))
    log(f"wrote {target}")
    return target
