"""Flat ``key = value`` experiment configuration.

One setting per line; ``#`` starts a comment; dashes in keys are read as
underscores.  Vectors are comma separated (``u = 0.1, 0.2``); matrices
separate rows with ``;`` (``aux_B = 0, 1; -1, -1``).  Keys:

========================  =====================================================
model                     ou | sine | ou-sine | linear
alpha, sigma              built-in model parameters
model_B, model_beta,      constant coefficients of a ``linear`` model
model_sigma
u, v, T                   bridge start, end and horizon
h                         grid step (default 1e-3)
paths                     number of paths (default 100)
seed                      base seed (default 0)
proposal                  comma-separated proposal names
aux                       simple51 | lna | brownian | custom
aux_B, aux_beta,          constants of a ``custom`` auxiliary
aux_sigma
sigma_policy              constant-end | interpolate
t0                        switch time of the interpolate policy
eps                       endpoint tolerance of the rejection oracle
iterations, thin          MH chain length and path thinning
tables                    closed | ode backward filter for ``tables``
out                       output directory
threads                   worker threads for path simulation
========================  =====================================================
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..auxiliary import SigmaPolicy
from ..proposals import ProposalKind
from ..reference import EXAMPLES, ExampleTag

MODELS = ("ou", "sine", "ou-sine", "linear")
AUXILIARIES = ("simple51", "lna", "brownian", "custom")
TABLE_METHODS = ("closed", "ode")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def parse_vector(text: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split()]
    if not parts:
        raise ValueError("empty vector")
    return np.array([float(p) for p in parts])


def parse_matrix(text: str) -> np.ndarray:
    rows = [parse_vector(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("rows of unequal length")
    return np.array(rows)


@dataclass
class ExperimentConfig:
    model: str = "ou"
    alpha: Optional[float] = None
    sigma: Optional[float] = None
    model_B: Optional[np.ndarray] = None
    model_beta: Optional[np.ndarray] = None
    model_sigma: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    T: Optional[float] = None
    h: float = 1e-3
    paths: int = 100
    seed: int = 0
    proposal: tuple = ("guided",)
    aux: str = "simple51"
    aux_B: Optional[np.ndarray] = None
    aux_beta: Optional[np.ndarray] = None
    aux_sigma: Optional[np.ndarray] = None
    sigma_policy: str = "constant-end"
    t0: Optional[float] = None
    eps: Optional[float] = None
    iterations: int = 1000
    thin: int = 100
    tables: str = "closed"
    out: str = "out"
    threads: int = 1
    _explicit: set = field(default_factory=set, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return 1 if self.model != "linear" else self.model_B.shape[0]

    def updated(self, values: Mapping[str, object]) -> "ExperimentConfig":
        """Copy with ``values`` (strings or typed) applied, then validated."""
        cfg = dataclasses.replace(self, _explicit=set(self._explicit))
        for raw_key, raw in values.items():
            key = raw_key.strip().replace("-", "_")
            if key not in _PARSERS:
                raise ConfigError(key, "unknown key")
            try:
                value = _PARSERS[key](raw) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as err:
                raise ConfigError(key, f"cannot parse {raw!r} ({err})") from None
            setattr(cfg, key, value)
            cfg._explicit.add(key)
        cfg._fill_defaults()
        cfg.validate()
        return cfg

    def _fill_defaults(self) -> None:
        if self.model == "linear" or self.model not in MODELS:
            return
        ex = EXAMPLES[ExampleTag(self.model)]
        for name in ("alpha", "sigma", "T"):
            if getattr(self, name) is None:
                setattr(self, name, getattr(ex, name))
        if self.u is None:
            self.u = np.array([ex.u])
        if self.v is None:
            self.v = np.array([ex.v])

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError("model", f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.model == "linear":
            for name in ("model_B", "model_sigma", "u", "v", "T"):
                if getattr(self, name) is None:
                    raise ConfigError(name, "required for the linear model")
            d = self.model_B.shape[0]
            if self.model_B.shape != (d, d):
                raise ConfigError("model_B", "must be square")
            if self.model_sigma.shape[0] != d:
                raise ConfigError("model_sigma", f"needs {d} rows")
            if self.model_beta is not None and self.model_beta.shape != (d,):
                raise ConfigError("model_beta", f"needs {d} entries")
        else:
            if not self.sigma > 0:
                raise ConfigError("sigma", "must be positive")
        for name in ("u", "v"):
            if getattr(self, name).shape != (self.dim,):
                raise ConfigError(name, f"needs {self.dim} entries")
        if not self.T > 0:
            raise ConfigError("T", "must be positive")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ConfigError("h", "must be positive")
        if self.h > self.T:
            raise ConfigError("h", "larger than the horizon T")
        if self.paths < 1:
            raise ConfigError("paths", "must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        if self.thin < 1:
            raise ConfigError("thin", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        if not self.proposal:
            raise ConfigError("proposal", "at least one proposal is required")
        for name in self.proposal:
            try:
                ProposalKind(name)
            except ValueError:
                kinds = ", ".join(k.value for k in ProposalKind)
                raise ConfigError("proposal", f"unknown proposal {name!r}; choose from {kinds}") from None
        if self.aux not in AUXILIARIES:
            raise ConfigError("aux", f"choose from {', '.join(AUXILIARIES)}")
        if self.aux == "custom":
            for name in ("aux_B", "aux_sigma"):
                if getattr(self, name) is None:
                    raise ConfigError(name, "required for the custom auxiliary")
            if self.aux_B.shape != (self.dim, self.dim):
                raise ConfigError("aux_B", f"must be {self.dim}x{self.dim}")
            if self.aux_sigma.shape[0] != self.dim:
                raise ConfigError("aux_sigma", f"needs {self.dim} rows")
            if self.aux_beta is not None and self.aux_beta.shape != (self.dim,):
                raise ConfigError("aux_beta", f"needs {self.dim} entries")
        try:
            policy = SigmaPolicy(self.sigma_policy)
        except ValueError:
            raise ConfigError("sigma_policy", "choose constant-end or interpolate") from None
        if policy is SigmaPolicy.INTERPOLATE:
            if self.t0 is None:
                raise ConfigError("t0", "required by the interpolate sigma policy")
            if not 0 < self.t0 < self.T:
                raise ConfigError("t0", "must lie strictly between 0 and T")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("eps", "must be positive")
        if self.tables not in TABLE_METHODS:
            raise ConfigError("tables", "choose closed or ode")


def _int(text: str) -> int:
    return int(text.strip())


def _str(text: str) -> str:
    return text.strip()


def _proposals(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


_PARSERS = {
    "model": _str, "alpha": float, "sigma": float,
    "model_B": parse_matrix, "model_beta": parse_vector, "model_sigma": parse_matrix,
    "u": parse_vector, "v": parse_vector, "T": float,
    "h": float, "paths": _int, "seed": _int, "proposal": _proposals,
    "aux": _str, "aux_B": parse_matrix, "aux_beta": parse_vector, "aux_sigma": parse_matrix,
    "sigma_policy": _str, "t0": float, "eps": float,
    "iterations": _int, "thin": _int, "tables": _str, "out": _str, "threads": _int,
}


def read_config_file(path: str | Path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping] = None,
                base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """File values, then ``overrides`` on top, starting from ``base`` or defaults."""
    values = dict(read_config_file(path)) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return (base or ExperimentConfig()).updated(values)
