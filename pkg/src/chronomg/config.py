"""Run configuration: INI parsing, validation, and construction of solver inputs.

A run file is a flat ``key = value`` file with section headers, read with
:mod:`configparser`::

    [problem]
    name = lorenz
    ic = default

    [time]
    t_final = 8
    units = lyapunov
    n_t = 16384

    [hierarchy]
    levels = 2
    coarsening = 2
    theta = yes
    delta = full
    delta_from = 0

    [cycle]
    cycle = V
    relaxation = F
    tol = 1e-10
    max_iter = 100
    initial_guess = zero

    [run]
    workers = 1
    seed = 0

Every key has a default, so a file only needs the entries that differ.
Comments start with ``;`` or ``#``, also after a value.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import TimeGrid, ivp_forcing
from .mgrit import CycleConfig, LevelDescriptor, TimeHierarchy
from .models import Dahlquist, KSDiscretization, KuramotoSivashinsky, Lorenz, LorenzParams
from .steppers import (ThetaEuler, backward_euler, forward_euler, lobatto_iiic,
                       theta_for_euler, theta_lobatto_coarse)

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "emit_config",
           "build_model", "build_grid", "build_forcing", "build_hierarchy",
           "build_cycle", "lyapunov_time"]


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# key -> section; the order here is the order of emitted files
_SECTIONS = {
    "name": "run", "seed": "run", "workers": "run", "out": "run",
    "problem": "problem", "ic": "problem", "lam": "problem", "sigma": "problem",
    "rho": "problem", "beta": "problem", "length": "problem", "n_x": "problem",
    "fine": "problem",
    "t_final": "time", "units": "time", "n_t": "time",
    "levels": "hierarchy", "coarsening": "hierarchy", "theta": "hierarchy",
    "delta": "hierarchy", "rank": "hierarchy", "delta_from": "hierarchy",
    "lv_coarse": "hierarchy",
    "cycle": "cycle", "relaxation": "cycle", "tol": "cycle", "max_iter": "cycle",
    "initial_guess": "cycle", "psi_init": "cycle",
}
# the problem name is stored under [problem] as "name"
_ALIASES = {("problem", "name"): "problem", ("run", "name"): "name"}


@dataclass
class RunConfig:
    name: str = "run"
    problem: str = "lorenz"
    ic: str = "default"
    lam: float = -1.0
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    length: float = 64.0
    n_x: int = 64
    fine: str = "default"
    t_final: float = 1.0
    units: str = "lyapunov"
    n_t: int = 2048
    levels: int = 2
    coarsening: list = field(default_factory=lambda: [2])
    theta: bool = False
    delta: str = "off"
    rank: int = 0
    delta_from: int = 0
    lv_coarse: bool = False
    cycle: str = "V"
    relaxation: str = "F"
    tol: float = 1e-10
    max_iter: int = 100
    initial_guess: str = "zero"
    psi_init: str = "coarse"
    workers: int = 1
    seed: int = 0
    out: str = ""

    # -- derived ------------------------------------------------------------

    @property
    def fine_stepper(self) -> str:
        if self.fine != "default":
            return self.fine
        return "lobatto-iiic" if self.problem == "ks" else "forward-euler"

    def factors(self) -> list[int]:
        """Coarsening factor of every level pair; the last entry repeats."""
        n = self.levels - 1
        ms = list(self.coarsening)[:n]
        while ms and len(ms) < n:
            ms.append(ms[-1])
        return ms

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d)

    def validate(self) -> "RunConfig":
        if self.problem not in ("lorenz", "ks", "dahlquist"):
            raise ConfigError("problem", f"unknown problem {self.problem!r}")
        if self.units not in ("lyapunov", "absolute"):
            raise ConfigError("units", "must be lyapunov or absolute")
        if self.units == "lyapunov" and self.problem == "dahlquist":
            raise ConfigError("units", "the Dahlquist problem has no Lyapunov time")
        if not (self.t_final > 0 and math.isfinite(self.t_final)):
            raise ConfigError("t_final", "must be positive")
        if self.n_t < 1:
            raise ConfigError("n_t", "must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels", "must be >= 1")
        if self.levels > 1 and not self.coarsening:
            raise ConfigError("coarsening", "needs at least one factor")
        if any(m < 2 for m in self.coarsening):
            raise ConfigError("coarsening", "factors must be >= 2")
        size = self.n_t
        for l, m in enumerate(self.factors()):
            if size % m:
                raise ConfigError("coarsening", f"level {l} has {size} steps, not divisible by {m}")
            size //= m
        if self.fine_stepper not in ("forward-euler", "backward-euler", "lobatto-iiic") \
                and not self.fine_stepper.startswith("theta:"):
            raise ConfigError("fine", f"unknown stepper {self.fine_stepper!r}")
        if self.theta and self.fine_stepper not in ("forward-euler", "lobatto-iiic"):
            raise ConfigError("theta", "theta coarsening needs a forward-euler or lobatto-iiic fine stepper")
        if self.delta not in ("off", "full", "lowrank"):
            raise ConfigError("delta", "must be off, full or lowrank")
        n_s = self._state_dim()
        if self.delta == "lowrank" and not 1 <= self.rank <= n_s:
            raise ConfigError("rank", f"must be in 1..{n_s}")
        if self.delta == "full" and n_s > 64:
            raise ConfigError("delta", "full Delta is limited to 64 unknowns, use lowrank")
        if self.delta != "off" and not 0 <= self.delta_from < max(self.levels - 1, 1):
            raise ConfigError("delta_from", "must name an existing level pair")
        if self.problem == "ks" and self.n_x < 7:
            raise ConfigError("n_x", "the 7-point stencil needs n_x >= 7")
        if self.ic != "default":
            try:
                vals = [float(v) for v in self.ic.split(",")]
            except ValueError:
                raise ConfigError("ic", "expected 'default' or comma-separated numbers") from None
            if len(vals) != n_s:
                raise ConfigError("ic", f"expected {n_s} values, got {len(vals)}")
        try:
            CycleConfig(cycle=self.cycle, relaxation=self.relaxation, halt_tol=self.tol,
                        max_iter=self.max_iter, initial_guess=self.initial_guess,
                        psi_init=self.psi_init)
        except ValueError as exc:
            raise ConfigError("cycle", str(exc)) from None
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        return self

    def _state_dim(self) -> int:
        return {"lorenz": 3, "ks": self.n_x, "dahlquist": 1}[self.problem]


def _convert(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    raw = raw.strip()
    try:
        if name == "coarsening":
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            name = _ALIASES.get((section, key), key)
            if name not in _SECTIONS or _SECTIONS[name] != section:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[name] = _convert(name, raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    d = asdict(cfg)
    for name, section in _SECTIONS.items():
        if not cp.has_section(section):
            cp.add_section(section)
        key = "name" if name == "problem" else name
        cp.set(section, key, _fmt(d[name]))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# builders


def build_model(cfg: RunConfig):
    if cfg.problem == "lorenz":
        return Lorenz(LorenzParams(cfg.sigma, cfg.rho, cfg.beta))
    if cfg.problem == "ks":
        return KuramotoSivashinsky(KSDiscretization(L=cfg.length, n_x=cfg.n_x))
    return Dahlquist(cfg.lam)


def lyapunov_time(cfg: RunConfig, model=None) -> float | None:
    if cfg.problem == "dahlquist":
        return None
    return (model or build_model(cfg)).lyapunov_time


def build_grid(cfg: RunConfig, model=None) -> TimeGrid:
    T = cfg.t_final
    if cfg.units == "lyapunov":
        T *= lyapunov_time(cfg, model)
    return TimeGrid(0.0, T / cfg.n_t, cfg.n_t + 1)


def initial_state(cfg: RunConfig, model) -> np.ndarray:
    if cfg.ic != "default":
        return np.array([float(v) for v in cfg.ic.split(",")])
    if cfg.problem == "dahlquist":
        return np.ones(1)
    return model.initial_condition()


def build_forcing(cfg: RunConfig, model=None) -> np.ndarray:
    model = model or build_model(cfg)
    return ivp_forcing(initial_state(cfg, model), cfg.n_t + 1)


def _fine(cfg: RunConfig, model):
    name = cfg.fine_stepper
    if name == "forward-euler":
        return forward_euler(model)
    if name == "backward-euler":
        return backward_euler(model)
    if name == "lobatto-iiic":
        return lobatto_iiic(model)
    return ThetaEuler(model, float(name.split(":", 1)[1]))


def _coarse(cfg: RunConfig, model, M: int):
    """Stepper of a level whose step spans ``M`` fine steps."""
    if not cfg.theta:
        return _fine(cfg, model)
    if cfg.fine_stepper == "forward-euler":
        return ThetaEuler(model, theta_for_euler(M))
    return theta_lobatto_coarse(M, model)


def build_hierarchy(cfg: RunConfig, model=None) -> TimeHierarchy:
    model = model or build_model(cfg)
    grid = build_grid(cfg, model)
    ms = cfg.factors()
    levels = []
    M = 1
    for l in range(cfg.levels):
        stepper = _fine(cfg, model) if l == 0 else _coarse(cfg, model, M)
        if l == cfg.levels - 1:
            levels.append(LevelDescriptor(stepper, theta_enabled=cfg.theta and l > 0))
            break
        mode = cfg.delta if l >= cfg.delta_from else "off"
        levels.append(LevelDescriptor(stepper, ms[l], delta_mode=mode,
                                      rank=cfg.rank if mode == "lowrank" else 0,
                                      theta_enabled=cfg.theta and l > 0,
                                      lv_coarse=cfg.lv_coarse))
        M *= ms[l]
    return TimeHierarchy(grid, levels)


def build_cycle(cfg: RunConfig, workers: int | None = None) -> CycleConfig:
    return CycleConfig(cycle=cfg.cycle, relaxation=cfg.relaxation, halt_tol=cfg.tol,
                       max_iter=cfg.max_iter, initial_guess=cfg.initial_guess,
                       workers=workers or cfg.workers, seed=cfg.seed, psi_init=cfg.psi_init)
