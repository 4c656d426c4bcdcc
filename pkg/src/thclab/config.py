"""Run configuration: a line-oriented ``key = value`` format with ``[section]`` headers.

Values use TOML syntax (numbers, strings, booleans, single-line arrays), so
each value is handed to a TOML parser on its own.  The file as a whole is
parsed line by line so every problem can be reported with its line number,
and all problems are reported together.

Example::

    [grid]
    ny = 64
    nz = 32

    [noise]
    seed = 1234
    trace = 0.1
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import Grid, make_grid
from .noise import CovarianceSpectrum, NoisePath
from .operators import (
    PhysParams,
    State,
    flux_cosine,
    flux_integral_tolerance,
    state_from_vorticity,
    theta_cosine,
)
from .grid import integrate_profile

MODES = ("simulate", "twin", "pullback", "ou-check", "constants", "cocycle-check")


class ConfigError(ValueError):
    """All problems found in a config, each as ``(line, message)``."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = sorted(errors)
        lines = [f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


@dataclass
class GridConfig:
    ny: int = 64
    nz: int = 32
    l: float = 1.0
    d: float = 1.0


@dataclass
class PhysicsConfig:
    nu: float = 0.5
    kappa_T: float = 0.5
    kappa_S: float = 0.5
    g: float = 1.0
    alpha_T: float = 1.0
    alpha_S: float = 1.0
    lam: float = 5.0
    k: float = 1.0


@dataclass
class ForcingConfig:
    theta: str | list = "cosine"
    theta0: float = 1.0
    F: str | list = "cosine"
    F0: float = 0.1


@dataclass
class NoiseConfig:
    seed: int = 0
    s_q: float = 2.0
    trace: float = 0.1
    cutoff: int | None = None
    table: list | None = None


@dataclass
class TimeConfig:
    t0: float = 0.0
    t1: float = 4.0
    dt: float = 2e-3
    snapshot_every: int = 500
    diag_every: int = 1


@dataclass
class InitialConfig:
    preset: str = "default"
    amplitude: float = 1.0
    eta: str = "stationary"


@dataclass
class ExperimentConfig:
    mode: str = "simulate"
    perturb_scale: float = 1e-3
    modes: int = 16
    t_back: list = field(default_factory=lambda: [5.0, 10.0, 20.0])
    window: float = 1.0
    rel_tol: float = 1e-6
    s_X: float = 0.2
    ou_samples: int = 10000
    cocycle_splits: int = 10


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def nsteps(self) -> int:
        return int(round((self.time.t1 - self.time.t0) / self.time.dt))

    @property
    def start_step(self) -> int:
        return int(round(self.time.t0 / self.time.dt))

    def with_mode(self, mode: str) -> "RunConfig":
        return replace(self, experiment=replace(self.experiment, mode=mode))


SECTIONS = {
    "grid": GridConfig,
    "physics": PhysicsConfig,
    "forcing": ForcingConfig,
    "noise": NoiseConfig,
    "time": TimeConfig,
    "initial": InitialConfig,
    "experiment": ExperimentConfig,
}
# config keys that differ from the dataclass attribute
KEY_ALIASES = {("physics", "lambda"): "lam"}
ATTR_KEYS = {(s, a): k for (s, k), a in KEY_ALIASES.items()}
REQUIRED = {("noise", "seed")}

INT_KEYS = {
    ("grid", "ny"), ("grid", "nz"), ("noise", "seed"), ("noise", "cutoff"),
    ("time", "snapshot_every"), ("time", "diag_every"),
    ("experiment", "modes"), ("experiment", "ou_samples"), ("experiment", "cocycle_splits"),
}


def _attr(section: str, key: str) -> str:
    return KEY_ALIASES.get((section, key), key)


def _key(section: str, attr: str) -> str:
    return ATTR_KEYS.get((section, attr), attr)


def _coerce(section: str, key: str, value, default):
    """Check a parsed TOML value against the field's type; return it or raise ValueError."""
    if (section, key) in INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if section == "forcing" and key in ("theta", "F"):
        if isinstance(value, str):
            if value != "cosine":
                raise ValueError(f"forcing.{key}: unknown preset {value!r} (known: 'cosine')")
            return value
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return [float(v) for v in value]
        raise ValueError(f"forcing.{key} must be 'cosine' or an array of node values")
    if (section, key) == ("noise", "table"):
        ok = isinstance(value, list) and all(
            isinstance(r, list) and len(r) == 3 and all(isinstance(x, (int, float)) for x in r) for r in value
        )
        if not ok:
            raise ValueError("noise.table must be an array of [m, n, q] rows")
        return [[int(r[0]), int(r[1]), float(r[2])] for r in value]
    if (section, key) == ("experiment", "t_back"):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ValueError("experiment.t_back must be an array of durations")
        return [float(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{section}.{key} must be a string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{section}.{key} must be a number, got {value!r}")
    return float(value)


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; raise ConfigError listing every problem."""
    errors: list[tuple[int, str]] = []
    seen: dict[tuple[str, str], int] = {}
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    section_lines: dict[str, int] = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                errors.append((ln, f"malformed section header {line!r}"))
                section = None
                continue
            name = line[1:-1].strip()
            if name not in SECTIONS:
                errors.append((ln, f"unknown section [{name}]"))
                section = ""  # skip its keys; the header error covers them
                continue
            section = name
            section_lines.setdefault(name, ln)
            continue
        if "=" not in line:
            errors.append((ln, f"expected 'key = value', got {line!r}"))
            continue
        key, _, rawval = line.partition("=")
        key = key.strip()
        if section == "":
            continue
        if section is None:
            errors.append((ln, f"key {key!r} outside a known section"))
            continue
        names = {f.name for f in fields(SECTIONS[section])}
        attr = _attr(section, key)
        if attr not in names or (section, attr) in ATTR_KEYS and key == attr:
            errors.append((ln, f"unknown key {section}.{key}"))
            continue
        if (section, key) in seen:
            errors.append((ln, f"duplicate key {section}.{key} (first set on line {seen[section, key]}, again on line {ln})"))
            continue
        seen[(section, key)] = ln
        try:
            value = tomllib.loads("v = " + rawval.strip())["v"]
        except tomllib.TOMLDecodeError as exc:
            errors.append((ln, f"cannot parse value for {section}.{key}: {exc}"))
            continue
        default = getattr(SECTIONS[section](), attr)
        try:
            values[section][attr] = _coerce(section, key, value, default)
        except ValueError as exc:
            errors.append((ln, str(exc)))
    for sec, key in REQUIRED:
        if (sec, key) not in seen:
            errors.append((0, f"missing required key {sec}.{key}"))
    # keys that failed to parse keep their defaults, so cross-field checks
    # still run and every problem is reported in one pass
    cfg = RunConfig(**{s: SECTIONS[s](**values[s]) for s in SECTIONS})
    for where, msg in validate(cfg):
        ln = seen.get((where[0], _key(*where)), section_lines.get(where[0], 0))
        errors.append((ln, msg))
    if errors:
        raise ConfigError(errors)
    return cfg


def _is_multiple(x: float, dt: float) -> bool:
    n = x / dt
    return abs(n - round(n)) <= 1e-9 * max(1.0, abs(n))


def validate(cfg: RunConfig) -> list[tuple[tuple[str, str], str]]:
    """Cross-field checks; each problem is keyed by the (section, key) it concerns."""
    out = []
    g, p, f, n, t, ic, ex = cfg.grid, cfg.physics, cfg.forcing, cfg.noise, cfg.time, cfg.initial, cfg.experiment
    grid = None
    try:
        grid = make_grid(g.ny, g.nz, g.l, g.d)
    except ValueError as exc:
        out.append((("grid", "ny"), str(exc)))
    for name in ("nu", "kappa_T", "kappa_S", "lam"):
        v = getattr(p, name)
        if not (math.isfinite(v) and v > 0):
            out.append((("physics", _key("physics", name)), f"physics.{_key('physics', name)} must be > 0, got {v!r}"))
    for name in ("g", "alpha_T", "alpha_S", "k"):
        v = getattr(p, name)
        if not (math.isfinite(v) and v >= 0):
            out.append((("physics", name), f"physics.{name} must be >= 0, got {v!r}"))
    if grid is not None:
        for key in ("theta", "F"):
            prof = getattr(f, key)
            if isinstance(prof, list) and len(prof) != grid.ny:
                out.append((("forcing", key), f"forcing.{key} has {len(prof)} values, grid has ny = {grid.ny}"))
        if isinstance(f.F, list) and len(f.F) == grid.ny:
            F = np.asarray(f.F)
            total = integrate_profile(F, grid)
            if abs(total) > flux_integral_tolerance(F, grid):
                out.append((("forcing", "F"), f"forcing.F must integrate to zero over [-l, l]; trapezoid integral = {total:.6e}"))
        if n.table is not None:
            for m_, n_, q_ in n.table:
                if not (0 <= m_ < grid.ny and 0 <= n_ < grid.nz):
                    out.append((("noise", "table"), f"noise.table mode ({m_}, {n_}) outside the grid"))
                elif q_ < 0 or not math.isfinite(q_):
                    out.append((("noise", "table"), f"noise.table weight for ({m_}, {n_}) must be >= 0"))
                elif (m_, n_) == (0, 0) and q_ != 0:
                    out.append((("noise", "table"), "noise.table: the constant mode (0, 0) must carry no noise"))
    if not (math.isfinite(n.trace) and n.trace >= 0):
        out.append((("noise", "trace"), f"noise.trace must be >= 0, got {n.trace!r}"))
    if n.cutoff is not None and n.cutoff < 1:
        out.append((("noise", "cutoff"), "noise.cutoff must be >= 1"))
    if not (math.isfinite(t.dt) and t.dt > 0):
        out.append((("time", "dt"), f"time.dt must be > 0, got {t.dt!r}"))
    else:
        if not (t.t1 >= t.t0):
            out.append((("time", "t1"), f"time.t1 = {t.t1} is before t0 = {t.t0}"))
        elif not _is_multiple(t.t1 - t.t0, t.dt):
            out.append((("time", "t1"), "time.t1 - t0 must be a whole number of steps"))
        if not _is_multiple(t.t0, t.dt):
            out.append((("time", "t0"), "time.t0 must be a whole number of steps"))
        if any(tb < 0 or not _is_multiple(tb, t.dt) for tb in ex.t_back):
            out.append((("experiment", "t_back"), "experiment.t_back entries must be non-negative multiples of dt"))
        if not _is_multiple(ex.window, t.dt) or ex.window <= 0:
            out.append((("experiment", "window"), "experiment.window must be a positive multiple of dt"))
    if list(ex.t_back) != sorted(ex.t_back):
        out.append((("experiment", "t_back"), "experiment.t_back must be sorted ascending"))
    if t.snapshot_every < 1 or t.diag_every < 1:
        out.append((("time", "snapshot_every"), "snapshot and diagnostic cadences must be >= 1"))
    if ic.preset not in ("default", "zero"):
        out.append((("initial", "preset"), f"initial.preset must be 'default' or 'zero', got {ic.preset!r}"))
    if not math.isfinite(ic.amplitude):
        out.append((("initial", "amplitude"), f"initial.amplitude must be finite, got {ic.amplitude!r}"))
    if ic.eta not in ("stationary", "zero"):
        out.append((("initial", "eta"), f"initial.eta must be 'stationary' or 'zero', got {ic.eta!r}"))
    if ex.mode not in MODES:
        out.append((("experiment", "mode"), f"experiment.mode must be one of {', '.join(MODES)}"))
    if ex.modes < 1:
        out.append((("experiment", "modes"), "experiment.modes must be >= 1"))
    if not (0 < ex.s_X):
        out.append((("experiment", "s_X"), "experiment.s_X must be > 0"))
    if not (0 < ex.rel_tol < 1):
        out.append((("experiment", "rel_tol"), "experiment.rel_tol must lie in (0, 1)"))
    if ex.ou_samples < 1 or ex.cocycle_splits < 1:
        out.append((("experiment", "ou_samples"), "sample counts must be >= 1"))
    return out


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_render_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r}")


def render_config(cfg: RunConfig) -> str:
    """Text form of a config; ``parse_config(render_config(c)) == c``."""
    out = []
    for sec, cls in SECTIONS.items():
        out.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f_ in fields(cls):
            v = getattr(obj, f_.name)
            if v is None:
                continue
            out.append(f"{_key(sec, f_.name)} = {_render_value(v)}")
        out.append("")
    return "\n".join(out)


# --- building the model -----------------------------------------------------

def build_grid(cfg: RunConfig) -> Grid:
    return make_grid(cfg.grid.ny, cfg.grid.nz, cfg.grid.l, cfg.grid.d)


def build_params(cfg: RunConfig, grid: Grid | None = None) -> PhysParams:
    grid = build_grid(cfg) if grid is None else grid
    f, p = cfg.forcing, cfg.physics
    theta = theta_cosine(grid, f.theta0) if f.theta == "cosine" else np.asarray(f.theta, dtype=float)
    F = flux_cosine(grid, f.F0) if f.F == "cosine" else np.asarray(f.F, dtype=float)
    params = PhysParams(p.nu, p.kappa_T, p.kappa_S, p.g, p.alpha_T, p.alpha_S, p.lam, p.k, theta, F)
    params.check(grid)
    return params


def build_spectrum(cfg: RunConfig, grid: Grid | None = None) -> CovarianceSpectrum:
    grid = build_grid(cfg) if grid is None else grid
    n = cfg.noise
    if n.table is not None:
        return CovarianceSpectrum.from_table(grid, [tuple(r) for r in n.table])
    return CovarianceSpectrum.power_law(grid, n.s_q, n.trace, n.cutoff)


def build_path(cfg: RunConfig) -> NoisePath:
    return NoisePath(cfg.noise.seed, cfg.time.dt)


def initial_state(cfg: RunConfig, grid: Grid | None = None) -> State:
    """Initial fields; the default preset is a smooth overturning cell with mean-zero salinity."""
    grid = build_grid(cfg) if grid is None else grid
    A = cfg.initial.amplitude
    if cfg.initial.preset == "zero":
        return State.zeros(grid, cfg.time.t0)
    Y, Z = grid.mesh()
    q = -3.0 * A * np.sin(np.pi * (Y + grid.l) / (2.0 * grid.l)) * np.sin(np.pi * Z / grid.d)
    T = 0.5 * A * np.cos(np.pi * Z / grid.d)
    S = 0.2 * A * np.cos(np.pi * Y / grid.l)
    S -= np.sum(grid.weights() * S) / grid.area
    return state_from_vorticity(q, T, S, grid, cfg.time.t0)
