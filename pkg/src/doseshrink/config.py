"""Run configuration: an INI file with named blocks of ``key = value`` lines.

Example::

    [run]
    seed = 20240501
    threads = 2

    [data]
    path = trial.csv
    dose = dose
    response = response
    continuous = age, weight
    categorical = sex, region

    [prior]
    family = rhs              ; sas, hs, rhs, noshrink, null
    dependent = true
    eta_beta = auto           ; a number, or auto to calibrate
    eta_gamma = auto
    eta_delta = auto
    guesstimates = prefit     ; prefit, or "E0, Emax"

    [mcmc]
    chains = 4
    warmup = 1000
    draws = 1000

    [subgroup]
    psi = 0.2
    omega = 0.5
    d_star = 100

    [output]
    dir = runs/fit1
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .calibration import MIN_MC
from .mcmc import MCMCConfig
from .priors import PriorSpec


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


AUTO = "auto"


def _list(value: str) -> tuple:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _opt_float(value: str):
    v = value.strip()
    if v == "" or v.lower() == "none":
        return None
    if v.lower() == AUTO:
        return AUTO
    return float(v)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class DataBlock:
    path: str = ""
    dose: str = "dose"
    response: str = "response"
    continuous: tuple = ()
    categorical: tuple = ()
    standardize: bool = True


@dataclass(frozen=True)
class PriorBlock:
    family: str = "rhs"
    dependent: bool = True
    phi: float | None = None
    phi_inc: float = 0.8
    eta_beta: object = AUTO
    eta_gamma: object = AUTO
    eta_delta: object = AUTO
    guesstimates: object = "prefit"     # "prefit" or (E0*, Emax*)

    @property
    def needs_calibration(self) -> bool:
        return self.family in ("hs", "rhs", "horseshoe", "reg_horseshoe") and AUTO in (
            self.eta_beta, self.eta_gamma, self.eta_delta)

    def to_spec(self, etas: dict | None = None) -> PriorSpec:
        kw = {"phi_inc": self.phi_inc}
        if self.phi is not None:
            kw["phi"] = self.phi
        for name in ("eta_beta", "eta_gamma", "eta_delta"):
            v = getattr(self, name)
            if v == AUTO:
                v = (etas or {}).get(name)
            if v is not None:
                kw[name] = float(v)
        label = self.family + ("_dep" if self.dependent else "")
        try:
            return PriorSpec.from_label(label, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SubgroupBlock:
    psi: float = 0.2
    omega: float = 0.5
    d_star: float | None = None
    level: float = 0.5


@dataclass(frozen=True)
class CalibrationBlock:
    n_mc: int = 1_000_000
    eta_lo: float = 1e-5
    eta_hi: float = 10.0
    phi: float | None = None
    family: str = "rhs"
    k: int | None = None


@dataclass(frozen=True)
class SimulationBlock:
    scenarios: tuple = ("null", "only_pred", "prog_and_pred")
    methods: tuple = ("rhs", "rhs_dep")
    reps: int = 50
    n: int = 500
    k: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int | None = None
    out: str = "doseshrink_out"
    data: DataBlock = field(default_factory=DataBlock)
    prior: PriorBlock = field(default_factory=PriorBlock)
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    subgroup: SubgroupBlock = field(default_factory=SubgroupBlock)
    calibration: CalibrationBlock = field(default_factory=CalibrationBlock)
    simulation: SimulationBlock = field(default_factory=SimulationBlock)

    def mcmc_config(self) -> MCMCConfig:
        return replace(self.mcmc, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


_BLOCKS = ("data", "prior", "mcmc", "subgroup", "calibration", "simulation")
_TYPES = {DataBlock: {"continuous": _list, "categorical": _list, "standardize": _bool},
          PriorBlock: {"dependent": _bool, "phi": _opt_float, "phi_inc": float,
                       "eta_beta": _opt_float, "eta_gamma": _opt_float, "eta_delta": _opt_float},
          SubgroupBlock: {"psi": float, "omega": float, "d_star": _opt_float, "level": float},
          CalibrationBlock: {"n_mc": lambda v: int(float(v)), "eta_lo": float, "eta_hi": float,
                             "phi": _opt_float, "k": lambda v: int(v) if v.strip() else None},
          SimulationBlock: {"scenarios": _list, "methods": _list, "reps": int, "n": int, "k": int},
          MCMCConfig: {"chains": int, "warmup": int, "draws": int, "target_accept": float,
                       "max_treedepth": int, "seed": int, "init_jitter": float, "init_attempts": int}}


def _guesstimates(value: str):
    v = value.strip()
    if v.lower() == "prefit":
        return "prefit"
    parts = _list(v)
    if len(parts) != 2:
        raise ConfigError("guesstimates must be 'prefit' or 'E0, Emax'")
    return tuple(float(p) for p in parts)


_TYPES[PriorBlock]["guesstimates"] = _guesstimates


def _build(cls, section) -> object:
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        conv = _TYPES[cls].get(key, str)
        try:
            kw[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}]: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a :class:`RunConfig`; unknown blocks or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    kw = {}
    for sec in cp.sections():
        if sec == "run":
            for key, raw in cp[sec].items():
                if key == "seed":
                    kw["seed"] = int(raw)
                elif key == "threads":
                    kw["threads"] = int(raw) if raw.strip() else None
                else:
                    raise ConfigError(f"unknown key {key!r} in [run]")
        elif sec == "output":
            for key, raw in cp[sec].items():
                if key != "dir":
                    raise ConfigError(f"unknown key {key!r} in [output]")
                kw["out"] = raw.strip()
        elif sec in _BLOCKS:
            kw[sec] = _build(_block_class(sec), cp[sec])
        else:
            raise ConfigError(f"unknown block [{sec}]")
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def _block_class(name):
    return {"data": DataBlock, "prior": PriorBlock, "mcmc": MCMCConfig, "subgroup": SubgroupBlock,
            "calibration": CalibrationBlock, "simulation": SimulationBlock}[name]


def validate(cfg: RunConfig) -> None:
    if not 0 < cfg.subgroup.omega <= 1 or cfg.subgroup.omega < 0.5:
        raise ConfigError("omega must lie in [0.5, 1]")
    if not 0 < cfg.subgroup.level < 1:
        raise ConfigError("HPD level must lie in (0, 1)")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.calibration.n_mc < MIN_MC:
        raise ConfigError(f"[calibration] n_mc must be at least {MIN_MC}")
    g = cfg.prior.guesstimates
    if g != "prefit" and (len(g) != 2 or 0 in g):
        raise ConfigError("guesstimates must be nonzero")


def serialize_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": _fmt(cfg.seed), "threads": _fmt(cfg.threads)}
    for name in _BLOCKS:
        block = getattr(cfg, name)
        vals = {}
        for f in fields(block):
            v = getattr(block, f.name)
            if f.name == "guesstimates" and v != "prefit":
                v = tuple(float(x) for x in v)
            vals[f.name] = _fmt(v)
        cp[name] = vals
    cp["output"] = {"dir": cfg.out}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> RunConfig:
    """Read a config file; relative data paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        cfg = replace(cfg, data=replace(cfg.data, path=str((path.parent / cfg.data.path).resolve())))
    return cfg
