"""Pipeline configuration: one TOML file, one section per stage.

Every command resolves its settings from defaults, then the config file,
then command-line flags, and writes the fully resolved result next to its
outputs so a run can be reproduced from the artifact directory alone.
Unknown sections or keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ImportError:  # stdlib from 3.11; the backport is API-identical
    import tomli as tomllib

from .geometry import DEFAULT_R_MID


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    master_seed: int = 0
    threads: int = 0  # 0 keeps the library defaults


@dataclass
class GeometrySection:
    r_max: float = 1.0e-3
    r_mid: float = DEFAULT_R_MID
    domain_x: float = 0.05
    domain_y: float = 0.005


@dataclass
class OracleSection:
    t_in: float = 298.15
    q: float = 210.0
    k_p: float = 50.0
    c_s: float = 0.5
    h0: float = 100.0
    c_v: float = 2.0
    delta_r: list = field(default_factory=lambda: [0.6, 1.0])
    delta_theta: list = field(default_factory=lambda: [-0.5, 0.5])
    eta_curv: list = field(default_factory=lambda: [0.0, 1.0])
    x_shift: list = field(default_factory=lambda: [[0.010, 0.020], [0.030, 0.040]])
    y_shift: list = field(default_factory=lambda: [[2.0e-3, 3.0e-3], [2.0e-3, 3.0e-3]])


@dataclass
class DdpmSection:
    t_steps: int = 1000
    s: float = 0.008
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1.0e-4
    weight_decay: float = 0.0
    val_fraction: float = 0.05
    dropout: float = 0.1


@dataclass
class SurrogatesSection:
    n_knots: int = 1000
    epochs_temperature: int = 1200
    epochs_pressure: int = 1000


@dataclass
class GuidanceSection:
    eta: float = 0.01
    lambda_p: float = 0.4
    lambda_t: float = 0.4
    delta_t: float = 5.0
    n_samples: int = 500


@dataclass
class CmaesSection:
    rho: float = 10.0
    delta_t: float = 5.0
    population: int = 0  # 0 means the dimension-based default


@dataclass
class PathsSection:
    out_root: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    oracle: OracleSection = field(default_factory=OracleSection)
    ddpm: DdpmSection = field(default_factory=DdpmSection)
    surrogates: SurrogatesSection = field(default_factory=SurrogatesSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    cmaes: CmaesSection = field(default_factory=CmaesSection)
    paths: PathsSection = field(default_factory=PathsSection)


def _apply_section(obj, name, data):
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        setattr(obj, key, value)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for name, payload in data.items():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(payload, dict):
            raise ConfigError(f"top-level key {name} must be a section")
        _apply_section(sections[name], name, payload)
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"unsupported config value type: {type(value).__name__}")


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        lines.append(f"[{section_field.name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))


# ---- adapters to the module-level config objects ----


def oracle_config(cfg: RunConfig):
    from .geometry import Domain
    from .oracle import OracleConfig

    g = cfg.geometry
    o = cfg.oracle
    domain = Domain(x_min=0.0, x_max=g.domain_x, y_min=0.0, y_max=g.domain_y)
    return OracleConfig(t_in=o.t_in, q=o.q, k_p=o.k_p, c_s=o.c_s, h0=o.h0,
                        c_v=o.c_v, domain=domain)


def parameter_bounds(cfg: RunConfig):
    from .oracle import ParameterBounds

    o = cfg.oracle
    g = cfg.geometry
    return ParameterBounds(
        r_max=g.r_max,
        r_mid=g.r_mid,
        delta_r=tuple(o.delta_r),
        delta_theta=tuple(o.delta_theta),
        eta_curv=tuple(o.eta_curv),
        x_shift=tuple(tuple(w) for w in o.x_shift),
        y_shift=tuple(tuple(w) for w in o.y_shift),
    )


def train_config(cfg: RunConfig):
    from .diffusion import TrainConfig

    d = cfg.ddpm
    return TrainConfig(epochs=d.epochs, batch_size=d.batch_size, lr=d.lr,
                       weight_decay=d.weight_decay, val_fraction=d.val_fraction,
                       seed=cfg.run.master_seed)


def unet_config(cfg: RunConfig):
    from .diffusion import UNetConfig

    return UNetConfig(dropout=cfg.ddpm.dropout)


def surrogate_configs(cfg: RunConfig):
    from .surrogate import pressure_config, temperature_config

    s = cfg.surrogates
    t_cfg = temperature_config(epochs=s.epochs_temperature, n_knots=s.n_knots,
                               seed=cfg.run.master_seed)
    p_cfg = pressure_config(epochs=s.epochs_pressure, n_knots=s.n_knots,
                            seed=cfg.run.master_seed)
    return t_cfg, p_cfg


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
