"""Run configuration: a YAML document mapped onto nested dataclasses.

Every key is optional and defaults to the values below; unknown keys, wrong
types and out-of-range values are rejected before any work starts. See the
README for an annotated example.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .quantum import CascadeModelParams
from .sim import DriftProfile, SimConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class CascadeSection:
    fss_energy: float = 2.54  # ueV
    t1_x: float = 162.0  # ps
    t1_xx: float = 120.0  # ps
    jitter_fwhm_2ph: float = 50.0  # ps, used by the model curve and lifetime fit
    basis_rotation: float = 0.0  # deg


@dataclass
class DriftSection:
    kind: str = "none"
    amplitude: float = 0.0
    period_or_slope: float = 0.0


@dataclass
class SimulationSection:
    rep_rate: float = 1.0  # GHz
    pulse_count: int = 1_000_000  # per combination
    excitation_power: float = 9.0  # uW
    pi_pulse_power: float = 9.0  # uW
    efficiency_x: float = 0.5
    efficiency_xx: float = 0.5
    detector_jitter_fwhm: float = 20.0  # ps
    electronics_jitter_fwhm: float = SimConfig.electronics_jitter_fwhm  # ps
    dark_rate_x: float = 0.0  # Hz
    dark_rate_xx: float = 0.0  # Hz
    iterations: int = 1
    drift: DriftSection = field(default_factory=DriftSection)


@dataclass
class CorrelationSection:
    bin_width: int = 8  # ps
    window: int = 25_000  # ps
    xx_channel: int = 0
    x_channel: int = 1


@dataclass
class TomographySection:
    tau_min: float = -1000.0  # ps, histogram delay (t_XX - t_X)
    tau_max: float = 200.0
    tau_bin: int = 8
    bootstrap: int = 0
    count_floor: float = 200.0
    background: typing.Union[str, float, None] = "auto"


@dataclass
class AnalysisSection:
    rate_window: float = 1.0  # s
    pairing: int = 2
    bootstrap: int = 100
    lifetime_fit_range: typing.Optional[typing.List[float]] = None  # [lo, hi] ps


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "out"
    cascade: CascadeSection = field(default_factory=CascadeSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    correlation: CorrelationSection = field(default_factory=CorrelationSection)
    tomography: TomographySection = field(default_factory=TomographySection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def cascade_params(self) -> CascadeModelParams:
        return CascadeModelParams(**dataclasses.asdict(self.cascade))

    def sim_config(self) -> SimConfig:
        s = self.simulation
        d = s.drift
        drift = None if d.kind == "none" else DriftProfile(d.kind, d.amplitude, d.period_or_slope)
        kw = {f.name: getattr(s, f.name) for f in dataclasses.fields(s) if f.name not in ("iterations", "drift")}
        return SimConfig(cascade=self.cascade_params(), seed=self.seed, drift=drift, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form; identical configs give identical digests."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: {value!r} matches none of the allowed types")
    if origin in (list, typing.List):
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool or isinstance(value, bool):
        if tp is not bool or not isinstance(value, bool):
            raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown key(s){where}: {', '.join(map(str, unknown))}")
    kw = {}
    for k, v in data.items():
        kw[k] = _coerce(v, hints[k], f"{path}.{k}" if path else k)
    return cls(**kw)


def _validate(cfg: RunConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} is not supported (expected {SCHEMA_VERSION})")
    if cfg.simulation.iterations < 1:
        raise ConfigError("simulation.iterations must be at least 1")
    c = cfg.correlation
    if c.bin_width < 1 or c.window <= 0:
        raise ConfigError("correlation.bin_width must be >= 1 and correlation.window > 0")
    t = cfg.tomography
    if t.tau_bin < 1 or t.tau_bin % c.bin_width:
        raise ConfigError(f"tomography.tau_bin {t.tau_bin} must be a positive multiple of correlation.bin_width {c.bin_width}")
    if not t.tau_max > t.tau_min:
        raise ConfigError("tomography.tau_max must exceed tomography.tau_min")
    if isinstance(t.background, str) and t.background not in ("auto", "none"):
        raise ConfigError(f"tomography.background must be 'auto', 'none' or a number, got {t.background!r}")
    if t.bootstrap and t.bootstrap < 100:
        raise ConfigError("tomography.bootstrap must be 0 or at least 100")
    a = cfg.analysis
    if a.rate_window <= 0 or a.pairing < 1:
        raise ConfigError("analysis.rate_window must be positive and analysis.pairing >= 1")
    if a.lifetime_fit_range is not None and (len(a.lifetime_fit_range) != 2 or a.lifetime_fit_range[1] <= a.lifetime_fit_range[0]):
        raise ConfigError("analysis.lifetime_fit_range must be [lo, hi] with hi > lo")
    try:
        cfg.sim_config()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"simulation: {e}") from e


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {p}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    return config_from_dict(data)
