"""Experiment configuration: dataclasses plus a YAML loader.

The file has one mapping per section (``vehicle``, ``terrain``, ``track``,
``baseline``, ``ga``, ``noise``, ``experiment``). Angles may be given in
degrees with a ``_deg`` suffix (``slope_deg: 30``).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .baseline import BaselineConfig
from .errors import ConfigError
from .learner import GAConfig
from .track import Track, stadium
from .vehicle import DT_SIM, TerrainParams, VehicleParams

CONTROLLERS = ("baseline", "ga")


@dataclass(frozen=True)
class TrackConfig:
    file: str | None = None
    desired_speed: float = 0.2
    straight: float = 1.4
    radius: float = 0.8
    spacing: float = 0.05

    def build(self) -> Track:
        if self.file:
            try:
                return Track.from_file(self.file, self.desired_speed)
            except OSError as exc:
                raise ConfigError(f"cannot read track file {self.file!r}: {exc}") from exc
        return stadium(self.straight, self.radius, self.spacing, desired_speed=self.desired_speed)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_pos: float = 1.3e-4
    sigma_rot: float = 0.83e-4
    sigma_slope: float = 0.0
    beta: float = 0.5
    pose_alpha: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    controller: str = "baseline"
    laps: int = 10
    seed: int = 0
    dt_control: float = 0.2
    dt_sim: float = DT_SIM
    initial_offset: float = 0.3
    initial_arc: float = 0.0
    convergence_window: float | None = None  # None: one nominal lap time
    convergence_eps: float = 0.05
    max_time: float = 3600.0
    timing: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    terrain: TerrainParams = field(default_factory=TerrainParams)
    track: TrackConfig = field(default_factory=TrackConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    ga: GAConfig = field(default_factory=GAConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    experiment: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        run = self.experiment
        if run.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {run.controller!r}")
        if run.laps < 1:
            raise ConfigError("laps must be >= 1")
        if not (run.dt_control > 0 and run.dt_sim > 0):
            raise ConfigError("time steps must be positive")
        if abs(self.baseline.wheelbase - self.vehicle.wheelbase) > 1e-12:
            raise ConfigError("baseline wheelbase must match the vehicle wheelbase")

    def replace(self, **sections) -> "ExperimentConfig":
        """Return a copy with fields of the named sections replaced.

        ``cfg.replace(experiment={"seed": 3}, terrain={"mu_s": 4})``
        """
        kwargs = {}
        for name, changes in sections.items():
            current = getattr(self, name)
            kwargs[name] = dataclasses.replace(current, **changes) if isinstance(changes, dict) else changes
        try:
            return dataclasses.replace(self, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "vehicle": VehicleParams,
    "terrain": TerrainParams,
    "track": TrackConfig,
    "baseline": BaselineConfig,
    "ga": GAConfig,
    "noise": NoiseConfig,
    "experiment": RunConfig,
}


def _section(cls, raw: dict, name: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        if key.endswith("_deg") and key[:-4] in names:
            key, value = key[:-4], math.radians(float(value))
        if key not in names:
            raise ConfigError(f"unknown key {name}.{key}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        values[key] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    track = sections["track"]
    if track.file and base_dir is not None and not Path(track.file).is_absolute():
        sections["track"] = dataclasses.replace(track, file=str(base_dir / track.file))
    if "baseline" not in raw or "wheelbase" not in (raw.get("baseline") or {}):
        sections["baseline"] = dataclasses.replace(sections["baseline"],
                                                   wheelbase=sections["vehicle"].wheelbase)
    return ExperimentConfig(**sections)


def load_config(path=None) -> ExperimentConfig:
    """Load a YAML config file; ``None`` loads the packaged defaults."""
    if path is None:
        text = resources.files("terralearn").joinpath("data/default.yaml").read_text()
        return from_dict(yaml.safe_load(text))
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {str(path)!r}: {exc}") from exc
    return from_dict(raw, path.parent)
