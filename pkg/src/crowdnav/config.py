"""Operator-facing pipeline configuration.

One JSON document collects every tunable: lens coefficients, homography
descent settings, the floor-scale calibration (including the imaged
vertical lines the optical-center foot point is recovered from), map
geometry, training hyperparameters, scenario defaults, the detection-log
build settings, and the serve endpoint. Parsing is strict: unknown keys
are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from crowdnav import geometry
from crowdnav.geometry import DistortionCoeffs, GdConfig
from crowdnav.neuralnet import TrainConfig
from crowdnav.tracking import FloorScale


class ConfigError(ValueError):
    pass


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where!r}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in {where!r}: {e}") from None


@dataclass
class FloorConfig:
    cm_per_px: float = 1.0
    h_camera: float = 600.0
    h_human: float = 150.0
    h_robot: float = 40.0
    # imaged world-vertical lines, endpoint pairs; their least-squares
    # intersection is the optical-center foot point
    optical_center_lines: list = field(
        default_factory=lambda: [[[0.0, -10.0], [0.0, 10.0]], [[-10.0, 0.0], [10.0, 0.0]]]
    )

    def scale(self) -> FloorScale:
        lines = [(tuple(a), tuple(b)) for a, b in self.optical_center_lines]
        center = geometry.optical_center_from_lines(lines)
        return FloorScale(
            cm_per_px=self.cm_per_px,
            h_camera=self.h_camera,
            h_human=self.h_human,
            h_robot=self.h_robot,
            optical_center=center,
        )


@dataclass
class MapConfig:
    extent_cm: float = 640.0
    person_radius_cm: float = 25.0


@dataclass
class ScenarioConfig:
    arena: list = field(default_factory=lambda: [800.0, 500.0])
    dt: float = 0.2
    max_steps: int = 400


@dataclass
class DatasetBuildConfig:
    # one detection log covers one trial toward a single goal point
    goal: list = field(default_factory=lambda: [740.0, 250.0])
    walls: list = field(
        default_factory=lambda: [[0.0, 0.0, 800.0, 20.0], [0.0, 480.0, 800.0, 500.0]]
    )
    dt: float = 0.2


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    tick_rate: float = 10.0


@dataclass
class PipelineConfig:
    distortion: DistortionCoeffs = field(default_factory=DistortionCoeffs)
    gd: GdConfig = field(default_factory=GdConfig)
    floor: FloorConfig = field(default_factory=FloorConfig)
    map: MapConfig = field(default_factory=MapConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    dataset: DatasetBuildConfig = field(default_factory=DatasetBuildConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    _SECTIONS = {
        "distortion": DistortionCoeffs,
        "gd": GdConfig,
        "floor": FloorConfig,
        "map": MapConfig,
        "train": TrainConfig,
        "scenario": ScenarioConfig,
        "dataset": DatasetBuildConfig,
        "serve": ServeConfig,
    }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(cls._SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}")
        kwargs = {
            name: _strict(section_cls, d[name], name)
            for name, section_cls in cls._SECTIONS.items()
            if name in d
        }
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in self._SECTIONS}


def default_config() -> PipelineConfig:
    return PipelineConfig()


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    return PipelineConfig.from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
