"""Run configuration: one section per pipeline module, YAML on disk.

Unknown keys are rejected so typos fail loudly; every run dumps its
effective configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .consistency import DEFAULT_RECYCLE_MIN_OBS, DEFAULT_THRESHOLD_PX
from .errors import SpecInvalid
from .estimator import EstimatorConfig
from .frontend import DetectionGridConfig
from .geometry import PinholeCamera, PoseSE3
from .imu import ImuNoiseModel
from .semantic import DEFAULT_DYNAMIC_CLASSES, DEFAULT_EPSILON
from .simulator import DEFAULT_EXTRINSIC, NoiseSpec, ObjectSpec, SceneSpec


@dataclass(frozen=True)
class SemanticConfig:
    epsilon: float = DEFAULT_EPSILON
    dynamic_classes: tuple[str, ...] = tuple(sorted(DEFAULT_DYNAMIC_CLASSES))
    depth_median_window: int = 3


@dataclass(frozen=True)
class CompensationConfig:
    miss_limit: int = 5
    iou_threshold: float = 0.3


@dataclass(frozen=True)
class MccConfig:
    threshold_px: float = DEFAULT_THRESHOLD_PX
    recycle_min_obs: int = DEFAULT_RECYCLE_MIN_OBS


@dataclass(frozen=True)
class ImuConfig:
    gyro_noise: float = 1e-4
    accel_noise: float = 1e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    max_dt: float = 0.1
    static_init_duration: float = 0.5

    def noise_model(self) -> ImuNoiseModel:
        return ImuNoiseModel(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk)


@dataclass(frozen=True)
class CameraConfig:
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def model(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class ExtrinsicConfig:
    # camera-to-body: quaternion wxyz plus translation, defaults to the
    # forward-camera convention used by the simulator
    quaternion: tuple[float, float, float, float] = tuple(DEFAULT_EXTRINSIC.q)
    translation: tuple[float, float, float] = tuple(DEFAULT_EXTRINSIC.t)

    def pose(self) -> PoseSE3:
        return PoseSE3(np.array(self.quaternion), np.array(self.translation))


@dataclass(frozen=True)
class AblationConfig:
    disable_circular_mask: bool = False
    disable_detection: bool = False
    disable_seg_like_mask: bool = False
    disable_mcc: bool = False


@dataclass(frozen=True)
class RunConfig:
    vo_mode: bool = False
    sync: bool = True
    join_timeout_ms: float = 100.0
    detection_latency_ms: float = 0.0
    queue_size: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    frontend: DetectionGridConfig = field(default_factory=DetectionGridConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    compensation: CompensationConfig = field(default_factory=CompensationConfig)
    mcc: MccConfig = field(default_factory=MccConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    extrinsic: ExtrinsicConfig = field(default_factory=ExtrinsicConfig)
    pipeline: RunConfig = field(default_factory=RunConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def replace(self, **section_updates) -> "PipelineConfig":
        return dataclasses.replace(self, **section_updates)

    def with_ablation(self, **flags) -> "PipelineConfig":
        return self.replace(ablation=dataclasses.replace(self.ablation, **flags))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = {
                sf.name: _plain(getattr(section, sf.name)) for sf in fields(section)
            }
        return out

    def dump_yaml(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        base = PipelineConfig()
        sections = {}
        known = {f.name: f for f in fields(PipelineConfig)}
        for key, value in (data or {}).items():
            if key not in known:
                raise SpecInvalid(f"unknown config section: {key}")
            section_default = getattr(base, key)
            valid = {sf.name for sf in fields(section_default)}
            unknown = set(value or {}) - valid
            if unknown:
                raise SpecInvalid(f"unknown keys in [{key}]: {sorted(unknown)}")
            coerced = {k: _coerce(section_default, k, v) for k, v in (value or {}).items()}
            sections[key] = dataclasses.replace(section_default, **coerced)
        return base.replace(**sections)

    @staticmethod
    def from_yaml(path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            return PipelineConfig.from_dict(yaml.safe_load(fh) or {})


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, frozenset):
        return sorted(v)
    if isinstance(v, np.ndarray):
        return [float(x) for x in v]
    return v


def _coerce(section, name, value):
    current = getattr(section, name)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


# -- scene spec files -----------------------------------------------------------


def scene_from_dict(data: dict) -> SceneSpec:
    """Build a simulator scene from its YAML form (documented in README)."""
    data = dict(data or {})
    known = {
        "seed", "duration", "frame_rate", "imu_rate", "camera", "room_extent",
        "static_landmarks", "camera_waypoints", "camera_euler_waypoints", "objects",
        "noise", "detectable_classes", "depth_max_range", "min_range",
    }
    unknown = set(data) - known
    if unknown:
        raise SpecInvalid(f"unknown scene keys: {sorted(unknown)}")

    kwargs = {}
    for key in (
        "seed", "duration", "frame_rate", "imu_rate", "room_extent", "static_landmarks",
        "depth_max_range", "min_range",
    ):
        if key in data:
            kwargs[key] = data[key]
    if "camera" in data:
        kwargs["camera"] = CameraConfig(**data["camera"]).model()
    if "camera_waypoints" in data:
        kwargs["camera_waypoints"] = [tuple(w) for w in data["camera_waypoints"]]
    if "camera_euler_waypoints" in data:
        kwargs["camera_euler_waypoints"] = [tuple(w) for w in data["camera_euler_waypoints"]]
    if "noise" in data:
        valid = {f.name for f in fields(NoiseSpec)}
        unknown = set(data["noise"]) - valid
        if unknown:
            raise SpecInvalid(f"unknown noise keys: {sorted(unknown)}")
        noise = dict(data["noise"])
        for k in ("gyro_bias", "accel_bias"):
            if k in noise:
                noise[k] = tuple(noise[k])
        kwargs["noise"] = NoiseSpec(**noise)
    if "objects" in data:
        objs = []
        for od in data["objects"]:
            valid = {"dims", "landmark_count", "waypoints", "class_label"}
            unknown = set(od) - valid
            if unknown:
                raise SpecInvalid(f"unknown object keys: {sorted(unknown)}")
            objs.append(
                ObjectSpec(
                    dims=tuple(od["dims"]),
                    landmark_count=int(od["landmark_count"]),
                    waypoints=[tuple(w) for w in od["waypoints"]],
                    class_label=od.get("class_label", "person"),
                )
            )
        kwargs["objects"] = objs
    if "detectable_classes" in data:
        kwargs["detectable_classes"] = frozenset(data["detectable_classes"])
    return SceneSpec(**kwargs)


def scene_from_yaml(path: str | Path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh) or {})
