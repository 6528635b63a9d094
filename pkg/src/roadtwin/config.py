"""Pipeline configuration: schema, validation, defaults, and seeding.

The default layout places two gantries 440 m apart, each carrying eight
sensors: per viewing direction a near-range and a far-range camera plus
one radar per side of the roadway.  The two far cameras face each other
across the stretch, so every point of the evaluated region is covered
from at least two perspectives and vehicles are acquired on the
approaches before they enter it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .evaluation import EvalConfig
from .fusion import FusionConfig
from .geometry import CameraModel, RigidTransform, camera_pose
from .scenario import ScenarioConfig
from .sensing import DEFAULT_CONFUSION, SensorSpec
from .tracker import TrackerConfig

GANTRY_HEIGHT = 7.0
PIXEL_PITCH = 5.86e-6  # m/px, 1/1.2" sensor
IMAGE_SIZE = (1920, 1200)


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    scenario: ScenarioConfig
    sensors: tuple
    tracker_camera: TrackerConfig
    tracker_radar: TrackerConfig
    fusion: FusionConfig
    eval: EvalConfig
    seed: int = 42
    twin_rate: float = 5.4

    def validate(self):
        self.scenario.validate()
        self.tracker_camera.validate()
        self.tracker_radar.validate()
        self.fusion.validate()
        self.eval.validate()
        if self.twin_rate <= 0:
            raise ConfigError("twin_rate must be positive")
        if not self.sensors:
            raise ConfigError("at least one sensor required")
        ids = [s.sensor_id for s in self.sensors]
        if len(ids) != len(set(ids)):
            raise ConfigError("sensor ids must be unique")

    def mp_ids(self) -> list:
        return sorted({s.mp_id for s in self.sensors})

    def tracker_for(self, spec: SensorSpec) -> TrackerConfig:
        return self.tracker_camera if spec.kind == "camera" else self.tracker_radar


def _focal_px(focal_mm: float) -> float:
    return focal_mm * 1e-3 / PIXEL_PITCH


def _gantry_camera(x: float, yaw: float, pitch: float, focal_mm: float) -> CameraModel:
    w, h = IMAGE_SIZE
    f = _focal_px(focal_mm)
    return CameraModel(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h,
                       pose=camera_pose((x, 0.0, GANTRY_HEIGHT), yaw, pitch))


def default_sensors() -> tuple:
    """Two measurement points, eight sensors each."""
    sensors = []
    for mp_id, x in ((1, 0.0), (2, 440.0)):
        for tag, direction in (("e", 0.0), ("w", math.pi)):
            near = _gantry_camera(x, direction, math.radians(8.0), 16.0)
            far = _gantry_camera(x, direction, math.radians(1.8), 50.0)
            sensors.append(SensorSpec(
                sensor_id=f"mp{mp_id}_cam_near_{tag}", kind="camera", mp_id=mp_id,
                camera=near, max_range=170.0))
            sensors.append(SensorSpec(
                sensor_id=f"mp{mp_id}_cam_far_{tag}", kind="camera", mp_id=mp_id,
                camera=far, max_range=400.0))
            for side, pan in (("right", -4.0), ("left", 4.0)):
                sensors.append(SensorSpec(
                    sensor_id=f"mp{mp_id}_radar_{side}_{tag}", kind="radar",
                    mp_id=mp_id, position=(x, 0.0),
                    boresight=direction + math.radians(pan)))
    return tuple(sensors)


def default_config(seed: int = 42) -> PipelineConfig:
    scenario = ScenarioConfig()
    tracker_camera = TrackerConfig(birth_speed_max=scenario.v_max)
    tracker_radar = TrackerConfig(
        meas_noise_floor=(2.5, 0.8, 1.0, 1.0), range_dependent_noise=False,
        birth_speed_max=scenario.v_max)
    return PipelineConfig(
        scenario=scenario,
        sensors=default_sensors(),
        tracker_camera=tracker_camera,
        tracker_radar=tracker_radar,
        fusion=FusionConfig(),
        eval=EvalConfig(region_x=(0.0, scenario.stretch_length)),
        seed=seed,
    )


# -- deterministic stream seeding -----------------------------------------

def seed_sequence(master: int, name: str) -> np.random.SeedSequence:
    """Independent stream keyed by a stable string; adding a stream never
    perturbs the others."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([master & 0xFFFFFFFFFFFFFFFF, *words])


def derive_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, name))


# -- (de)serialization -----------------------------------------------------

def _transform_to_dict(t: RigidTransform) -> dict:
    return {"rotation": [float(v) for v in t.rotation.reshape(-1)],
            "translation": [float(v) for v in t.translation]}


def _transform_from_dict(d: dict) -> RigidTransform:
    _check_keys(d, {"rotation", "translation"}, "pose")
    return RigidTransform(np.asarray(d["rotation"], dtype=float).reshape(3, 3),
                          np.asarray(d["translation"], dtype=float))


def _camera_to_dict(c: CameraModel) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "pose": _transform_to_dict(c.pose)}


def _camera_from_dict(d: dict) -> CameraModel:
    _check_keys(d, {"fx", "fy", "cx", "cy", "width", "height", "pose"}, "camera")
    return CameraModel(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                       width=d["width"], height=d["height"],
                       pose=_transform_from_dict(d["pose"]))


def _sensor_to_dict(s: SensorSpec) -> dict:
    d = {"sensor_id": s.sensor_id, "kind": s.kind, "mp_id": s.mp_id,
         "frame_rate": s.frame_rate, "p_detect": s.p_detect,
         "clutter_rate": s.clutter_rate}
    if s.kind == "camera":
        d.update(camera=_camera_to_dict(s.camera), pixel_noise=s.pixel_noise,
                 max_range=s.max_range,
                 occlusion_max_overlap=s.occlusion_max_overlap,
                 class_confusion={k: list(v) for k, v in s.class_confusion.items()})
    else:
        d.update(position=list(s.position), boresight=s.boresight,
                 half_angle=s.half_angle, r_min=s.r_min, r_max=s.r_max,
                 pos_noise=s.pos_noise, pos_noise_lateral=s.pos_noise_lateral,
                 vel_noise=s.vel_noise, clutter_v_max=s.clutter_v_max)
    return d


_SENSOR_COMMON = {"sensor_id", "kind", "mp_id", "frame_rate", "p_detect", "clutter_rate"}
_SENSOR_CAMERA = _SENSOR_COMMON | {"camera", "pixel_noise", "max_range",
                                   "occlusion_max_overlap", "class_confusion"}
_SENSOR_RADAR = _SENSOR_COMMON | {"position", "boresight", "half_angle", "r_min",
                                  "r_max", "pos_noise", "pos_noise_lateral",
                                  "vel_noise", "clutter_v_max"}


def _sensor_from_dict(d: dict) -> SensorSpec:
    kind = d.get("kind")
    if kind == "camera":
        _check_keys(d, _SENSOR_CAMERA, "sensor")
        d = dict(d)
        d["camera"] = _camera_from_dict(d["camera"])
        if "class_confusion" in d:
            d["class_confusion"] = {k: tuple(v) for k, v in d["class_confusion"].items()}
    elif kind == "radar":
        _check_keys(d, _SENSOR_RADAR, "sensor")
        d = dict(d)
        if "position" in d:
            d["position"] = tuple(d["position"])
    else:
        raise ConfigError(f"sensor kind must be camera or radar, got {kind!r}")
    return SensorSpec(**d)


def _check_keys(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _dataclass_to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _dataclass_from_dict(cls, d: dict, where: str, tuple_fields: set = frozenset()):
    allowed = {f.name for f in fields(cls)}
    _check_keys(d, allowed, where)
    kwargs = dict(d)
    for name in tuple_fields & set(kwargs):
        if kwargs[name] is not None:
            kwargs[name] = tuple(kwargs[name])
    return cls(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "seed": cfg.seed,
        "twin_rate": cfg.twin_rate,
        "scenario": _dataclass_to_dict(cfg.scenario),
        "sensors": [_sensor_to_dict(s) for s in cfg.sensors],
        "tracker": {
            "camera": _dataclass_to_dict(cfg.tracker_camera),
            "radar": _dataclass_to_dict(cfg.tracker_radar),
        },
        "fusion": _dataclass_to_dict(cfg.fusion),
        "eval": _dataclass_to_dict(cfg.eval),
    }


def config_from_dict(data: dict) -> PipelineConfig:
    _check_keys(data, {"seed", "twin_rate", "scenario", "sensors", "tracker",
                       "fusion", "eval"}, "config")
    tracker = data.get("tracker", {})
    _check_keys(tracker, {"camera", "radar"}, "tracker")
    cfg = PipelineConfig(
        scenario=_dataclass_from_dict(ScenarioConfig, data.get("scenario", {}),
                                      "scenario"),
        sensors=tuple(_sensor_from_dict(s) for s in data.get("sensors", [])),
        tracker_camera=_dataclass_from_dict(TrackerConfig, tracker.get("camera", {}),
                                            "tracker.camera", {"meas_noise_floor"}),
        tracker_radar=_dataclass_from_dict(TrackerConfig, tracker.get("radar", {}),
                                           "tracker.radar", {"meas_noise_floor"}),
        fusion=_dataclass_from_dict(FusionConfig, data.get("fusion", {}), "fusion",
                                    {"assoc_slack"}),
        eval=_dataclass_from_dict(EvalConfig, data.get("eval", {}), "eval",
                                  {"region_x", "eval_classes"}),
        seed=int(data.get("seed", 42)),
        twin_rate=float(data.get("twin_rate", 5.4)),
    )
    cfg.validate()
    return cfg


def load_config(path: str, seed: int | None = None) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}")
    cfg = config_from_dict(data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
