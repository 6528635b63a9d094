"""Parametric camera and radar observation models.

Cameras emit noisy 2-D boxes for visible vehicles plus uniform clutter
boxes; boxes are anchored to the ground by casting a ray through the
lower-edge midpoint, which deliberately lands on the vehicle's near
face rather than its center.  Radars emit noisy world-frame position
and velocity for vehicles inside their range/azimuth sector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CameraModel,
    FullyBehind,
    ImageBox,
    NoIntersection,
    RigidTransform,
    backproject_box,
    box_intersection_area,
    cuboid_corners,
    ground_fov_area,
    project_vehicle_to_box,
    rotation_from_euler,
)
from .scenario import VEHICLE_CLASSES, GroundTruthFrame

# rows: true class, columns: reported class, order as VEHICLE_CLASSES
DEFAULT_CONFUSION = {
    "car": (0.92, 0.04, 0.02, 0.02),
    "truck": (0.05, 0.88, 0.06, 0.01),
    "bus": (0.04, 0.08, 0.87, 0.01),
    "motorcycle": (0.10, 0.02, 0.01, 0.87),
}


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    kind: str  # "camera" | "radar"
    mp_id: int
    frame_rate: float = 5.4
    p_detect: float = 0.97
    clutter_rate: float = 0.3  # false detections / frame
    # camera fields
    camera: CameraModel | None = None
    pixel_noise: float = 2.0
    max_range: float = 460.0
    occlusion_max_overlap: float = 0.6
    class_confusion: dict = field(default_factory=lambda: dict(DEFAULT_CONFUSION))
    # radar fields; longitudinal noise (reflection point wander along the
    # vehicle body) exceeds the azimuth-limited lateral noise
    position: tuple = (0.0, 0.0)
    boresight: float = 0.0
    half_angle: float = math.radians(24.0)
    r_min: float = 8.0
    r_max: float = 220.0
    pos_noise: float = 2.5
    pos_noise_lateral: float = 0.8
    vel_noise: float = 1.0
    clutter_v_max: float = 40.0

    def __post_init__(self):
        if self.kind not in ("camera", "radar"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if not 0.0 < self.p_detect <= 1.0:
            raise ValueError("p_detect must be in (0, 1]")
        if self.clutter_rate < 0 or self.frame_rate <= 0:
            raise ValueError("clutter_rate >= 0 and frame_rate > 0 required")
        if self.kind == "camera" and self.camera is None:
            raise ValueError("camera sensor needs a CameraModel")

    def ground_position(self) -> np.ndarray:
        if self.kind == "camera":
            return self.camera.pose.translation[:2].copy()
        return np.asarray(self.position, dtype=float)


@dataclass(frozen=True)
class Detection:
    """One camera detection; is_clutter is debug metadata that never
    reaches the tracker."""

    sensor_id: str
    t: float
    box: ImageBox
    vclass: str
    confidence: float
    is_clutter: bool = False


@dataclass
class MeasurementFrame:
    sensor_id: str
    mp_id: int
    kind: str
    t: float
    z: list  # camera: (2,) world positions; radar: (4,) position+velocity
    classes: list
    confidences: list
    dropped: int = 0


def _confusion_row(spec: SensorSpec, vclass: str) -> np.ndarray:
    row = np.asarray(spec.class_confusion[vclass], dtype=float)
    return row / row.sum()


def _visible_boxes(spec: SensorSpec, frame: GroundTruthFrame):
    """Project every vehicle; drop out-of-view, out-of-range, and occluded
    ones.  Occlusion compares pixel overlap against every nearer vehicle."""
    cam = spec.camera
    foot = cam.pose.translation
    entries = []
    for agent in frame.vehicles:
        center = np.array([agent.x, agent.y, 0.0])
        dist = float(np.linalg.norm(center[:2] - foot[:2]))
        if dist > spec.max_range:
            continue
        corners = cuboid_corners((agent.x, agent.y), agent.heading(),
                                 agent.length, agent.width, agent.height)
        try:
            box = project_vehicle_to_box(cam, corners)
        except FullyBehind:
            continue
        if box is None or box.area <= 0.0:
            continue
        entries.append((agent, box, dist))
    visible = []
    for agent, box, dist in entries:
        occluded = False
        for other, obox, odist in entries:
            if other is agent or odist >= dist:
                continue
            if box_intersection_area(box, obox) > spec.occlusion_max_overlap * box.area:
                occluded = True
                break
        if not occluded:
            visible.append((agent, box))
    return visible


def camera_observe(spec: SensorSpec, frame: GroundTruthFrame,
                   rng: np.random.Generator) -> list:
    """Noisy boxes for detected vehicles plus Poisson clutter boxes."""
    if spec.kind != "camera":
        raise ValueError("camera_observe needs a camera spec")
    cam = spec.camera
    detections = []
    for agent, box in _visible_boxes(spec, frame):
        if rng.random() >= spec.p_detect:
            continue
        edges = np.array([box.u_min, box.v_min, box.u_max, box.v_max])
        if spec.pixel_noise > 0:
            edges = edges + rng.normal(0.0, spec.pixel_noise, 4)
        u0, u1 = sorted((edges[0], edges[2]))
        v0, v1 = sorted((edges[1], edges[3]))
        noisy = ImageBox(
            float(np.clip(u0, 0, cam.width)), float(np.clip(v0, 0, cam.height)),
            float(np.clip(u1, 0, cam.width)), float(np.clip(v1, 0, cam.height)))
        label = VEHICLE_CLASSES[rng.choice(4, p=_confusion_row(spec, agent.vclass))]
        conf = float(np.clip(rng.normal(0.93, 0.04), 0.5, 1.0))
        detections.append(Detection(spec.sensor_id, frame.t, noisy, label, conf))
    for _ in range(rng.poisson(spec.clutter_rate)):
        w = math.exp(rng.uniform(math.log(20.0), math.log(260.0)))
        h = w * rng.uniform(0.4, 1.0)
        u0 = rng.uniform(0.0, max(cam.width - w, 1.0))
        v0 = rng.uniform(0.0, max(cam.height - h, 1.0))
        box = ImageBox(u0, v0, min(u0 + w, cam.width), min(v0 + h, cam.height))
        label = VEHICLE_CLASSES[rng.choice(4)]
        conf = float(rng.uniform(0.5, 0.9))
        detections.append(Detection(spec.sensor_id, frame.t, box, label, conf,
                                    is_clutter=True))
    return detections


def camera_frame_to_world(spec: SensorSpec, detections: list) -> MeasurementFrame:
    """Ground-anchor each box through the lower-edge midpoint ray.

    Boxes whose ray misses the ground plane are dropped and counted.
    """
    t = detections[0].t if detections else 0.0
    frame = MeasurementFrame(spec.sensor_id, spec.mp_id, "camera", t, [], [], [])
    for det in detections:
        try:
            point = backproject_box(spec.camera, det.box)
        except NoIntersection:
            frame.dropped += 1
            continue
        frame.z.append(point[:2])
        frame.classes.append(det.vclass)
        frame.confidences.append(det.confidence)
    return frame


def camera_measure(spec: SensorSpec, frame: GroundTruthFrame,
                   rng: np.random.Generator) -> MeasurementFrame:
    out = camera_frame_to_world(spec, camera_observe(spec, frame, rng))
    out.t = frame.t
    return out


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def in_sector(spec: SensorSpec, xy) -> bool:
    rel = np.asarray(xy, dtype=float) - np.asarray(spec.position, dtype=float)
    r = float(np.linalg.norm(rel))
    if not spec.r_min <= r <= spec.r_max:
        return False
    return abs(_wrap_angle(math.atan2(rel[1], rel[0]) - spec.boresight)) <= spec.half_angle


def radar_observe(spec: SensorSpec, frame: GroundTruthFrame,
                  rng: np.random.Generator) -> MeasurementFrame:
    """World-frame (x, y, vx, vy) for in-sector vehicles plus sector clutter."""
    if spec.kind != "radar":
        raise ValueError("radar_observe needs a radar spec")
    out = MeasurementFrame(spec.sensor_id, spec.mp_id, "radar", frame.t, [], [], [])
    for agent in frame.vehicles:
        if not in_sector(spec, (agent.x, agent.y)):
            continue
        if rng.random() >= spec.p_detect:
            continue
        z = np.array([agent.x, agent.y, agent.vx, agent.vy])
        z[0] += rng.normal(0.0, spec.pos_noise)
        z[1] += rng.normal(0.0, spec.pos_noise_lateral)
        z[2:] += rng.normal(0.0, spec.vel_noise, 2)
        out.z.append(z)
        out.classes.append(None)
        out.confidences.append(1.0)
    for _ in range(rng.poisson(spec.clutter_rate)):
        az = spec.boresight + rng.uniform(-spec.half_angle, spec.half_angle)
        r = math.sqrt(rng.uniform(spec.r_min ** 2, spec.r_max ** 2))
        pos = np.asarray(spec.position) + r * np.array([math.cos(az), math.sin(az)])
        vel = rng.uniform(-spec.clutter_v_max, spec.clutter_v_max, 2)
        out.z.append(np.concatenate([pos, vel]))
        out.classes.append(None)
        out.confidences.append(1.0)
    return out


def observe(spec: SensorSpec, frame: GroundTruthFrame,
            rng: np.random.Generator) -> MeasurementFrame:
    if spec.kind == "camera":
        return camera_measure(spec, frame, rng)
    return radar_observe(spec, frame, rng)


def perturb_pose(spec: SensorSpec, d_rotation=(0.0, 0.0, 0.0),
                 d_translation=(0.0, 0.0, 0.0)) -> SensorSpec:
    """Spec with a composed pose, for miscalibration stress tests.

    d_rotation = (tilt, pan, roll) in the sensor's view frame (tilt about
    the image-right axis); d_translation is in world coordinates.  For
    radars only pan and the horizontal translation apply.
    """
    tilt, pan, roll = d_rotation
    dt = np.asarray(d_translation, dtype=float)
    if spec.kind == "camera":
        # local axes: x right, y down, z forward
        d_rot = (rotation_from_euler(yaw=0.0, pitch=pan, roll=tilt)
                 @ rotation_from_euler(yaw=roll))
        pose = spec.camera.pose
        new_pose = RigidTransform(pose.rotation @ d_rot, pose.translation + dt)
        return replace(spec, camera=replace(spec.camera, pose=new_pose))
    return replace(spec, boresight=spec.boresight + pan,
                   position=tuple(np.asarray(spec.position) + dt[:2]))


def sector_area(spec: SensorSpec) -> float:
    return spec.half_angle * (spec.r_max ** 2 - spec.r_min ** 2)


def clutter_density(spec: SensorSpec) -> float:
    """Uniform clutter intensity in the sensor's measurement space."""
    if spec.kind == "camera":
        area = ground_fov_area(spec.camera, spec.max_range)
        return spec.clutter_rate / max(area, 1e-6)
    vel_volume = (2.0 * spec.clutter_v_max) ** 2
    return spec.clutter_rate / max(sector_area(spec) * vel_volume, 1e-6)
