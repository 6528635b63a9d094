"""Coordinate frames, rigid transforms, and pinhole camera geometry.

Conventions
-----------
World frame (right-handed):
    x: driving direction of the lower roadway, y: lateral, z: up.
    The road surface is the plane z = 0.

Camera frame (right-handed, computer-vision convention):
    x: right in the image, y: down in the image, z: forward (optical axis).

Image frame:
    u: right, v: down, origin at the top-left pixel corner.  A vehicle
    standing on the road therefore has its ground contact line at the
    box's maximum v ("lower edge").

All distances are meters, all angles radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


class GeometryError(Exception):
    pass


class BehindCamera(GeometryError):
    """Point has non-positive depth in the camera frame."""


class FullyBehind(GeometryError):
    """Every cuboid corner has non-positive depth."""


class NoIntersection(GeometryError):
    """Pixel ray points at or above the horizon and never meets z = 0."""


def rotation_from_euler(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll) as a 3x3 matrix."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(cls, yaw=0.0, pitch=0.0, roll=0.0, translation=(0.0, 0.0, 0.0)):
        return cls(rotation_from_euler(yaw, pitch, roll), np.asarray(translation, dtype=float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


def transform_point(transform: RigidTransform, point: np.ndarray) -> np.ndarray:
    return transform.apply(point)


def camera_pose(position, yaw: float, pitch: float) -> RigidTransform:
    """Camera-to-world pose for a camera at `position` looking along `yaw`
    (about +z, from the +x axis) and pitched down by `pitch` > 0.

    Undefined at pitch = +-90 deg (forward parallel to world up); build the
    rotation directly for nadir views.
    """
    forward = np.array([
        math.cos(pitch) * math.cos(yaw),
        math.cos(pitch) * math.sin(yaw),
        -math.sin(pitch),
    ])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValueError("camera forward is parallel to world up; set the pose directly")
    right /= n
    down = np.cross(forward, right)
    # columns are the camera axes expressed in world coordinates
    rotation = np.column_stack([right, down, forward])
    return RigidTransform(rotation, np.asarray(position, dtype=float))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: pixel intrinsics plus a camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.pose.inverse().apply(points)

    def position(self) -> np.ndarray:
        return self.pose.translation


def project_point(cam: CameraModel, point: np.ndarray):
    """World point -> (u, v).  Raises BehindCamera for non-positive depth.

    The result may lie outside the image rectangle; callers clip.
    """
    pc = cam.world_to_camera(np.asarray(point, dtype=float))
    if pc[2] <= 0.0:
        raise BehindCamera(f"depth {pc[2]:.3f} <= 0")
    u = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    return u, v


def _project_batch(cam: CameraModel, points: np.ndarray):
    """(N,3) world points -> ((N,2) pixels, (N,) depths); no depth check."""
    pc = cam.world_to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([cam.fx * pc[:, 0] / z + cam.cx,
                              cam.fy * pc[:, 1] / z + cam.cy])
    return uv, z


@dataclass(frozen=True)
class ImageBox:
    """Axis-aligned pixel box, u_min <= u_max and v_min <= v_max."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("degenerate box ordering")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def lower_edge_midpoint(self):
        return 0.5 * (self.u_min + self.u_max), self.v_max


def box_intersection_area(a: ImageBox, b: ImageBox) -> float:
    w = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    h = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    return max(w, 0.0) * max(h, 0.0)


def cuboid_corners(center_xy, heading: float, length: float, width: float, height: float) -> np.ndarray:
    """The 8 corners of an upright box standing on z = 0, centered at
    (x, y, height/2) and yawed by `heading`."""
    hl, hw = 0.5 * length, 0.5 * width
    base = np.array([[sx * hl, sy * hw] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)])
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    xy = base @ rot.T + np.asarray(center_xy, dtype=float)
    low = np.column_stack([xy, np.zeros(4)])
    high = np.column_stack([xy, np.full(4, height)])
    return np.vstack([low, high])


def project_vehicle_to_box(cam: CameraModel, corners: np.ndarray):
    """Axis-aligned hull of the projected corners, clipped to the image.

    Corners behind the camera are ignored.  Returns None when the hull
    falls entirely outside the image rectangle.  Raises FullyBehind when
    no corner has positive depth.
    """
    uv, z = _project_batch(cam, np.asarray(corners, dtype=float))
    front = z > 0.0
    if not np.any(front):
        raise FullyBehind("all corners behind the camera")
    uv = uv[front]
    u_min, v_min = uv.min(axis=0)
    u_max, v_max = uv.max(axis=0)
    if u_max < 0 or v_max < 0 or u_min > cam.width or v_min > cam.height:
        return None
    return ImageBox(
        max(u_min, 0.0), max(v_min, 0.0),
        min(u_max, float(cam.width)), min(v_max, float(cam.height)),
    )


def backproject_pixel(cam: CameraModel, u: float, v: float) -> np.ndarray:
    """Intersect the ray through pixel (u, v) with the ground plane z = 0.

    Raises NoIntersection when the ray is parallel to the plane or meets
    it behind the camera (pixel at or above the horizon).
    """
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = cam.pose.rotation @ d_cam
    origin = cam.pose.translation
    if abs(d_world[2]) < 1e-12:
        raise NoIntersection("ray parallel to the ground plane")
    s = -origin[2] / d_world[2]
    if s <= 0.0:
        raise NoIntersection("ground intersection behind the camera")
    point = origin + s * d_world
    point[2] = 0.0  # exact by construction
    return point


def backproject_box(cam: CameraModel, box: ImageBox) -> np.ndarray:
    """Ground point under the box: ray through the lower-edge midpoint."""
    u, v = box.lower_edge_midpoint()
    return backproject_pixel(cam, u, v)


def ground_fov_area(cam: CameraModel, max_range: float) -> float:
    """Area (m^2) of the camera's footprint on z = 0, corner rays clamped
    to `max_range` from the camera's ground foot.

    Rays that miss the plane (at or above the horizon) are replaced by the
    point at max_range along their horizontal direction, so the footprint
    stays bounded.  Used as the support of a uniform clutter density.
    """
    foot = cam.pose.translation.copy()
    foot[2] = 0.0
    pixels = [(0.0, cam.height), (cam.width, cam.height), (cam.width, 0.0), (0.0, 0.0)]
    poly = []
    for u, v in pixels:
        try:
            p = backproject_pixel(cam, u, v)
        except NoIntersection:
            p = None
        if p is None or np.linalg.norm(p[:2] - foot[:2]) > max_range:
            d_world = cam.pose.rotation @ np.array([(u - cam.cx) / cam.fx,
                                                    (v - cam.cy) / cam.fy, 1.0])
            horiz = d_world[:2]
            n = np.linalg.norm(horiz)
            if n < 1e-12:
                continue
            p = np.array([*(foot[:2] + horiz / n * max_range), 0.0])
        poly.append(p[:2])
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
