"""Geometry for a left-handed, y-up, z-forward camera world.

Conventions used throughout the package:

* World and sensor frames are left-handed with +y up and +z forward
  (game-engine style). The ground plane is x-z.
* Quaternions are (w, x, y, z) and rotate vectors through the usual
  q v q* product. A positive yaw about +y turns +z (forward) toward
  +x (right), i.e. clockwise when the ground plane is seen from above.
* Image coordinates: u grows to the right, v grows downward, so +y (up)
  maps to decreasing v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

VERTICAL_FORWARD_EPS = 1e-9


class DegenerateOrientation(ValueError):
    """Forward axis is vertical, so the ground-plane angle is undefined."""


class Frame(Enum):
    """Reference frame a box or point is expressed in."""

    GLOBAL = "global"
    SENSOR = "sensor"


@dataclass(frozen=True)
class Vec3:
    """Point or direction with components in meters (or unitless)."""

    x: float
    y: float
    z: float

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __neg__(self) -> "Vec3":
        return Vec3(-self.x, -self.y, -self.z)

    def scaled(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)


def planar_range(p: Vec3) -> float:
    """Ground-plane distance from the frame origin: sqrt(x^2 + z^2)."""
    return math.hypot(p.x, p.z)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z).

    Construction renormalizes inputs that are off unit norm by more than
    1e-9 and rejects near-zero quaternions. Inputs already within 1e-9 of
    unit are kept bit-for-bit, which makes serialization round-trips exact.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or n < 1e-12:
            raise ValueError(f"quaternion norm {n} is not invertible")
        if abs(n - 1.0) > 1e-9:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_yaw(cls, angle: float) -> "UnitQuaternion":
        """Rotation about +y; positive angle turns forward (+z) toward +x."""
        half = 0.5 * angle
        return cls(math.cos(half), 0.0, math.sin(half), 0.0)

    @classmethod
    def from_axis_angle(cls, axis: Vec3, angle: float) -> "UnitQuaternion":
        n = axis.norm()
        if n < 1e-12:
            raise ValueError("rotation axis must be non-zero")
        half = 0.5 * angle
        s = math.sin(half) / n
        return cls(math.cos(half), axis.x * s, axis.y * s, axis.z * s)

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """Hamilton product self * other (other is applied first)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def rotate(self, v: Vec3) -> Vec3:
        # v' = v + 2w (u x v) + 2 u x (u x v), with u the vector part
        ux, uy, uz = self.x, self.y, self.z
        cx = uy * v.z - uz * v.y
        cy = uz * v.x - ux * v.z
        cz = ux * v.y - uy * v.x
        ccx = uy * cz - uz * cy
        ccy = uz * cx - ux * cz
        ccz = ux * cy - uy * cx
        w2 = 2.0 * self.w
        return Vec3(v.x + w2 * cx + 2.0 * ccx, v.y + w2 * cy + 2.0 * ccy, v.z + w2 * cz + 2.0 * ccz)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation followed by translation."""

    translation: Vec3
    rotation: UnitQuaternion

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Vec3(0.0, 0.0, 0.0), UnitQuaternion.identity())

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying `other` first and then `self`."""
        return Pose(
            self.translation + self.rotation.rotate(other.translation),
            self.rotation.multiply(other.rotation),
        )

    def inverse(self) -> "Pose":
        q = self.rotation.conjugate()
        return Pose(-q.rotate(self.translation), q)

    def apply(self, p: Vec3) -> Vec3:
        return self.rotation.rotate(p) + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus the sensor pose in the global frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int
    extrinsic: Pose = field(default_factory=Pose.identity)

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.image_width and 0 < self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")

    def intrinsic_matrix(self) -> tuple[tuple[float, float, float], ...]:
        return (
            (self.fx, 0.0, self.cx),
            (0.0, self.fy, self.cy),
            (0.0, 0.0, 1.0),
        )

    @classmethod
    def from_intrinsic_matrix(
        cls,
        matrix,
        image_width: int,
        image_height: int,
        extrinsic: Pose | None = None,
    ) -> "CameraModel":
        """Build from a zero-skew 3x3 intrinsic matrix."""
        if len(matrix) != 3 or any(len(row) != 3 for row in matrix):
            raise ValueError("intrinsic matrix must be 3x3")
        if abs(matrix[0][1]) > 1e-9 or abs(matrix[1][0]) > 1e-9:
            raise ValueError("intrinsic skew is not supported")
        expected_last = (0.0, 0.0, 1.0)
        if any(abs(matrix[2][i] - expected_last[i]) > 1e-9 for i in range(3)):
            raise ValueError("intrinsic matrix last row must be (0, 0, 1)")
        return cls(
            fx=float(matrix[0][0]),
            fy=float(matrix[1][1]),
            cx=float(matrix[0][2]),
            cy=float(matrix[1][2]),
            image_width=image_width,
            image_height=image_height,
            extrinsic=extrinsic if extrinsic is not None else Pose.identity(),
        )


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, (width, height, length) and rotation in `frame`.

    Width spans the local x axis, height the local y axis and length the
    local z axis; the local +z axis is the box's forward direction.
    """

    center: Vec3
    size: tuple[float, float, float]
    rotation: UnitQuaternion
    frame: Frame

    def __post_init__(self) -> None:
        if any(not (s > 0 and math.isfinite(s)) for s in self.size):
            raise ValueError(f"box dimensions must be positive, got {self.size}")

    @property
    def width(self) -> float:
        return self.size[0]

    @property
    def height(self) -> float:
        return self.size[1]

    @property
    def length(self) -> float:
        return self.size[2]

    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def forward_axis(self) -> Vec3:
        return self.rotation.rotate(Vec3(0.0, 0.0, 1.0))

    def corners(self) -> list[Vec3]:
        """The 8 corners in the box's frame.

        Order: bottom face counterclockwise seen from above, starting at
        local (+w/2, -h/2, +l/2); then the top face in matching x-z order.
        """
        hw, hh, hl = self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0
        bottom_ring = ((hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl))
        out: list[Vec3] = []
        for hy in (-hh, hh):
            for lx, lz in bottom_ring:
                out.append(self.center + self.rotation.rotate(Vec3(lx, hy, lz)))
        return out


def to_sensor_frame(box: Box3D, cam: CameraModel) -> Box3D:
    """Re-express a global-frame box in the camera's frame."""
    if box.frame is not Frame.GLOBAL:
        raise ValueError("box must be in the global frame")
    inv = cam.extrinsic.inverse()
    return Box3D(
        center=inv.apply(box.center),
        size=box.size,
        rotation=inv.rotation.multiply(box.rotation),
        frame=Frame.SENSOR,
    )


def to_global_frame(box: Box3D, cam: CameraModel) -> Box3D:
    """Inverse of :func:`to_sensor_frame`."""
    if box.frame is not Frame.SENSOR:
        raise ValueError("box must be in the sensor frame")
    return Box3D(
        center=cam.extrinsic.apply(box.center),
        size=box.size,
        rotation=cam.extrinsic.rotation.multiply(box.rotation),
        frame=Frame.GLOBAL,
    )


def project_point(p: Vec3, cam: CameraModel) -> tuple[float, float] | None:
    """Pinhole projection of a sensor-frame point; None when z <= 0."""
    if p.z <= 0.0:
        return None
    u = cam.fx * p.x / p.z + cam.cx
    v = cam.cy - cam.fy * p.y / p.z
    return u, v


def projected_box_height_px(box: Box3D, cam: CameraModel) -> float | None:
    """Vertical pixel extent of the projected corners; None if any corner
    is at or behind the image plane."""
    if box.frame is not Frame.SENSOR:
        raise ValueError("box must be in the sensor frame")
    v_min = math.inf
    v_max = -math.inf
    for corner in box.corners():
        uv = project_point(corner, cam)
        if uv is None:
            return None
        v_min = min(v_min, uv[1])
        v_max = max(v_max, uv[1])
    return v_max - v_min


def signed_ground_angle(box: Box3D) -> float:
    """Signed angle in (-pi, pi] between the box's forward axis (projected
    onto the ground plane) and the frame's +x axis, clockwise-positive when
    seen from above.

    A forward axis pointing at the camera (-z) gives +pi/2; pointing away
    (+z) gives -pi/2.
    """
    if box.frame is not Frame.SENSOR:
        raise ValueError("box must be in the sensor frame")
    f = box.forward_axis()
    if math.hypot(f.x, f.z) < VERTICAL_FORWARD_EPS:
        raise DegenerateOrientation("forward axis is vertical within tolerance")
    theta = math.atan2(-f.z, f.x)
    if theta <= -math.pi:
        theta = math.pi
    return theta


def yaw_angle(rotation: UnitQuaternion) -> float:
    """Yaw of a rotation: the angle about +y that aligns +z with the
    rotated forward axis projected onto the ground plane.

    Falls back to the rotated +x axis when the forward axis is vertical,
    so upright boxes rotated by arbitrary quaternions still reduce to a
    well-defined bird's-eye-view footprint.
    """
    f = rotation.rotate(Vec3(0.0, 0.0, 1.0))
    if math.hypot(f.x, f.z) >= VERTICAL_FORWARD_EPS:
        return math.atan2(f.x, f.z)
    r = rotation.rotate(Vec3(1.0, 0.0, 0.0))
    return math.atan2(-r.z, r.x)
