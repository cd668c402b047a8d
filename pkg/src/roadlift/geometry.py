"""Shared geometric types: pinhole camera, oriented boxes, Euler angles.

Frames
------
World: right-handed, Z up.  Camera: X right, Y down, Z forward.
Object: X forward (length), Y left (width), Z up (height).

Euler angles are composed intrinsically yaw (Z), pitch (Y'), roll (X'').
Yaw and roll follow the right-hand rule; pitch is positive nose-up, so a
vehicle driving up a 5% grade has pitch ``atan(0.05)``.  The rotation
matrix is ``Rz(yaw) @ Ry(-pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1.0"


class GeometryError(ValueError):
    pass


class BehindCamera(GeometryError):
    pass


class GimbalLockWarning(RuntimeWarning):
    pass


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise GeometryError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# rotations


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(-pitch) @ rot_x(roll)


def matrix_to_euler(matrix) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_matrix`.

    Near gimbal lock (``|pitch|`` within 1e-6 of pi/2) a
    :class:`GimbalLockWarning` is emitted and roll is pinned to zero.
    """
    r = np.asarray(matrix, dtype=float)
    pitch = math.atan2(r[2, 0], math.hypot(r[2, 1], r[2, 2]))
    if abs(abs(pitch) - math.pi / 2) < 1e-6:
        warnings.warn("gimbal lock: roll set to 0", GimbalLockWarning, stacklevel=2)
        yaw = math.atan2(-r[0, 1], r[1, 1])
        return yaw, pitch, 0.0
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return yaw, pitch, roll


def is_rotation(matrix, tol: float = 1e-9) -> bool:
    r = np.asarray(matrix, dtype=float)
    if r.shape != (3, 3):
        return False
    return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)


def orthonormalize(matrix) -> np.ndarray:
    """Nearest proper rotation (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi]."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    return w - math.pi


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _frozen(self.origin, (3,))
        d = np.array(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if not n > 0:
            raise GeometryError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", _frozen(d))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise GeometryError(f"degenerate 2D box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u_min, self.v_min, self.u_max, self.v_max)


@dataclass(frozen=True, eq=False)
class Box3D:
    """9-DOF box.  ``size`` is (w, l, h); ``rotation`` is (yaw, pitch, roll)."""

    center: np.ndarray
    size: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or min(size) <= 0:
            raise GeometryError(f"box size must be three positive values, got {self.size}")
        rot = tuple(float(a) for a in self.rotation)
        if len(rot) != 3 or any(abs(a) > math.pi + 1e-12 for a in rot):
            raise GeometryError(f"Euler angles must lie in [-pi, pi], got {self.rotation}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def from_matrix(cls, center, size, matrix) -> "Box3D":
        return cls(center, size, matrix_to_euler(matrix))

    @property
    def matrix(self) -> np.ndarray:
        return euler_to_matrix(*self.rotation)

    @property
    def width(self) -> float:
        return self.size[0]

    @property
    def length(self) -> float:
        return self.size[1]

    @property
    def height(self) -> float:
        return self.size[2]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def corners(self) -> np.ndarray:
        return box_corners(self)

    def transformed(self, rotation, translation) -> "Box3D":
        """Apply the rigid motion ``x -> rotation @ x + translation``."""
        r = np.asarray(rotation, dtype=float)
        return Box3D.from_matrix(r @ self.center + np.asarray(translation, float), self.size, r @ self.matrix)

    def __repr__(self) -> str:
        c = ", ".join(f"{v:.3f}" for v in self.center)
        s = ", ".join(f"{v:.3f}" for v in self.size)
        a = ", ".join(f"{v:.4f}" for v in self.rotation)
        return f"Box3D(center=({c}), size=({s}), rotation=({a}))"


# unit offsets of the canonical keypoints in (x=length, y=width, z=height)
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, 1, -1],
        [1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [-1, 1, 1],
        [0, 0, 0],
    ],
    dtype=float,
)
BOTTOM = (0, 1, 2, 3)
TOP = (4, 5, 6, 7)
CENTROID = 8
# wireframe edges over the 8 corners
EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)  # fmt: skip


def box_corners(box: Box3D) -> np.ndarray:
    """Nine keypoints (9, 3): bottom 0-3, top 4-7, centroid 8.

    Corner order is front-left, front-right, rear-right, rear-left.
    """
    w, l, h = box.size
    half = 0.5 * np.array([l, w, h])
    local = _CORNER_SIGNS * half
    return local @ box.matrix.T + box.center


def box_from_corners(corners) -> Box3D:
    """Best-fit box from 8 corners in canonical order (inverse of box_corners)."""
    p = np.asarray(corners, dtype=float)[:8]
    center = p.mean(axis=0)
    ax = p[[0, 1, 4, 5]].mean(axis=0) - p[[2, 3, 6, 7]].mean(axis=0)
    ay = p[[0, 3, 4, 7]].mean(axis=0) - p[[1, 2, 5, 6]].mean(axis=0)
    az = p[4:8].mean(axis=0) - p[0:4].mean(axis=0)
    l, w, h = (float(np.linalg.norm(a)) for a in (ax, ay, az))
    r = orthonormalize(np.column_stack([ax / l, ay / w, az / h]))
    return Box3D.from_matrix(center, (w, l, h), r)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Ideal pinhole camera.  ``rotation``/``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (self.image_width > 0 and self.image_height > 0):
            raise GeometryError("image dimensions must be positive")
        r = _frozen(self.rotation, (3, 3))
        if not is_rotation(r, 1e-9):
            raise GeometryError("extrinsic rotation is not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def from_pose(
        cls,
        position,
        yaw: float = 0.0,
        pitch_down: float = 0.0,
        vfov_deg: float = 21.0,
        width: int = 3840,
        height: int = 2160,
    ) -> "CameraModel":
        """Camera at ``position`` heading ``yaw`` (from world +X), tilted down."""
        cyaw, syaw = math.cos(yaw), math.sin(yaw)
        cp, sp = math.cos(pitch_down), math.sin(pitch_down)
        fwd = np.array([cyaw * cp, syaw * cp, -sp])
        right = np.array([syaw, -cyaw, 0.0])
        down = np.cross(fwd, right)
        r = np.vstack([right, down, fwd])
        c = np.asarray(position, dtype=float)
        f = (height / 2) / math.tan(math.radians(vfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, r, -r @ c)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def to_world(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def project(self, point) -> np.ndarray:
        return project(self, point)

    def pixel_ray(self, pixel) -> Ray:
        return pixel_ray(self, pixel)

    def contains(self, uv) -> bool:
        u, v = uv
        return 0.0 <= u <= self.image_width and 0.0 <= v <= self.image_height

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        ext = np.hstack([self.rotation, self.translation[:, None]])
        return {
            "format": "camera",
            "version": FORMAT_VERSION,
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.image_width),
            "height": int(self.image_height),
            "extrinsic": [float(v) for v in ext.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        check_version(d.get("version"), "camera")
        ext = np.asarray(d["extrinsic"], dtype=float)
        if ext.size != 12:
            raise GeometryError("extrinsic must hold 12 values (3x4 row-major)")
        ext = ext.reshape(3, 4)
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), ext[:, :3], ext[:, 3],
        )  # fmt: skip


def check_version(version, what: str) -> None:
    if version is None:
        raise GeometryError(f"{what} file has no version field")
    major = str(version).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise GeometryError(f"unsupported {what} format version {version}")


def save_camera(camera: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=2) + "\n")


def load_camera(path) -> CameraModel:
    return CameraModel.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# projection


def project(camera: CameraModel, point) -> np.ndarray:
    """World point(s) -> pixel(s).  Raises BehindCamera if any z <= 1e-9."""
    pc = camera.to_camera(point)
    z = pc[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCamera("point behind the camera")
    u = camera.fx * pc[..., 0] / z + camera.cx
    v = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def pixel_ray(camera: CameraModel, pixel) -> Ray:
    u, v = pixel
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d))


def closest_point_on_ray(ray: Ray, point) -> np.ndarray:
    t = float(np.dot(np.asarray(point, float) - ray.origin, ray.direction))
    return ray.at(t)
