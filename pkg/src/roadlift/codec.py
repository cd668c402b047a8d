"""Descriptor input preprocessing and the 22-value output vector.

Output layout (22 values)::

    [0:18]   nine keypoints (u, v), normalised to the 2D box
    [18:21]  (w, l, h) / 10
    [21]     observation angle mapped from [-pi, pi] to [0, 1]

Keypoint order follows :func:`roadlift.geometry.box_corners`.  Keypoints are
expressed relative to the 2D box centre and divided by the box WIDTH on both
axes, so they may fall well outside [-0.5, 0.5].

The reduced "bottom only" layout (9 values) keeps the four bottom keypoints
and h / 10.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    BOTTOM,
    FORMAT_VERSION,
    Box2D,
    Box3D,
    CameraModel,
    GeometryError,
    box_corners,
    check_version,
    project,
)
from .lanes import rasterize_channel
from .snippet import SNIPPET_SIZE, SnippetSpec, snippet_transform  # noqa: F401

FULL_LEN = 22
REDUCED_LEN = 9
DIM_SCALE = 10.0
CLASSES = ("car", "truck")


class CodecError(ValueError):
    pass


class DegenerateAngle(CodecError):
    pass


# ---------------------------------------------------------------------------
# keypoint normalisation


def normalize_keypoint(kp, box: Box2D) -> np.ndarray:
    cu, cv = box.center
    kp = np.asarray(kp, dtype=float)
    return np.stack([(kp[..., 0] - cu) / box.width, (kp[..., 1] - cv) / box.width], axis=-1)


def denormalize_keypoint(kp_norm, box: Box2D) -> np.ndarray:
    cu, cv = box.center
    kp = np.asarray(kp_norm, dtype=float)
    return np.stack([kp[..., 0] * box.width + cu, kp[..., 1] * box.width + cv], axis=-1)


def alpha_to_unit(alpha: float) -> float:
    return (alpha + math.pi) / (2 * math.pi)


def unit_to_alpha(a: float) -> float:
    return a * 2 * math.pi - math.pi


def compute_observation_angle(box: Box3D, camera: CameraModel) -> float:
    """Signed angle from the camera->centroid ray to the object X axis.

    Both vectors are taken in the camera frame and projected onto its XZ
    plane.  Writing ``theta(v) = atan2(v_x, v_z)``, the result is
    ``theta(ray) - theta(x_axis)`` wrapped to [-pi, pi]; an object turned by
    +delta about the camera Y axis therefore sees alpha change by -delta.
    Anti-parallel vectors give +pi.
    """
    ray = camera.to_camera(box.center)
    axis = camera.rotation @ box.matrix[:, 0]
    rx, rz = float(ray[0]), float(ray[2])
    ax, az = float(axis[0]), float(axis[2])
    if math.hypot(rx, rz) < 1e-9 or math.hypot(ax, az) < 1e-9:
        raise DegenerateAngle("centroid ray or object axis is perpendicular to the camera XZ plane")
    cross = rx * az - rz * ax
    dot = rx * ax + rz * az
    if cross == 0.0 and dot < 0:
        return math.pi
    return math.atan2(cross, dot)


# ---------------------------------------------------------------------------
# output vector


@dataclass(frozen=True, eq=False)
class DescriptorOutput:
    keypoints_norm: np.ndarray  # (9, 2)
    dims_scaled: np.ndarray  # (3,) = (w, l, h) / 10
    alpha_norm: float

    def __post_init__(self):
        kp = np.array(self.keypoints_norm, dtype=float).reshape(9, 2)
        dims = np.array(self.dims_scaled, dtype=float).reshape(3)
        if np.any(dims <= 0):
            raise CodecError("scaled dimensions must be positive")
        if not 0.0 <= self.alpha_norm <= 1.0:
            raise CodecError(f"alpha_norm {self.alpha_norm} outside [0, 1]")
        kp.flags.writeable = False
        dims.flags.writeable = False
        object.__setattr__(self, "keypoints_norm", kp)
        object.__setattr__(self, "dims_scaled", dims)
        object.__setattr__(self, "alpha_norm", float(self.alpha_norm))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.keypoints_norm.ravel(), self.dims_scaled, [self.alpha_norm]])

    @classmethod
    def from_vector(cls, vec) -> "DescriptorOutput":
        v = np.asarray(vec, dtype=float)
        if v.shape != (FULL_LEN,):
            raise CodecError(f"expected {FULL_LEN} values, got {v.shape}")
        return cls(v[:18].reshape(9, 2), v[18:21], float(v[21]))

    def reduced(self) -> np.ndarray:
        return reduce_vector(self.to_vector())


def reduce_vector(vec) -> np.ndarray:
    """22-value vector -> 9-value bottom-only vector."""
    v = np.asarray(vec, dtype=float)
    if v.shape == (REDUCED_LEN,):
        return v.copy()
    if v.shape != (FULL_LEN,):
        raise CodecError(f"expected {FULL_LEN} values, got {v.shape}")
    return np.concatenate([v[: 2 * len(BOTTOM)], v[20:21]])


@dataclass(frozen=True, eq=False)
class Decoded:
    """Image-space quantities recovered from a descriptor vector.

    ``keypoints``, ``size`` and ``alpha`` are ``None`` for a reduced vector.
    """

    bottom: np.ndarray  # (4, 2) pixels
    height: float
    keypoints: np.ndarray | None = None  # (9, 2) pixels
    size: tuple[float, float, float] | None = None  # (w, l, h)
    alpha: float | None = None

    @property
    def is_full(self) -> bool:
        return self.keypoints is not None


def encode(box3d: Box3D, camera: CameraModel, box2d: Box2D) -> DescriptorOutput:
    kp = project(camera, box_corners(box3d))
    alpha = compute_observation_angle(box3d, camera)
    return DescriptorOutput(
        normalize_keypoint(kp, box2d),
        np.asarray(box3d.size) / DIM_SCALE,
        alpha_to_unit(alpha),
    )


def decode(output, box2d: Box2D) -> Decoded:
    """Accepts a DescriptorOutput or a raw 22- or 9-value vector."""
    if isinstance(output, DescriptorOutput):
        vec = output.to_vector()
    else:
        vec = np.asarray(output, dtype=float)
    if vec.shape == (FULL_LEN,):
        kp = denormalize_keypoint(vec[:18].reshape(9, 2), box2d)
        size = tuple(float(s) * DIM_SCALE for s in vec[18:21])
        return Decoded(kp[list(BOTTOM)], size[2], kp, size, unit_to_alpha(float(vec[21])))
    if vec.shape == (REDUCED_LEN,):
        bottom = denormalize_keypoint(vec[:8].reshape(4, 2), box2d)
        return Decoded(bottom, float(vec[8]) * DIM_SCALE)
    raise CodecError(f"descriptor must hold {FULL_LEN} or {REDUCED_LEN} values, got {vec.shape}")


# ---------------------------------------------------------------------------
# frames and detections


@dataclass(frozen=True, eq=False)
class GroundTruth:
    box3d: Box3D
    box2d: Box2D
    cls: str = "car"
    model_name: str = "generic"
    truncation: float = 0.0
    occlusion: int = 0


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    camera: CameraModel
    objects: tuple[GroundTruth, ...] = ()


@dataclass(frozen=True, eq=False)
class Detection:
    frame_id: str
    cls: str
    box2d: Box2D
    values: np.ndarray  # 22 or 9 descriptor values
    confidence: float = 1.0
    gt_index: int | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape not in ((FULL_LEN,), (REDUCED_LEN,)):
            raise CodecError(f"descriptor must hold {FULL_LEN} or {REDUCED_LEN} values, got {v.shape}")
        if not 0.0 <= self.confidence <= 1.0:
            raise CodecError(f"confidence {self.confidence} outside [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def decoded(self) -> Decoded:
        return decode(self.values, self.box2d)

    def bottom_only(self) -> "Detection":
        return Detection(self.frame_id, self.cls, self.box2d, reduce_vector(self.values), self.confidence, self.gt_index)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_kp: float = 0.0  # normalised keypoint units
    sigma_dim: float = 0.0  # on (w, l, h) / 10
    sigma_alpha: float = 0.0  # on alpha_norm
    rho: float = 5.0
    seed: int = 0

    @property
    def is_zero(self) -> bool:
        return self.sigma_kp == 0 and self.sigma_dim == 0 and self.sigma_alpha == 0


def frame_rng(seed: int, frame_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(frame_id.encode())])


def oracle_descriptor(frame: Frame, noise: NoiseSpec | None = None) -> list[Detection]:
    """Descriptor outputs computed from ground truth, optionally perturbed.

    Noisy detections get ``confidence = exp(-r / rho)`` where ``r`` is the
    norm of the standardised noise draw, so better outputs rank higher.
    """
    out = []
    rng = None if noise is None or noise.is_zero else frame_rng(noise.seed, frame.frame_id)
    for i, gt in enumerate(frame.objects):
        vec = encode(gt.box3d, frame.camera, gt.box2d).to_vector()
        conf = 1.0
        if rng is not None:
            z = rng.standard_normal(FULL_LEN)
            sig = np.array([noise.sigma_kp] * 18 + [noise.sigma_dim] * 3 + [noise.sigma_alpha])
            vec = vec + sig * z
            vec[18:21] = np.maximum(vec[18:21], 1e-3)
            vec[21] = min(max(vec[21], 0.0), 1.0)
            r = float(np.sqrt(np.sum(z[sig > 0] ** 2)))
            conf = math.exp(-r / noise.rho)
        out.append(Detection(frame.frame_id, gt.cls, gt.box2d, vec, conf, i))
    return out


# ---------------------------------------------------------------------------
# detections file (line-delimited JSON)
#
# line 1: {"format": "detections", "version": "1.0", "fields": [...]}
# then one record per line with the fields below, in this order.

DETECTION_FIELDS = ("frame", "class", "box2d", "descriptor", "confidence", "gt_index")


class FormatError(ValueError):
    pass


def detection_to_record(det: Detection) -> dict:
    return {
        "frame": det.frame_id,
        "class": det.cls,
        "box2d": list(det.box2d.as_tuple()),
        "descriptor": [float(v) for v in det.values],
        "confidence": float(det.confidence),
        "gt_index": det.gt_index,
    }


def detection_from_record(rec: dict) -> Detection:
    return Detection(
        str(rec["frame"]),
        str(rec["class"]),
        Box2D(*(float(v) for v in rec["box2d"])),
        rec["descriptor"],
        float(rec["confidence"]),
        rec.get("gt_index"),
    )


def dumps_detections(dets) -> str:
    header = {"format": "detections", "version": FORMAT_VERSION, "fields": list(DETECTION_FIELDS)}
    lines = [json.dumps(header)]
    lines += [json.dumps(detection_to_record(d)) for d in dets]
    return "\n".join(lines) + "\n"


def save_detections(dets, path) -> None:
    Path(path).write_text(dumps_detections(dets))


def load_detections(path) -> list[Detection]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return []
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if lineno == 1:
                if rec.get("format") != "detections":
                    raise FormatError("not a detections file")
                check_version(rec.get("version"), "detections")
                continue
            out.append(detection_from_record(rec))
        except (ValueError, KeyError, TypeError, GeometryError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# descriptor input tensor


def _hash01(u, v, key: int) -> np.ndarray:
    x = np.sin(u * 12.9898 + v * 78.233 + key * 0.61803398875) * 43758.5453
    return x - np.floor(x)


def procedural_image(u, v, box2d: Box2D, key: int) -> np.ndarray:
    """RGB values in [0, 1] at image pixel coordinates (u, v).

    A vertical gradient tinted per ``key`` plus per-pixel hash noise inside
    the object's box, and a flat grey background outside it.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    rng = np.random.default_rng(key)
    tint = 0.3 + 0.6 * rng.random(3)
    iu, iv = np.floor(u), np.floor(v)
    grad = (v - box2d.v_min) / box2d.height
    noise = _hash01(iu, iv, key)
    inside = (u >= box2d.u_min) & (u <= box2d.u_max) & (v >= box2d.v_min) & (v <= box2d.v_max)
    out = np.empty(u.shape + (3,))
    for c in range(3):
        fg = np.clip(tint[c] * (0.6 + 0.4 * grad) + 0.15 * (noise - 0.5), 0.0, 1.0)
        out[..., c] = np.where(inside, fg, 0.35)
    return out


def image_snippet(box2d: Box2D, key: int, out_size: int = SNIPPET_SIZE, image_fn=None) -> np.ndarray:
    """Crop, rescale (nearest sample at pixel centres) and zero-pad to a square."""
    spec = snippet_transform(box2d, out_size)
    image_fn = image_fn or (lambda u, v: procedural_image(u, v, box2d, key))
    centers = np.arange(out_size) + 0.5
    su, sv = np.meshgrid(centers, centers)
    u0, v0, u1, v1 = spec.content
    inside = (su >= u0) & (su < u1) & (sv >= v0) & (sv < v1)
    img = np.zeros((out_size, out_size, 3))
    pts = spec.invert(np.column_stack([su[inside], sv[inside]]))
    img[inside] = image_fn(pts[:, 0], pts[:, 1])
    return img


def build_input_tensor(
    box2d: Box2D,
    lane_pieces,
    key: int = 0,
    zero_lanes: bool = False,
    out_size: int = SNIPPET_SIZE,
    image_fn=None,
) -> np.ndarray:
    """(out_size, out_size, 4) tensor: RGB snippet + lane channel, all in [0, 1]."""
    rgb = image_snippet(box2d, key, out_size, image_fn)
    lanes = rasterize_channel(lane_pieces, box2d, out_size, zero=zero_lanes)
    return np.concatenate([rgb, lanes[..., None]], axis=-1)

