"""Lift decoded descriptor outputs to full 3D boxes using the road map.

Rays through bottom keypoints 0, 1, 2 (front-left, front-right, rear-right)
are intersected with the TIN.  The rear-left corner closes the
parallelogram, the base is extruded by the decoded height along the road
normal at the base centroid, and size/orientation are read off the base.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Detection, Decoded
from .geometry import (
    FORMAT_VERSION,
    Box3D,
    CameraModel,
    check_version,
    pixel_ray,
)
from .tin import NoIntersection, OutOfCoverage, TinMap

MIN_BASE_AREA = 1e-4


class LiftError(ValueError):
    pass


class RayMiss(LiftError):
    def __init__(self, index: int):
        super().__init__(f"ray through bottom keypoint {index} misses the road surface")
        self.index = index


class AllRaysMiss(LiftError):
    pass


class DegenerateBase(LiftError):
    pass


@dataclass(frozen=True, eq=False)
class LiftResult:
    box: Box3D
    base_points: np.ndarray  # (4, 3) in canonical cyclic order
    closure_residual: float  # |P0 + P2 - P1 - P3|
    dim_deltas: tuple[float, float, float] | None  # geometric minus descriptor (w, l, h)
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def used_fallback(self) -> bool:
        return bool(self.flags)


def _normal_at(tin: TinMap, point, fallback_tri_normal) -> np.ndarray:
    try:
        return tin.query(float(point[0]), float(point[1])).normal
    except OutOfCoverage:
        return fallback_tri_normal


def _box_from_base(base: np.ndarray, n: np.ndarray, height: float) -> tuple[Box3D, float]:
    p0, p1, p2, p3 = base
    area = float(np.linalg.norm(np.cross(p1 - p0, p3 - p0)))
    if area < MIN_BASE_AREA:
        raise DegenerateBase(f"base area {area:.2e} m^2 is below {MIN_BASE_AREA}")
    if not height > 0:
        raise LiftError(f"non-positive height {height}")
    c = base.mean(axis=0)
    f = 0.5 * (p0 + p1) - 0.5 * (p2 + p3)
    f = f - (f @ n) * n
    fn = np.linalg.norm(f)
    if fn < 1e-9:
        raise DegenerateBase("base forward direction is parallel to the road normal")
    f = f / fn
    left = np.cross(n, f)
    r = np.column_stack([f, left, n])
    length = 0.5 * (np.linalg.norm(p3 - p0) + np.linalg.norm(p2 - p1))
    width = 0.5 * (np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p3))
    box = Box3D.from_matrix(c + 0.5 * height * n, (width, length, height), r)
    closure = float(np.linalg.norm(p0 + p2 - p1 - p3))
    return box, closure


def _dim_deltas(box: Box3D, dec: Decoded):
    if dec.size is None:
        return None
    return tuple(float(a - b) for a, b in zip(box.size, dec.size))


def lift(detection: Detection, camera: CameraModel, tin: TinMap) -> LiftResult:
    """Primary path; falls back to :func:`fallback_lift` on a ray miss."""
    dec = detection.decoded()
    hits = []
    for i in (0, 1, 2):
        try:
            hits.append(tin.intersect_ray(pixel_ray(camera, dec.bottom[i])))
        except NoIntersection:
            return fallback_lift(detection, camera, tin, first_miss=i)
    p0, p1, p2 = (h.point for h in hits)
    p3 = p0 + p2 - p1
    base = np.array([p0, p1, p2, p3])
    n = _normal_at(tin, base.mean(axis=0), hits[1].normal)
    box, closure = _box_from_base(base, n, dec.height)
    return LiftResult(box, base, closure, _dim_deltas(box, dec))


def _heading_from_alpha(camera: CameraModel, dec: Decoded, n: np.ndarray) -> np.ndarray:
    """Unit forward vector in the plane normal to ``n`` that reproduces alpha."""
    u, v = dec.keypoints[8]
    ray_c = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    theta_axis = math.atan2(ray_c[0], ray_c[2]) - dec.alpha
    s, c = math.sin(theta_axis), math.cos(theta_axis)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = seed - (seed @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    c1 = camera.rotation @ e1
    c2 = camera.rotation @ e2
    a = c1[0] * c - c1[2] * s
    b = c2[0] * c - c2[2] * s
    if math.hypot(a, b) < 1e-12:
        raise LiftError("heading is unobservable from the observation angle")
    phi = math.atan2(-a, b)
    f = math.cos(phi) * e1 + math.sin(phi) * e2
    fc = camera.rotation @ f
    if fc[0] * s + fc[2] * c < 0:
        f = -f
    return f


def fallback_lift(detection: Detection, camera: CameraModel, tin: TinMap, first_miss: int | None = None) -> LiftResult:
    """Lift with whichever bottom-keypoint rays hit the surface.

    Any three hits complete the parallelogram as in the primary path.  With
    one or two hits the base is rebuilt from the descriptor dimensions and
    the heading implied by the observation angle.
    """
    dec = detection.decoded()
    flags = []
    if first_miss is not None:
        flags.append(f"ray_miss:{first_miss}")
    hits = {}
    for i in range(4):
        try:
            hits[i] = tin.intersect_ray(pixel_ray(camera, dec.bottom[i]))
        except NoIntersection:
            tag = f"ray_miss:{i}"
            if tag not in flags:
                flags.append(tag)
    if not hits:
        raise AllRaysMiss("no bottom keypoint ray hits the road surface")
    any_normal = next(iter(hits.values())).normal

    if len(hits) >= 3:
        pts = {i: h.point for i, h in hits.items()}
        if len(pts) == 4:
            # primary triple is available; the fourth hit is not used
            pts.pop(3)
        (missing,) = set(range(4)) - set(pts)
        pts[missing] = pts[(missing - 1) % 4] + pts[(missing + 1) % 4] - pts[(missing + 2) % 4]
        base = np.array([pts[i] for i in range(4)])
        n = _normal_at(tin, base.mean(axis=0), any_normal)
        box, closure = _box_from_base(base, n, dec.height)
        flags.append(f"parallelogram_from:{''.join(str(i) for i in sorted(hits) if i != missing)}")
        return LiftResult(box, base, closure, _dim_deltas(box, dec), tuple(flags))

    if not dec.is_full:
        raise LiftError("dimension-based completion needs the full 22-value descriptor")
    if not all(v > 0 for v in dec.size):
        raise LiftError(f"non-positive descriptor dimensions {dec.size}")
    flags.append("dims_completion")
    pts = np.array([hits[i].point for i in sorted(hits)])
    n = _normal_at(tin, pts.mean(axis=0), any_normal)
    f = _heading_from_alpha(camera, dec, n)
    left = np.cross(n, f)
    w, l, h = dec.size
    signs = {0: (1, 1), 1: (1, -1), 2: (-1, -1), 3: (-1, 1)}
    offs = {i: 0.5 * (sx * l * f + sy * w * left) for i, (sx, sy) in signs.items()}
    c = np.mean([hits[i].point - offs[i] for i in sorted(hits)], axis=0)
    base = np.array([c + offs[i] for i in range(4)])
    r = np.column_stack([f, left, n])
    box = Box3D.from_matrix(c + 0.5 * h * n, (w, l, h), r)
    closure = float(np.linalg.norm(base[0] + base[2] - base[1] - base[3]))
    return LiftResult(box, base, closure, (0.0, 0.0, 0.0), tuple(flags))


# -- lifted-box records ---------------------------------------------------------
#
# Line-delimited JSON.  Line 1 is a header; each following line holds the
# fields of LIFT_FIELDS in that order.  Failed lifts carry status "failed"
# and a reason instead of a box.

LIFT_FIELDS = (
    "frame", "class", "confidence", "gt_index", "status",
    "center", "size", "euler", "residuals", "flags", "reason",
)  # fmt: skip


def lift_record(det: Detection, camera: CameraModel, tin: TinMap) -> dict:
    rec = {
        "frame": det.frame_id,
        "class": det.cls,
        "confidence": float(det.confidence),
        "gt_index": det.gt_index,
    }
    try:
        res = lift(det, camera, tin)
    except (LiftError, OutOfCoverage) as exc:
        rec.update(status="failed", center=None, size=None, euler=None, residuals=None, flags=[], reason=str(exc))
        return rec
    rec.update(
        status="ok",
        center=[float(v) for v in res.box.center],
        size=list(res.box.size),
        euler=list(res.box.rotation),
        residuals={
            "closure": res.closure_residual,
            "dims": None if res.dim_deltas is None else list(res.dim_deltas),
        },
        flags=list(res.flags),
        reason=None,
    )
    return rec


def record_box(rec: dict) -> Box3D | None:
    if rec.get("status") != "ok":
        return None
    return Box3D(rec["center"], rec["size"], rec["euler"])


def dumps_lifted(records) -> str:
    header = {"format": "lifted", "version": FORMAT_VERSION, "fields": list(LIFT_FIELDS)}
    lines = [json.dumps(header)]
    lines += [json.dumps({k: rec.get(k) for k in LIFT_FIELDS}) for rec in records]
    return "\n".join(lines) + "\n"


def load_lifted(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise LiftError(f"{path}:{lineno}: {exc}") from exc
        if lineno == 1:
            if rec.get("format") != "lifted":
                raise LiftError(f"{path}: not a lifted-box file")
            check_version(rec.get("version"), "lifted")
            continue
        out.append(rec)
    return out
