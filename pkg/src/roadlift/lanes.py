"""Lane centre-line prior: storage, projection and the fourth input channel."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box2D, CameraModel, check_version, FORMAT_VERSION
from .snippet import SNIPPET_SIZE, snippet_transform

SUBDIVIDE_M = 0.5
NEAR_PLANE = 0.1


@dataclass(frozen=True, eq=False)
class Lane:
    lane_id: int
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
            raise ValueError(f"lane {self.lane_id}: need at least two 3D points")
        if np.any(np.linalg.norm(np.diff(p, axis=0), axis=1) <= 1e-6):
            raise ValueError(f"lane {self.lane_id}: repeated consecutive points")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def distance_xy(self, x: float, y: float) -> float:
        """Plan-view distance from (x, y) to the polyline."""
        q = np.array([x, y])
        a = self.points[:-1, :2]
        b = self.points[1:, :2]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
        return float(np.min(np.linalg.norm(a + t[:, None] * ab - q, axis=1)))


@dataclass(frozen=True)
class LaneMap:
    lanes: tuple[Lane, ...]

    def __iter__(self):
        return iter(self.lanes)

    def __len__(self) -> int:
        return len(self.lanes)

    def to_dict(self) -> dict:
        return {
            "format": "lanes",
            "version": FORMAT_VERSION,
            "lanes": [{"id": ln.lane_id, "points": ln.points.tolist()} for ln in self.lanes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaneMap":
        check_version(d.get("version"), "lanes")
        return cls(tuple(Lane(int(ln["id"]), ln["points"]) for ln in d["lanes"]))


def save_lanes(lanes: LaneMap, path) -> None:
    Path(path).write_text(json.dumps(lanes.to_dict()) + "\n")


def load_lanes(path) -> LaneMap:
    return LaneMap.from_dict(json.loads(Path(path).read_text()))


def subdivide(points, spacing: float = SUBDIVIDE_M) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    out = [p[:1]]
    for a, b in zip(p[:-1], p[1:]):
        n = max(1, math.ceil(np.linalg.norm(b - a) / spacing))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.vstack(out)


def _near_clipped_pieces(pc: np.ndarray) -> list[np.ndarray]:
    pieces: list[np.ndarray] = []
    piece: list[np.ndarray] = []
    for a, b in zip(pc[:-1], pc[1:]):
        za, zb = a[2], b[2]
        if za < NEAR_PLANE and zb < NEAR_PLANE:
            if piece:
                pieces.append(np.array(piece))
                piece = []
            continue
        if za < NEAR_PLANE:
            a = a + (NEAR_PLANE - za) / (zb - za) * (b - a)
        cut = zb < NEAR_PLANE
        if cut:
            b = a + (NEAR_PLANE - a[2]) / (zb - a[2]) * (b - a)
        if not piece:
            piece = [a]
        piece.append(b)
        if cut:
            pieces.append(np.array(piece))
            piece = []
    if piece:
        pieces.append(np.array(piece))
    return pieces


def project_lanes(lanes: LaneMap, camera: CameraModel) -> list[tuple[int, np.ndarray]]:
    """Image-space polylines as ``(lane_id, (N, 2) array)`` pieces.

    Segments crossing the near plane (camera z = 0.1 m) are clipped there;
    a lane that dips behind the camera comes back as several pieces.
    """
    out = []
    for lane in lanes:
        pc = camera.to_camera(subdivide(lane.points))
        for cam in _near_clipped_pieces(pc):
            u = camera.fx * cam[:, 0] / cam[:, 2] + camera.cx
            v = camera.fy * cam[:, 1] / cam[:, 2] + camera.cy
            out.append((lane.lane_id, np.column_stack([u, v])))
    return out


def _clip_segment(a, b, lo, hi):
    """Liang-Barsky clip of segment a-b to the rectangle [lo, hi]."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for k in range(2):
        for p, q in ((-d[k], a[k] - lo[k]), (d[k], hi[k] - a[k])):
            if p == 0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                return None
    return a + t0 * d, a + t1 * d


def _draw_segment(canvas: np.ndarray, a, b, content) -> None:
    size = canvas.shape[0]
    u0, v0, u1, v1 = content
    c0 = max(int(np.floor(min(a[0], b[0]) - 1.5)), int(np.floor(u0)), 0)
    c1 = min(int(np.ceil(max(a[0], b[0]) + 1.5)), int(np.ceil(u1)), size)
    r0 = max(int(np.floor(min(a[1], b[1]) - 1.5)), int(np.floor(v0)), 0)
    r1 = min(int(np.ceil(max(a[1], b[1]) + 1.5)), int(np.ceil(v1)), size)
    if c1 <= c0 or r1 <= r0:
        return
    cu = np.arange(c0, c1) + 0.5
    cv = np.arange(r0, r1) + 0.5
    pu, pv = np.meshgrid(cu, cv)
    d = b - a
    dd = float(d @ d)
    if dd > 0:
        t = np.clip(((pu - a[0]) * d[0] + (pv - a[1]) * d[1]) / dd, 0.0, 1.0)
    else:
        t = np.zeros_like(pu)
    dist = np.hypot(pu - (a[0] + t * d[0]), pv - (a[1] + t * d[1]))
    # 1 px box-filtered stroke: triangular profile of unit half-width
    val = np.clip(1.0 - dist, 0.0, 1.0)
    inside = (pu >= u0) & (pu <= u1) & (pv >= v0) & (pv <= v1)
    val = np.where(inside, val, 0.0)
    np.maximum(canvas[r0:r1, c0:c1], val, out=canvas[r0:r1, c0:c1])


def rasterize_channel(polylines, box: Box2D, out_size: int = SNIPPET_SIZE, zero: bool = False) -> np.ndarray:
    """Lane channel for one detection as an ``(out_size, out_size)`` array in [0, 1].

    ``polylines`` are image-space pieces, either bare ``(N, 2)`` arrays or
    ``(lane_id, array)`` pairs as returned by :func:`project_lanes`.
    ``zero=True`` gives the all-zero channel used when the lane prior is
    switched off.
    """
    canvas = np.zeros((out_size, out_size))
    if zero:
        return canvas
    spec = snippet_transform(box, out_size)
    lo = np.array([box.u_min, box.v_min])
    hi = np.array([box.u_max, box.v_max])
    content = spec.content
    for item in polylines:
        pts = item[1] if isinstance(item, tuple) else item
        pts = np.asarray(pts, dtype=float)
        for a, b in zip(pts[:-1], pts[1:]):
            # canonical endpoint order keeps the raster direction-independent
            if tuple(b) < tuple(a):
                a, b = b, a
            seg = _clip_segment(a, b, lo, hi)
            if seg is None:
                continue
            sa, sb = spec.apply(np.array(seg))
            _draw_segment(canvas, sa, sb, content)
    return canvas
