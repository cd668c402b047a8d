"""Road surface as a triangulated irregular network (TIN).

The map is a 2.5D height field: a plan-view Delaunay triangulation whose
vertices carry elevations.  Point queries and ray casts go through an
axis-aligned bounding-volume hierarchy (BVH) over the triangles.

Elevation noise
---------------
``ElevationOnly`` adds a Gaussian offset to every returned elevation.  The
offset is a pure function of the query position quantised to 1 mm and of
the seed, so repeated queries agree.  Normals are left untouched.  For a
ray cast, the offset is looked up at the nominal hit and the hit is then
slid along the ray onto the facet plane raised by that offset, so the
returned point stays on the ray.

``VertexPerturbed`` perturbs vertex elevations once; normals change.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .geometry import Ray

RAY_EPS = 1e-6
_LEAF_SIZE = 4


class TinError(ValueError):
    pass


class DegenerateInput(TinError):
    pass


class OutOfCoverage(TinError):
    pass


class NoIntersection(TinError):
    pass


@dataclass(frozen=True)
class Nominal:
    pass


@dataclass(frozen=True)
class ElevationOnly:
    sigma: float
    seed: int = 0


@dataclass(frozen=True)
class VertexPerturbed:
    sigma: float
    seed: int = 0


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    point: np.ndarray
    normal: np.ndarray
    triangle_id: int

    @property
    def elevation(self) -> float:
        return float(self.point[2])


def gaussian_at(x: float, y: float, seed: int) -> float:
    """Standard normal draw keyed on (x, y) quantised to 1 mm and ``seed``."""
    key = struct.pack("<qqq", int(round(x * 1000.0)), int(round(y * 1000.0)), int(seed))
    h = hashlib.blake2b(key, digest_size=16).digest()
    a, b = struct.unpack("<QQ", h)
    u1 = ((a >> 11) + 1) / 9007199254740993.0  # (0, 1]
    u2 = (b >> 11) / 9007199254740992.0
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


class _BVH:
    """Flat median-split BVH over triangle bounding boxes."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.order: list[int] = []
        self.node_lo: list[tuple] = []
        self.node_hi: list[tuple] = []
        # (left, right) for inner nodes, (-start-1, count) for leaves
        self.node_kids: list[tuple[int, int]] = []
        centroids = 0.5 * (lo + hi)
        self._build(np.arange(len(lo)), lo, hi, centroids)

    def _build(self, idx, lo, hi, centroids) -> int:
        node = len(self.node_lo)
        blo = lo[idx].min(axis=0)
        bhi = hi[idx].max(axis=0)
        self.node_lo.append(tuple(blo.tolist()))
        self.node_hi.append(tuple(bhi.tolist()))
        self.node_kids.append((0, 0))
        if len(idx) <= _LEAF_SIZE:
            start = len(self.order)
            self.order.extend(sorted(idx.tolist()))
            self.node_kids[node] = (-start - 1, len(idx))
            return node
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        ranked = idx[np.argsort(c[:, axis], kind="stable")]
        mid = len(ranked) // 2
        left = self._build(ranked[:mid], lo, hi, centroids)
        right = self._build(ranked[mid:], lo, hi, centroids)
        self.node_kids[node] = (left, right)
        return node

    def candidates_xy(self, x: float, y: float, eps: float = 1e-9):
        stack = [0]
        lo_, hi_, kids, order = self.node_lo, self.node_hi, self.node_kids, self.order
        while stack:
            n = stack.pop()
            lo, hi = lo_[n], hi_[n]
            if x < lo[0] - eps or x > hi[0] + eps or y < lo[1] - eps or y > hi[1] + eps:
                continue
            a, b = kids[n]
            if a < 0:
                start = -a - 1
                yield from order[start : start + b]
            else:
                stack.append(b)
                stack.append(a)

    def candidates_ray(self, o, d, t_max: float = math.inf):
        stack = [0]
        lo_, hi_, kids, order = self.node_lo, self.node_hi, self.node_kids, self.order
        inv = [1.0 / c if c != 0.0 else math.inf for c in d]
        while stack:
            n = stack.pop()
            lo, hi = lo_[n], hi_[n]
            t0, t1 = 0.0, t_max
            hit = True
            for k in range(3):
                if d[k] == 0.0:
                    if o[k] < lo[k] or o[k] > hi[k]:
                        hit = False
                        break
                    continue
                ta = (lo[k] - o[k]) * inv[k]
                tb = (hi[k] - o[k]) * inv[k]
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
                if t0 > t1 * (1 + 1e-12) + 1e-12:
                    hit = False
                    break
            if not hit:
                continue
            a, b = kids[n]
            if a < 0:
                start = -a - 1
                yield from order[start : start + b]
            else:
                stack.append(b)
                stack.append(a)


class TinMap:
    """Immutable TIN with BVH-accelerated queries."""

    def __init__(self, vertices, triangles, noise_mode=None):
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or t.ndim != 2 or t.shape[1] != 3:
            raise TinError("vertices must be (N, 3) and triangles (M, 3)")
        if len(t) == 0:
            raise DegenerateInput("TIN has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise TinError("triangle index out of range")
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        n = np.cross(p1 - p0, p2 - p0)
        area2 = np.linalg.norm(n, axis=1)
        if np.any(area2 <= 2e-9):
            bad = int(np.argmax(area2 <= 2e-9))
            raise DegenerateInput(f"triangle {bad} is degenerate")
        # orient counter-clockwise in plan view so normals point up
        flip = n[:, 2] < 0
        if np.any(n[:, 2] == 0):
            raise DegenerateInput("vertical triangle in a height field")
        t[flip] = t[flip][:, [0, 2, 1]]
        n[flip] *= -1
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t
        self.noise_mode = noise_mode if noise_mode is not None else Nominal()
        self._normals = n / area2[:, None]
        self._normals.flags.writeable = False
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        self._offsets = np.einsum("ij,ij->i", self._normals, p0)
        # python-float caches for the scalar hot loops
        self._p0 = p0.tolist()
        self._e1 = (p1 - p0).tolist()
        self._e2 = (p2 - p0).tolist()
        self._z = np.stack([p0[:, 2], p1[:, 2], p2[:, 2]], axis=1).tolist()
        self._nl = self._normals.tolist()
        self._dl = self._offsets.tolist()
        lo = np.minimum(np.minimum(p0, p1), p2)
        hi = np.maximum(np.maximum(p0, p1), p2)
        self._bvh = _BVH(lo, hi)

    # -- basic properties ---------------------------------------------------

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def normals(self) -> np.ndarray:
        return self._normals

    def triangle_areas_xy(self) -> np.ndarray:
        v, t = self.vertices, self.triangles
        a = v[t[:, 1], :2] - v[t[:, 0], :2]
        b = v[t[:, 2], :2] - v[t[:, 0], :2]
        return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def bounds_xy(self) -> tuple[float, float, float, float]:
        lo = self.vertices[:, :2].min(axis=0)
        hi = self.vertices[:, :2].max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    # -- point queries ------------------------------------------------------

    def _barycentric_xy(self, tri: int, x: float, y: float):
        p0, e1, e2 = self._p0[tri], self._e1[tri], self._e2[tri]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        dx, dy = x - p0[0], y - p0[1]
        b1 = (dx * e2[1] - dy * e2[0]) / det
        b2 = (e1[0] * dy - e1[1] * dx) / det
        return 1.0 - b1 - b2, b1, b2

    def locate(self, x: float, y: float) -> int:
        """Lowest-id triangle whose plan-view footprint contains (x, y)."""
        best = -1
        for tri in self._bvh.candidates_xy(x, y):
            if best >= 0 and tri > best:
                continue
            b0, b1, b2 = self._barycentric_xy(tri, x, y)
            if b0 >= -1e-12 and b1 >= -1e-12 and b2 >= -1e-12:
                best = tri
        if best < 0:
            raise OutOfCoverage(f"({x:.3f}, {y:.3f}) is outside the map")
        return best

    def triangles_containing(self, x: float, y: float) -> list[int]:
        out = []
        for tri in self._bvh.candidates_xy(x, y):
            b = self._barycentric_xy(tri, x, y)
            if min(b) >= -1e-12:
                out.append(tri)
        return sorted(out)

    def nominal_elevation_in(self, tri: int, x: float, y: float) -> float:
        b0, b1, b2 = self._barycentric_xy(tri, x, y)
        z0, z1, z2 = self._z[tri]
        return b0 * z0 + b1 * z1 + b2 * z2

    def noise_offset(self, x: float, y: float) -> float:
        mode = self.noise_mode
        if isinstance(mode, ElevationOnly) and mode.sigma > 0:
            return mode.sigma * gaussian_at(x, y, mode.seed)
        return 0.0

    def query(self, x: float, y: float) -> SurfaceSample:
        x, y = float(x), float(y)
        tri = self.locate(x, y)
        z = self.nominal_elevation_in(tri, x, y) + self.noise_offset(x, y)
        return SurfaceSample(np.array([x, y, z]), self._normals[tri].copy(), tri)

    def elevation(self, x: float, y: float) -> float:
        return self.query(x, y).elevation

    def covers(self, x: float, y: float) -> bool:
        try:
            self.locate(float(x), float(y))
        except OutOfCoverage:
            return False
        return True

    # -- rays ---------------------------------------------------------------

    def _hit_triangle(self, tri: int, o, d):
        # Moller-Trumbore with a small tolerance so shared edges are watertight
        e1, e2, p0 = self._e1[tri], self._e2[tri], self._p0[tri]
        px = d[1] * e2[2] - d[2] * e2[1]
        py = d[2] * e2[0] - d[0] * e2[2]
        pz = d[0] * e2[1] - d[1] * e2[0]
        det = e1[0] * px + e1[1] * py + e1[2] * pz
        if abs(det) < 1e-14:
            return None
        inv = 1.0 / det
        sx, sy, sz = o[0] - p0[0], o[1] - p0[1], o[2] - p0[2]
        u = (sx * px + sy * py + sz * pz) * inv
        if u < -1e-10 or u > 1 + 1e-10:
            return None
        qx = sy * e1[2] - sz * e1[1]
        qy = sz * e1[0] - sx * e1[2]
        qz = sx * e1[1] - sy * e1[0]
        v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
        if v < -1e-10 or u + v > 1 + 1e-10:
            return None
        t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
        if t <= RAY_EPS:
            return None
        return t

    def _nearest(self, o, d, candidates):
        best_t, best_tri = math.inf, -1
        for tri in candidates:
            t = self._hit_triangle(tri, o, d)
            if t is None:
                continue
            if t < best_t - 1e-12 or (abs(t - best_t) <= 1e-12 and tri < best_tri):
                best_t, best_tri = t, tri
        return best_t, best_tri

    def _finish_hit(self, ray: Ray, t: float, tri: int) -> SurfaceSample:
        o, d = ray.origin, ray.direction
        n = self._normals[tri]
        # recompute t against the facet plane for a tighter on-plane residual
        denom = float(n @ d)
        t = (self._offsets[tri] - float(n @ o)) / denom
        p = o + t * d
        delta = self.noise_offset(float(p[0]), float(p[1]))
        if delta != 0.0:
            t = (self._offsets[tri] + delta * float(n[2]) - float(n @ o)) / denom
            p = o + t * d
        return SurfaceSample(p, n.copy(), tri)

    def intersect_ray(self, ray: Ray) -> SurfaceSample:
        o = ray.origin.tolist()
        d = ray.direction.tolist()
        t, tri = self._nearest(o, d, self._bvh.candidates_ray(o, d))
        if tri < 0:
            raise NoIntersection("ray misses the road surface")
        return self._finish_hit(ray, t, tri)

    def intersect_ray_bruteforce(self, ray: Ray) -> SurfaceSample:
        """Exhaustive scan over every triangle (reference path)."""
        o = ray.origin.tolist()
        d = ray.direction.tolist()
        t, tri = self._nearest(o, d, range(len(self.triangles)))
        if tri < 0:
            raise NoIntersection("ray misses the road surface")
        return self._finish_hit(ray, t, tri)

    # -- noise --------------------------------------------------------------

    def with_noise(self, mode) -> "TinMap":
        return with_noise(self, mode)

    def nominal(self) -> "TinMap":
        if isinstance(self.noise_mode, (Nominal, ElevationOnly)):
            return TinMap(self.vertices, self.triangles)
        raise TinError("vertex-perturbed maps do not keep their nominal elevations")


def build_tin(points) -> TinMap:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateInput("points must be an (N, 3) array")
    if len(pts) < 3:
        raise DegenerateInput("need at least 3 points")
    xy = pts[:, :2]
    centered = xy - xy.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInput("points are collinear in plan view")
    try:
        tri = Delaunay(xy)
    except QhullError as exc:
        raise DegenerateInput(str(exc)) from exc
    simplices = tri.simplices
    a = xy[simplices[:, 1]] - xy[simplices[:, 0]]
    b = xy[simplices[:, 2]] - xy[simplices[:, 0]]
    area = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    simplices = simplices[area > 1e-9]
    return TinMap(pts, simplices)


def with_noise(tin: TinMap, mode) -> TinMap:
    if isinstance(mode, VertexPerturbed):
        if mode.sigma < 0:
            raise TinError("sigma must be >= 0")
        v = tin.vertices.copy()
        if mode.sigma > 0:
            rng = np.random.default_rng(mode.seed)
            v[:, 2] += mode.sigma * rng.standard_normal(len(v))
        return TinMap(v, tin.triangles, mode)
    if isinstance(mode, ElevationOnly):
        if mode.sigma < 0:
            raise TinError("sigma must be >= 0")
        return TinMap(tin.vertices, tin.triangles, mode)
    if mode is None or isinstance(mode, Nominal):
        return TinMap(tin.vertices, tin.triangles)
    raise TinError(f"unknown noise mode {mode!r}")


# -- file format ------------------------------------------------------------


def save_tin(tin: TinMap, path) -> None:
    lines = ["# tin 1.0"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in tin.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in tin.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_tin(path) -> TinMap:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            if parts[:2] == ["#", "tin"] and len(parts) > 2 and parts[2].split(".")[0] != "1":
                raise TinError(f"unsupported TIN format version {parts[2]}")
            continue
        try:
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # accept "i/vt/vn" style indices
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except ValueError as exc:
            raise TinError(f"{path}:{lineno}: {exc}") from exc
    return TinMap(verts, faces)
