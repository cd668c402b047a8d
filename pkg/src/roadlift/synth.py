"""Synthetic traffic-camera scenes with exact 3D ground truth.

A straight road runs along world +X over a parametric surface.  Lanes are
3.5 m apart; vehicles sit on lane centre-lines with small lateral and
heading jitter and their base conforms to the local TIN facet.

Label lines
-----------
KITTI column layout extended with three fields::

    type truncation occlusion alpha  x1 y1 x2 y2  h w l  x y z  rotation_y score  rotation_x rotation_z model_name

``x y z`` is the box centre in the WORLD frame (Z up).  ``rotation_y`` is
yaw (about the vertical axis), ``rotation_x`` is pitch and ``rotation_z``
is roll, following the angle conventions in :mod:`roadlift.geometry`.
Floats are written with ``repr`` so files round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Frame, GroundTruth, compute_observation_angle
from .geometry import (
    BOTTOM,
    FORMAT_VERSION,
    Box2D,
    Box3D,
    CameraModel,
    box_corners,
    check_version,
    load_camera,
    pixel_ray,
    project,
    save_camera,
)
from .lanes import Lane, LaneMap, load_lanes, save_lanes
from .metrics import iou_bev
from .tin import NoIntersection, TinMap, build_tin, load_tin, save_tin

LANE_PITCH = 3.5
CAMERA_HEIGHT = 11.0
CAMERA_PITCH_DEG = 6.0
CAMERA_VFOV_DEG = 21.0
IMAGE_SIZE = (3840, 2160)

DIM_PRIORS = {
    # (l, w, h) ranges in metres
    "car": ((3.8, 5.2), (1.6, 2.0), (1.4, 1.8)),
    "truck": ((6.0, 10.0), (2.2, 2.6), (2.5, 3.8)),
}
MODEL_NAMES = {"car": ("sedan", "hatchback", "suv", "coupe"), "truck": ("box_truck", "semi", "bus")}


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class RoadProfile:
    kind: str = "flat"  # flat | grade | crest | sag | banked
    value: float = 0.0  # grade s, curvature (1/m), or cross slope
    extent: tuple[float, float, float, float] = (0.0, -16.0, 220.0, 16.0)
    sample_spacing: float = 4.0

    def __post_init__(self):
        if self.kind not in ("flat", "grade", "crest", "sag", "banked"):
            raise ValueError(f"unknown road profile {self.kind!r}")
        if self.sample_spacing <= 0:
            raise ValueError("sample_spacing must be positive")
        if self.kind == "grade" and abs(self.value) > 0.15:
            raise ValueError("grade beyond +-0.15")
        if self.kind == "banked" and abs(self.value) > 0.10:
            raise ValueError("cross slope beyond +-0.10")
        if self.kind in ("crest", "sag"):
            if self.value < 0:
                raise ValueError("vertical-curve curvature must be >= 0")
            half = 0.5 * (self.extent[2] - self.extent[0])
            if self.value * half > 0.15:
                raise ValueError("vertical curve exceeds a 0.15 grade inside the extent")

    @property
    def vertex_x(self) -> float:
        return 0.5 * (self.extent[0] + self.extent[2])

    def elevation(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "grade":
            return self.value * x
        if self.kind == "banked":
            return self.value * y
        if self.kind == "crest":
            return -0.5 * self.value * (x - self.vertex_x) ** 2
        if self.kind == "sag":
            return 0.5 * self.value * (x - self.vertex_x) ** 2
        return np.zeros(np.broadcast(x, y).shape)

    @property
    def is_planar(self) -> bool:
        return self.kind in ("flat", "grade", "banked")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "extent": list(self.extent), "sample_spacing": self.sample_spacing}

    @classmethod
    def from_dict(cls, d: dict) -> "RoadProfile":
        return cls(d["kind"], float(d["value"]), tuple(d["extent"]), float(d["sample_spacing"]))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    profile: RoadProfile = field(default_factory=RoadProfile)
    camera: CameraModel | None = None
    lane_count: int = 4
    vehicle_count: int = 10
    range_span: tuple[float, float] = (40.0, 160.0)
    truck_fraction: float = 0.2
    seed: int = 0
    scene_id: str = "scene0000"
    heading: str = "lanes"  # "lanes": per-lane direction with jitter, "up": all exactly +X

    def resolved_camera(self) -> CameraModel:
        if self.camera is not None:
            return self.camera
        return default_camera(self.profile)


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    tin: TinMap
    lanes: LaneMap
    frame: Frame

    @property
    def camera(self) -> CameraModel:
        return self.frame.camera

    @property
    def objects(self) -> tuple[GroundTruth, ...]:
        return self.frame.objects


def lane_offsets(lane_count: int) -> list[float]:
    return [(k - (lane_count - 1) / 2) * LANE_PITCH for k in range(lane_count)]


def default_camera(
    profile: RoadProfile,
    lateral: float = -9.0,
    height: float = CAMERA_HEIGHT,
    pitch_deg: float = CAMERA_PITCH_DEG,
    yaw_offset_deg: float = 0.0,
    aim_range: float = 100.0,
) -> CameraModel:
    """Roadside pole camera at x = 0 aimed at the road centre ``aim_range`` ahead."""
    ground = float(profile.elevation(0.0, lateral))
    yaw = math.atan2(-lateral, aim_range) + math.radians(yaw_offset_deg)
    return CameraModel.from_pose(
        (0.0, lateral, ground + height), yaw, math.radians(pitch_deg), CAMERA_VFOV_DEG, *IMAGE_SIZE
    )


def sample_tin(profile: RoadProfile, rng: np.random.Generator) -> TinMap:
    x0, y0, x1, y1 = profile.extent
    nx = max(2, int(round((x1 - x0) / profile.sample_spacing)) + 1)
    ny = max(2, int(round((y1 - y0) / profile.sample_spacing)) + 1)
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    gx, gy = gx.ravel(), gy.ravel()
    interior = (gx > x0) & (gx < x1) & (gy > y0) & (gy < y1)
    jitter = rng.uniform(-0.25, 0.25, size=(len(gx), 2)) * profile.sample_spacing
    gx = np.where(interior, gx + jitter[:, 0], gx)
    gy = np.where(interior, gy + jitter[:, 1], gy)
    return build_tin(np.column_stack([gx, gy, profile.elevation(gx, gy)]))


def build_lanes(profile: RoadProfile, tin: TinMap, lane_count: int, step: float = 5.0) -> LaneMap:
    x0, _, x1, _ = profile.extent
    xs = np.arange(x0 + 1.0, x1 - 1.0 + 1e-9, step)
    lanes = []
    for k, y in enumerate(lane_offsets(lane_count)):
        pts = [(float(x), y, tin.elevation(float(x), y)) for x in xs]
        lanes.append(Lane(k, pts))
    return LaneMap(tuple(lanes))


def place_box(tin: TinMap, x: float, y: float, yaw: float, size) -> Box3D:
    """Box whose centroid projects to (x, y) in plan view, base on the TIN.

    The base centre is shifted against the tilt of the facet normal so the
    centroid, not the base, lands on the requested plan position.
    """
    bx, by = x, y
    for _ in range(4):
        s = tin.query(bx, by)
        n = s.normal
        bx, by = x - 0.5 * size[2] * n[0], y - 0.5 * size[2] * n[1]
    s = tin.query(bx, by)
    n = s.normal
    f = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    f = f - (f @ n) * n
    f /= np.linalg.norm(f)
    r = np.column_stack([f, np.cross(n, f), n])
    return Box3D.from_matrix(s.point + 0.5 * size[2] * n, size, r)


def tight_box(camera: CameraModel, box: Box3D) -> tuple[Box2D | None, float]:
    """Hull of the 9 projected keypoints clipped to the image, and truncation."""
    kp = project(camera, box_corners(box))
    u0, v0 = kp.min(axis=0)
    u1, v1 = kp.max(axis=0)
    full = (u1 - u0) * (v1 - v0)
    cu0, cv0 = max(u0, 0.0), max(v0, 0.0)
    cu1, cv1 = min(u1, float(camera.image_width)), min(v1, float(camera.image_height))
    if cu1 - cu0 < 2.0 or cv1 - cv0 < 2.0:
        return None, 1.0
    trunc = 1.0 - (cu1 - cu0) * (cv1 - cv0) / full if full > 0 else 0.0
    return Box2D(float(cu0), float(cv0), float(cu1), float(cv1)), float(trunc)


def _visible_base(camera: CameraModel, tin: TinMap, box: Box3D, tol: float) -> bool:
    corners = box_corners(box)
    for i in BOTTOM:
        try:
            uv = project(camera, corners[i])
            hit = tin.intersect_ray(pixel_ray(camera, uv))
        except (NoIntersection, ValueError):
            return False
        if np.linalg.norm(hit.point - corners[i]) > tol:
            return False
    return True


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    tin = sample_tin(spec.profile, rng)
    lanes = build_lanes(spec.profile, tin, spec.lane_count)
    camera = spec.resolved_camera()
    cam_c = camera.center
    offsets = lane_offsets(spec.lane_count)
    x0, y0, x1, y1 = spec.profile.extent
    tol = 1e-3 if spec.profile.is_planar else 0.5

    objects: list[GroundTruth] = []
    placed: list[Box3D] = []
    attempts = 0
    max_attempts = 100 * max(spec.vehicle_count, 1)
    while len(objects) < spec.vehicle_count:
        attempts += 1
        if attempts > max_attempts:
            raise InfeasibleSpec(
                f"placed {len(objects)} of {spec.vehicle_count} vehicles after {max_attempts} attempts"
            )
        lane = int(rng.integers(spec.lane_count))
        rng_range = rng.uniform(*spec.range_span)
        jitter = rng.uniform(-0.3, 0.3)
        yaw_jitter = math.radians(rng.uniform(-3.0, 3.0))
        cls = "truck" if rng.random() < spec.truck_fraction else "car"
        (lmin, lmax), (wmin, wmax), (hmin, hmax) = DIM_PRIORS[cls]
        size = (rng.uniform(wmin, wmax), rng.uniform(lmin, lmax), rng.uniform(hmin, hmax))
        model = MODEL_NAMES[cls][int(rng.integers(len(MODEL_NAMES[cls])))]

        y = offsets[lane] + jitter
        dz = cam_c[2] - float(spec.profile.elevation(cam_c[0] + rng_range, y))
        plan2 = rng_range**2 - dz**2 - (y - cam_c[1]) ** 2
        if plan2 <= 0:
            continue
        x = cam_c[0] + math.sqrt(plan2)
        if not (x0 + 8.0 < x < x1 - 8.0 and y0 + 3.0 < y < y1 - 3.0):
            continue
        if spec.heading == "up":
            # exactly up the road: used for analytic slope checks
            yaw = 0.0
        else:
            yaw = (0.0 if offsets[lane] >= 0 else math.pi) + yaw_jitter
        box = place_box(tin, x, y, yaw, size)
        corners = box_corners(box)
        if np.any(camera.to_camera(corners)[:, 2] < 1.0):
            continue
        if not all(tin.covers(*corners[i, :2]) for i in BOTTOM):
            continue
        grown = Box3D(box.center, (size[0] + 1.0, size[1] + 1.0, size[2]), box.rotation)
        if any(iou_bev(grown, p) > 0.0 for p in placed):
            continue
        box2d, trunc = tight_box(camera, box)
        if box2d is None:
            continue
        if not _visible_base(camera, tin, box, tol):
            continue
        placed.append(box)
        objects.append(GroundTruth(box, box2d, cls, model, round(trunc, 6), 0))
    frame = Frame(spec.scene_id, camera, tuple(objects))
    return Scene(spec, tin, lanes, frame)


# ---------------------------------------------------------------------------
# labels


def _fmt(v: float) -> str:
    return repr(float(v))


def gt_to_labels(frame: Frame) -> list[str]:
    lines = []
    for gt in frame.objects:
        b = gt.box3d
        w, l, h = b.size
        yaw, pitch, roll = b.rotation
        alpha = compute_observation_angle(b, frame.camera)
        fields_ = [
            gt.cls.capitalize(),
            _fmt(gt.truncation),
            str(int(gt.occlusion)),
            _fmt(alpha),
            *(_fmt(v) for v in gt.box2d.as_tuple()),
            _fmt(h), _fmt(w), _fmt(l),
            *(_fmt(v) for v in b.center),
            _fmt(yaw),
            _fmt(1.0),
            _fmt(pitch),
            _fmt(roll),
            gt.model_name,
        ]  # fmt: skip
        lines.append(" ".join(fields_))
    return lines


@dataclass(frozen=True, eq=False)
class LabelRecord:
    gt: GroundTruth
    alpha: float
    score: float


def parse_label_line(line: str) -> LabelRecord:
    p = line.split()
    if len(p) != 19:
        raise ValueError(f"expected 19 label fields, got {len(p)}")
    cls = p[0].lower()
    trunc, occ, alpha = float(p[1]), int(p[2]), float(p[3])
    box2d = Box2D(*(float(v) for v in p[4:8]))
    h, w, l = (float(v) for v in p[8:11])
    center = [float(v) for v in p[11:14]]
    yaw, score, pitch, roll = float(p[14]), float(p[15]), float(p[16]), float(p[17])
    box = Box3D(center, (w, l, h), (yaw, pitch, roll))
    return LabelRecord(GroundTruth(box, box2d, cls, p[18], trunc, occ), alpha, score)


def parse_labels(text: str) -> list[LabelRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parse_label_line(line))
        except ValueError as exc:
            raise ValueError(f"label line {lineno}: {exc}") from exc
    return out


def emit_labels(records) -> str:
    """Inverse of :func:`parse_labels` for parsed records."""
    lines = []
    for r in records:
        gt, b = r.gt, r.gt.box3d
        w, l, h = b.size
        yaw, pitch, roll = b.rotation
        lines.append(
            " ".join(
                [gt.cls.capitalize(), _fmt(gt.truncation), str(gt.occlusion), _fmt(r.alpha)]
                + [_fmt(v) for v in gt.box2d.as_tuple()]
                + [_fmt(h), _fmt(w), _fmt(l)]
                + [_fmt(v) for v in b.center]
                + [_fmt(yaw), _fmt(r.score), _fmt(pitch), _fmt(roll), gt.model_name]
            )
        )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# benchmark suite

# (lateral offset m, height m, pitch deg, yaw offset deg)
TRAIN_POSES = (
    (-9.0, 11.0, 6.0, 0.0),
    (-7.0, 11.0, 6.0, 2.0),
    (9.0, 11.0, 6.0, -1.0),
    (-11.0, 11.5, 6.5, 1.0),
    (7.5, 10.5, 5.5, 0.5),
)
HELDOUT_POSES = (
    (-10.0, 11.0, 6.0, -1.5),
    (10.5, 11.2, 6.2, 1.5),
)
PROFILE_CYCLE = ("flat", "grade", "crest", "sag", "banked")


def _profile_for(kind: str, rng: np.random.Generator) -> RoadProfile:
    if kind == "grade":
        return RoadProfile("grade", float(rng.choice([-1, 1]) * rng.uniform(0.03, 0.08)))
    if kind in ("crest", "sag"):
        return RoadProfile(kind, float(rng.uniform(2e-4, 6e-4)))
    if kind == "banked":
        return RoadProfile("banked", float(rng.choice([-1, 1]) * rng.uniform(0.02, 0.06)))
    return RoadProfile("flat")


@dataclass(frozen=True, eq=False)
class Benchmark:
    seed: int
    scenes: tuple[Scene, ...]
    splits: tuple[str, ...]  # per scene: "train" | "heldout"
    poses: tuple[int, ...]  # per scene pose index into TRAIN_POSES + HELDOUT_POSES

    @property
    def frames(self) -> list[Frame]:
        return [s.frame for s in self.scenes]

    def vehicle_count(self) -> int:
        return sum(len(s.objects) for s in self.scenes)


def benchmark(
    seed: int = 0,
    profile: str | None = None,
    scenes_per_pose: int = 10,
    vehicles_per_scene: int = 10,
    range_span: tuple[float, float] = (40.0, 160.0),
) -> Benchmark:
    """Fixed-seed suite: 5 generation poses + 2 held-out poses.

    ``profile`` pins every scene to one road kind; by default scenes cycle
    through flat, grade, crest, sag and banked.
    """
    rng = np.random.default_rng(seed)
    poses = TRAIN_POSES + HELDOUT_POSES
    scenes, splits, pose_ids = [], [], []
    k = 0
    for pi, (lat, height, pitch, yaw_off) in enumerate(poses):
        for _ in range(scenes_per_pose):
            kind = profile or PROFILE_CYCLE[k % len(PROFILE_CYCLE)]
            prof = _profile_for(kind, rng)
            cam = default_camera(prof, lat, height, pitch, yaw_off)
            spec = SceneSpec(
                prof, cam, 4, vehicles_per_scene, range_span,
                seed=int(rng.integers(2**31)), scene_id=f"scene{k:04d}",
            )  # fmt: skip
            scenes.append(generate_scene(spec))
            splits.append("train" if pi < len(TRAIN_POSES) else "heldout")
            pose_ids.append(pi)
            k += 1
    return Benchmark(seed, tuple(scenes), tuple(splits), tuple(pose_ids))


# ---------------------------------------------------------------------------
# dataset on disk
#
# <root>/manifest.json
# <root>/<scene_id>/camera.json, tin.obj, lanes.json, labels.txt, profile.json


def write_dataset(bench: Benchmark, root) -> None:
    root = Path(root)
    entries = []
    for scene, split, pose in zip(bench.scenes, bench.splits, bench.poses):
        d = root / scene.frame.frame_id
        d.mkdir(parents=True, exist_ok=True)
        save_camera(scene.camera, d / "camera.json")
        save_tin(scene.tin, d / "tin.obj")
        save_lanes(scene.lanes, d / "lanes.json")
        (d / "labels.txt").write_text("".join(line + "\n" for line in gt_to_labels(scene.frame)))
        (d / "profile.json").write_text(json.dumps(scene.spec.profile.to_dict()) + "\n")
        entries.append(
            {"id": scene.frame.frame_id, "split": split, "pose": pose, "profile": scene.spec.profile.kind,
             "vehicles": len(scene.objects)}
        )  # fmt: skip
    manifest = {"format": "dataset", "version": FORMAT_VERSION, "seed": bench.seed, "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


@dataclass(frozen=True, eq=False)
class LoadedScene:
    frame: Frame
    tin: TinMap
    lanes: LaneMap
    profile: RoadProfile
    split: str


def load_manifest(root) -> dict:
    m = json.loads((Path(root) / "manifest.json").read_text())
    if m.get("format") != "dataset":
        raise ValueError(f"{root}: not a dataset manifest")
    check_version(m.get("version"), "dataset")
    return m


def load_scene(root, entry: dict) -> LoadedScene:
    d = Path(root) / entry["id"]
    camera = load_camera(d / "camera.json")
    labels = parse_labels((d / "labels.txt").read_text())
    frame = Frame(entry["id"], camera, tuple(r.gt for r in labels))
    profile = RoadProfile.from_dict(json.loads((d / "profile.json").read_text()))
    return LoadedScene(frame, load_tin(d / "tin.obj"), load_lanes(d / "lanes.json"), profile, entry.get("split", ""))


def load_dataset(root) -> list[LoadedScene]:
    m = load_manifest(root)
    return [load_scene(root, e) for e in m["scenes"]]

