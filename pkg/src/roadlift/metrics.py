"""Box overlap and detection metrics.

3D IoU is exact for arbitrarily rotated boxes: the intersection of two boxes
is the polytope cut out by their 12 face half-spaces.  Its vertices are
found by solving every plane triple and keeping the solutions that satisfy
all constraints; the volume is the convex hull volume of those points.

BEV IoU clips the plan-view corner hulls of the two boxes against each
other (Sutherland-Hodgman) and measures areas with the shoelace formula.

AP follows the 40-recall-point interpolated definition.
"""

from __future__ import annotations

import itertools
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import Box3D, CameraModel, box_corners

_TRIPLES = np.array(list(itertools.combinations(range(12), 3)))


# ---------------------------------------------------------------------------
# 3D IoU


def box_halfspaces(box: Box3D) -> tuple[np.ndarray, np.ndarray]:
    """(A, b) with the box = {x : A x <= b}, A rows are unit face normals."""
    r = box.matrix
    w, l, h = box.size
    half = np.array([l, w, h]) / 2
    normals = np.vstack([r.T, -r.T])
    offsets = normals @ box.center + np.concatenate([half, half])
    return normals, offsets


def intersection_volume(a: Box3D, b: Box3D, tol: float = 1e-9) -> float:
    ra = 0.5 * math.sqrt(sum(s * s for s in a.size))
    rb = 0.5 * math.sqrt(sum(s * s for s in b.size))
    if np.linalg.norm(a.center - b.center) > ra + rb:
        return 0.0
    na, da = box_halfspaces(a)
    nb, db = box_halfspaces(b)
    normals = np.vstack([na, nb])
    offsets = np.concatenate([da, db])
    mats = normals[_TRIPLES]  # (220, 3, 3)
    rhs = offsets[_TRIPLES]
    det = np.linalg.det(mats)
    ok = np.abs(det) > 1e-12
    if not np.any(ok):
        return 0.0
    pts = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
    scale = max(1.0, float(np.abs(offsets).max()))
    inside = np.all(pts @ normals.T <= offsets + tol * scale, axis=1)
    pts = pts[inside]
    if len(pts) < 4:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


# ---------------------------------------------------------------------------
# BEV IoU


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    c = [tuple(p) for p in np.asarray(clip, dtype=float)]
    for i in range(len(c)):
        if not out:
            break
        a, b = c[i - 1], c[i]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        s = inp[-1]
        ss = side(s)
        for e in inp:
            se = side(e)
            if se >= 0:
                if ss < 0:
                    t = ss / (ss - se)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                out.append(e)
            elif ss >= 0:
                t = ss / (ss - se)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, ss = e, se
    return np.array(out)


def bev_footprint(box: Box3D, yaw_only: bool = False) -> np.ndarray:
    """Plan-view footprint as a CCW polygon.

    By default this is the hull of all 8 projected corners, which becomes a
    hexagon once pitch or roll is non-zero.  ``yaw_only`` keeps the classic
    l x w rectangle rotated by yaw.
    """
    if yaw_only:
        flat = Box3D(box.center, box.size, (box.rotation[0], 0.0, 0.0))
        return convex_hull_2d(box_corners(flat)[:4, :2])
    return convex_hull_2d(box_corners(box)[:8, :2])


def iou_bev(a: Box3D, b: Box3D, yaw_only: bool = False) -> float:
    pa = bev_footprint(a, yaw_only)
    pb = bev_footprint(b, yaw_only)
    area_a = polygon_area(pa)
    area_b = polygon_area(pb)
    inter_poly = clip_polygon(pa, pb)
    inter = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    if inter <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / (area_a + area_b - inter))))


# ---------------------------------------------------------------------------
# AP


DEFAULT_BINS = tuple(float(x) for x in range(0, 161, 20))


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    recall_positions: int = 40
    metric_space: str = "bev"  # "bev" | "3d"
    range_bins: tuple[float, ...] = DEFAULT_BINS
    yaw_only_bev: bool = False

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")
        if self.metric_space not in ("bev", "3d"):
            raise ValueError("metric_space must be 'bev' or '3d'")
        if any(b >= c for b, c in zip(self.range_bins[:-1], self.range_bins[1:])):
            raise ValueError("range bin edges must be strictly increasing")

    def iou(self, a: Box3D, b: Box3D) -> float:
        if self.metric_space == "3d":
            return iou_3d(a, b)
        return iou_bev(a, b, self.yaw_only_bev)


@dataclass(frozen=True, eq=False)
class Prediction:
    frame_id: str
    cls: str
    confidence: float
    box: Box3D
    gt_index: int | None = None


@dataclass(frozen=True, eq=False)
class GTFrame:
    frame_id: str
    camera_center: np.ndarray
    boxes: tuple[Box3D, ...]
    classes: tuple[str, ...]


def gt_frames_from(frames) -> list[GTFrame]:
    """Adapt :class:`roadlift.codec.Frame` objects."""
    return [
        GTFrame(
            f.frame_id,
            f.camera.center,
            tuple(o.box3d for o in f.objects),
            tuple(o.cls for o in f.objects),
        )
        for f in frames
    ]


def interpolated_ap(tp_flags, n_gt: int, recall_positions: int = 40) -> float:
    """AP from match flags of detections sorted by descending confidence.

    Precision is sampled at recall k / N for k = 1..N, using the maximum
    precision at any recall >= the sample point (0 if none).  Arithmetic is
    done in exact rationals.
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = fp = 0
    recalls, precisions = [], []
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        recalls.append(Fraction(tp, n_gt))
        precisions.append(Fraction(tp, tp + fp))
    # suffix maxima give the interpolated precision envelope
    env = precisions[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    total = Fraction(0)
    j = 0
    for k in range(1, recall_positions + 1):
        r = Fraction(k, recall_positions)
        while j < len(recalls) and recalls[j] < r:
            j += 1
        if j < len(recalls):
            total += env[j]
    return float(total / recall_positions)


def _range_bin(edges, r: float) -> int | None:
    i = bisect_right(edges, r) - 1
    if i < 0 or i >= len(edges) - 1:
        return None
    return i


@dataclass
class EvalReport:
    ap: dict[str, float | None]
    mean_ap: float | None
    pooled_ap: float | None
    bin_edges: tuple[float, ...]
    bin_mean_iou: list[float | None]
    bin_counts: list[dict[str, int]]
    totals: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "mean_ap": self.mean_ap,
            "pooled_ap": self.pooled_ap,
            "bin_edges": list(self.bin_edges),
            "bin_mean_iou": self.bin_mean_iou,
            "bin_counts": self.bin_counts,
            "totals": self.totals,
        }


def match_detections(predictions, gt_frames, cfg: MatchConfig, class_aware: bool = True):
    """Greedy matching in descending confidence.

    Returns ``(order, flags, matched)`` where ``order`` lists prediction
    indices by rank, ``flags[k]`` tells whether rank ``k`` is a true positive
    and ``matched`` maps prediction index -> (frame_id, gt index).
    """
    frames = {f.frame_id: f for f in gt_frames}
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].confidence)
    taken: set[tuple[str, int]] = set()
    flags, matched = [], {}
    for i in order:
        p = predictions[i]
        frame = frames.get(p.frame_id)
        best, best_iou = -1, -1.0
        if frame is not None:
            for j, (g, c) in enumerate(zip(frame.boxes, frame.classes)):
                if (class_aware and c != p.cls) or (p.frame_id, j) in taken:
                    continue
                v = cfg.iou(p.box, g)
                if v >= cfg.iou_threshold and v > best_iou:
                    best, best_iou = j, v
        if best >= 0:
            taken.add((p.frame_id, best))
            matched[i] = (p.frame_id, best)
        flags.append(best >= 0)
    return order, flags, matched


def range_binned_iou(pairs, camera, bins=DEFAULT_BINS) -> list[tuple[float, float, float | None, int]]:
    """Mean 3D IoU of (gt, prediction) pairs per range bin.

    Range is the distance from the camera centre to the GT centroid.
    ``camera`` is one CameraModel (or centre) for every pair, or a sequence
    aligned with ``pairs``.  Bins are right-open; empty bins report None.
    """
    edges = tuple(bins)
    sums = [0.0] * (len(edges) - 1)
    counts = [0] * (len(edges) - 1)
    for k, (gt, pred) in enumerate(pairs):
        cam = camera[k] if isinstance(camera, (list, tuple)) else camera
        center = cam.center if isinstance(cam, CameraModel) else np.asarray(cam, float)
        b = _range_bin(edges, float(np.linalg.norm(gt.center - center)))
        if b is None:
            continue
        sums[b] += iou_3d(gt, pred)
        counts[b] += 1
    return [
        (edges[i], edges[i + 1], sums[i] / counts[i] if counts[i] else None, counts[i])
        for i in range(len(counts))
    ]


def average_precision(predictions, gt_frames, cfg: MatchConfig = MatchConfig()) -> EvalReport:
    predictions = list(predictions)
    gt_frames = list(gt_frames)
    classes = sorted({c for f in gt_frames for c in f.classes} | {p.cls for p in predictions})
    ap: dict[str, float | None] = {}
    for cls in classes:
        preds = [p for p in predictions if p.cls == cls]
        n_gt = sum(c == cls for f in gt_frames for c in f.classes)
        if n_gt == 0:
            ap[cls] = None
            continue
        _, flags, _ = match_detections(preds, gt_frames, cfg)
        ap[cls] = interpolated_ap(flags, n_gt, cfg.recall_positions)
    defined = [v for v in ap.values() if v is not None]
    mean_ap = sum(defined) / len(defined) if defined else None

    n_all = sum(len(f.boxes) for f in gt_frames)
    order, flags, matched = match_detections(predictions, gt_frames, cfg, class_aware=False)
    pooled = interpolated_ap(flags, n_all, cfg.recall_positions) if n_all else None

    # per-bin counts from the class-agnostic matching
    edges = cfg.range_bins
    nb = len(edges) - 1
    counts = [{"tp": 0, "fp": 0, "fn": 0} for _ in range(nb)]
    frames = {f.frame_id: f for f in gt_frames}
    hit = set(matched.values())
    for f in gt_frames:
        for j, g in enumerate(f.boxes):
            b = _range_bin(edges, float(np.linalg.norm(g.center - f.camera_center)))
            if b is not None:
                counts[b]["tp" if (f.frame_id, j) in hit else "fn"] += 1
    for i, p in enumerate(predictions):
        if i in matched:
            continue
        f = frames.get(p.frame_id)
        if f is None:
            continue
        b = _range_bin(edges, float(np.linalg.norm(p.box.center - f.camera_center)))
        if b is not None:
            counts[b]["fp"] += 1

    # IoU pairs: by GT identity where known, otherwise by the matching above
    pairs, centers = [], []
    for i, p in enumerate(predictions):
        f = frames.get(p.frame_id)
        if f is None:
            continue
        j = p.gt_index if p.gt_index is not None else matched.get(i, (None, None))[1]
        if j is None or j >= len(f.boxes):
            continue
        pairs.append((f.boxes[j], p.box))
        centers.append(f.camera_center)
    binned = range_binned_iou(pairs, centers, edges)
    totals = {k: sum(c[k] for c in counts) for k in ("tp", "fp", "fn")}
    return EvalReport(ap, mean_ap, pooled, tuple(edges), [m for *_, m, _ in binned], counts, totals)


# ---------------------------------------------------------------------------
# report rendering

ROWS = ("Full model", "No driving centerlines", "Keypoints at bottom")
COLUMNS = ("Nominal", "STD 10cm", "STD 40cm")


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.3f}%"


def format_grid(
    grid: dict[tuple[str, str], EvalReport], key: str = "pooled_ap", title: str = "", full: bool = False
) -> str:
    """Text table with setups as rows and map-noise levels as columns.

    ``full`` keeps every noise column even when it has no entries.
    """
    rows = [r for r in ROWS if any((r, c) in grid for c in COLUMNS)]
    cols = list(COLUMNS) if full else [c for c in COLUMNS if any((r, c) in grid for r in ROWS)]
    head = ["Setup"] + cols
    body = [[r] + [_pct(getattr(grid[(r, c)], key)) if (r, c) in grid else "-" for c in cols] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines = [title] if title else []
    lines.append(sep)
    lines.append("| " + " | ".join(h.ljust(w) for h, w in zip(head, widths)) + " |")
    lines.append(sep)
    for row in body:
        lines.append("| " + row[0].ljust(widths[0]) + " | " + " | ".join(v.rjust(w) for v, w in zip(row[1:], widths[1:])) + " |")
    lines.append(sep)
    return "\n".join(lines) + "\n"


def grid_csv(grid: dict[tuple[str, str], EvalReport]) -> str:
    lines = ["setup,noise,class,ap"]
    for (row, col), rep in grid.items():
        for cls in sorted(rep.ap):
            v = rep.ap[cls]
            lines.append(f"{row},{col},{cls},{'' if v is None else repr(v)}")
        lines.append(f"{row},{col},mean,{'' if rep.mean_ap is None else repr(rep.mean_ap)}")
        lines.append(f"{row},{col},all,{'' if rep.pooled_ap is None else repr(rep.pooled_ap)}")
    return "\n".join(lines) + "\n"


def bins_csv(grid: dict[tuple[str, str], EvalReport]) -> str:
    lines = ["setup,noise,bin_lo,bin_hi,mean_iou,tp,fp,fn"]
    for (row, col), rep in grid.items():
        for i, m in enumerate(rep.bin_mean_iou):
            c = rep.bin_counts[i]
            lo, hi = rep.bin_edges[i], rep.bin_edges[i + 1]
            lines.append(f"{row},{col},{lo:g},{hi:g},{'' if m is None else repr(m)},{c['tp']},{c['fp']},{c['fn']}")
    return "\n".join(lines) + "\n"


def bins_svg(series: dict[str, EvalReport], title: str = "Mean 3D IoU by range") -> str:
    """Line plot of per-bin mean IoU, one polyline per series."""
    colors = ["#2ca02c", "#ff7f0e", "#d62728", "#1f77b4", "#9467bd"]
    w, h, m = 480, 300, 40
    any_rep = next(iter(series.values()))
    edges = any_rep.bin_edges
    lo, hi = edges[0], edges[-1]

    def sx(x):
        return m + (x - lo) / (hi - lo) * (w - 2 * m)

    def sy(y):
        return h - m - y * (h - 2 * m)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
    ]
    for e in edges:
        out.append(f'<text x="{sx(e):.1f}" y="{h - m + 14}" text-anchor="middle" font-size="10">{e:g}</text>')
    for k, (name, rep) in enumerate(series.items()):
        pts = [
            f"{sx(0.5 * (edges[i] + edges[i + 1])):.2f},{sy(v):.2f}"
            for i, v in enumerate(rep.bin_mean_iou)
            if v is not None
        ]
        col = colors[k % len(colors)]
        if pts:
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{" ".join(pts)}"/>')
        out.append(f'<text x="{w - m}" y="{m + 14 * k}" text-anchor="end" font-size="11" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
