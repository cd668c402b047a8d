import math

import numpy as np
import pytest
from oracles import mc_iou_3d, random_overlapping_pair, raster_iou_bev

from roadlift.geometry import Box3D, euler_to_matrix
from roadlift.metrics import (
    COLUMNS,
    ROWS,
    GTFrame,
    MatchConfig,
    Prediction,
    average_precision,
    bins_csv,
    bins_svg,
    clip_polygon,
    convex_hull_2d,
    format_grid,
    grid_csv,
    interpolated_ap,
    iou_3d,
    iou_bev,
    match_detections,
    polygon_area,
    range_binned_iou,
)


def cube(c, size=(1, 1, 1), rot=(0, 0, 0)):
    return Box3D(c, size, rot)


def test_identical_and_disjoint():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, _ = random_overlapping_pair(rng)
        assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-9)
        assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-9)
        far = Box3D(np.asarray(a.center) + 50, a.size, a.rotation)
        assert iou_3d(a, far) == 0.0
        assert iou_bev(a, far) == 0.0


def test_unit_cubes_half_offset():
    assert iou_3d(cube((0, 0, 0)), cube((0.5, 0, 0))) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_3d(cube((0, 0, 0)), cube((0, 0, 0.5))) == pytest.approx(1 / 3, abs=1e-12)


def test_bev_rectangles_offset_along_length():
    a = Box3D((0, 0, 0), (2, 4, 1), (0, 0, 0))
    b = Box3D((1, 0, 0), (2, 4, 1), (0, 0, 0))
    assert iou_bev(a, b) == pytest.approx(0.6, abs=1e-12)


def test_bev_touching_and_vertical_offset():
    a = Box3D((0, 0, 0), (2, 4, 1), (0.3, 0, 0))
    assert iou_bev(a, Box3D((0, 0, 10), (2, 4, 1), (0.3, 0, 0))) == pytest.approx(1.0)
    assert iou_3d(a, Box3D((0, 0, 10), (2, 4, 1), (0.3, 0, 0))) == 0.0


def test_yaw_only_3d_equals_bev():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, z = rng.uniform(0.5, 3), rng.uniform(-1, 1)
        a = Box3D((*rng.uniform(-2, 2, 2), z), (*rng.uniform(1, 4, 2), h), (rng.uniform(-3, 3), 0, 0))
        b = Box3D((*rng.uniform(-2, 2, 2), z), (*rng.uniform(1, 4, 2), h), (rng.uniform(-3, 3), 0, 0))
        assert iou_3d(a, b) == pytest.approx(iou_bev(a, b), abs=1e-9)


def test_symmetry_range_and_rigid_invariance():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_overlapping_pair(rng)
        v = iou_3d(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou_3d(b, a), abs=1e-9)
        assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-9)
        r = euler_to_matrix(*rng.uniform(-math.pi, math.pi, 3))
        t = rng.uniform(-100, 100, 3)
        assert iou_3d(a.transformed(r, t), b.transformed(r, t)) == pytest.approx(v, abs=1e-9)
        rh = euler_to_matrix(rng.uniform(-math.pi, math.pi), 0, 0)
        assert iou_bev(a.transformed(rh, t), b.transformed(rh, t)) == pytest.approx(iou_bev(a, b), abs=1e-9)


def test_iou_3d_against_monte_carlo():
    rng = np.random.default_rng(3)
    for k in range(20):
        a, b = random_overlapping_pair(rng)
        exact = iou_3d(a, b)
        est, se = mc_iou_3d(a, b, 200_000, seed=k)
        assert abs(exact - est) <= max(4 * se, 1e-3)


def test_iou_bev_against_raster():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_overlapping_pair(rng, tilt=0.4)
        assert abs(iou_bev(a, b) - raster_iou_bev(a, b)) <= 0.005


def test_tilted_footprint_is_hexagon():
    from roadlift.metrics import bev_footprint

    box = Box3D((0, 0, 0), (2, 4, 2), (0.3, 0.2, 0.1))
    assert len(bev_footprint(box)) == 6
    assert len(bev_footprint(box, yaw_only=True)) == 4


def test_polygon_helpers():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    assert polygon_area(sq) == pytest.approx(4.0)
    assert polygon_area(sq[::-1]) == pytest.approx(-4.0)
    hull = convex_hull_2d(np.vstack([sq, [[1, 1], [0.5, 1.5]]]))
    assert len(hull) == 4
    tri = np.array([[1, 1], [3, 1], [1, 3]], float)
    # x, y >= 1 and x + y <= 4 inside [0, 2]^2 leaves the square [1, 2]^2
    assert polygon_area(clip_polygon(tri, sq)) == pytest.approx(1.0)


def _frames(n_gt):
    boxes = tuple(Box3D((30.0 + 10 * j, 0.0, 1.0), (2, 4, 1.5), (0, 0, 0)) for j in range(n_gt))
    return [GTFrame("f0", np.zeros(3), boxes, ("car",) * n_gt)]


def test_ap_hand_case():
    # ranks: TP 0.9, FP 0.8, TP 0.7 against 2 GT
    # recall 1/2 @ precision 1, recall 1 @ precision 2/3
    # positions 1..20 see 1.0, 21..40 see 2/3: (20 + 20 * 2/3) / 40 = 5/6
    gts = _frames(2)
    g0, g1 = gts[0].boxes
    preds = [
        Prediction("f0", "car", 0.9, g0),
        Prediction("f0", "car", 0.8, Box3D((200.0, 50.0, 1.0), (2, 4, 1.5), (0, 0, 0))),
        Prediction("f0", "car", 0.7, g1),
    ]
    rep = average_precision(preds, gts)
    assert rep.ap["car"] == 5 / 6
    assert rep.pooled_ap == 5 / 6
    assert interpolated_ap([True, False, True], 2, 40) == 5 / 6


def test_ap_perfect_and_empty():
    gts = _frames(3)
    perfect = [Prediction("f0", "car", 1.0, b) for b in gts[0].boxes]
    assert average_precision(perfect, gts).ap["car"] == 1.0
    miss = [Prediction("f0", "car", 1.0, Box3D((0.0, 90.0, 1.0), (2, 4, 1.5), (0, 0, 0)))]
    assert average_precision(miss, _frames(1)).ap["car"] == 0.0
    assert average_precision([], _frames(1)).ap["car"] == 0.0


def test_ap_absent_without_ground_truth():
    gts = _frames(1)
    extra = Prediction("f0", "truck", 0.5, gts[0].boxes[0])
    rep = average_precision([Prediction("f0", "car", 1.0, gts[0].boxes[0]), extra], gts)
    assert rep.ap["truck"] is None
    assert rep.mean_ap == 1.0


def test_ap_invariant_to_monotone_confidence_transform():
    rng = np.random.default_rng(5)
    gts = _frames(6)
    preds = []
    for b in gts[0].boxes:
        shift = rng.uniform(0, 3)
        preds.append(Prediction("f0", "car", float(rng.uniform(0.05, 1)), Box3D(b.center + np.array([shift, 0, 0]), b.size, b.rotation)))
    base = average_precision(preds, gts).ap["car"]
    moved = [Prediction(p.frame_id, p.cls, p.confidence**3 * 0.5, p.box) for p in preds]
    assert average_precision(moved, gts).ap["car"] == base


def test_matching_ties_lowest_gt_index():
    box = Box3D((30.0, 0.0, 1.0), (2, 4, 1.5), (0, 0, 0))
    gts = [GTFrame("f0", np.zeros(3), (box, box), ("car", "car"))]
    _, flags, matched = match_detections([Prediction("f0", "car", 1.0, box)], gts, MatchConfig())
    assert flags == [True] and matched[0] == ("f0", 0)


def test_range_bins_examples():
    gt = Box3D((58.0, 0.0, 0.0), (2, 4, 1.5), (0, 0, 0))
    pred = Box3D((58.0 + 4 * 0.3 / 1.7, 0.0, 0.0), (2, 4, 1.5), (0, 0, 0))
    v = iou_3d(gt, pred)
    rows = range_binned_iou([(gt, pred)], np.zeros(3))
    assert rows[2][:2] == (40.0, 60.0)
    assert rows[2][2] == v and rows[2][3] == 1
    assert all(r[2] is None for i, r in enumerate(rows) if i != 2)
    edge = Box3D((60.0, 0.0, 0.0), (2, 4, 1.5), (0, 0, 0))
    rows = range_binned_iou([(edge, edge)], np.zeros(3))
    assert rows[3][3] == 1 and rows[2][3] == 0


def test_report_bins_brute_force(flat_bench):
    from roadlift.codec import NoiseSpec
    from roadlift.pipeline import DescriptorConfig, evaluate, run_pipeline

    scenes = flat_bench.scenes[:20]
    res = run_pipeline(scenes, DescriptorConfig("noisy", NoiseSpec(0.01, 0.01, 0.01, seed=1)))
    rep = evaluate(scenes, res)
    # independent pass: accumulate per bin in plain Python floats
    edges = rep.bin_edges
    sums = {i: [] for i in range(len(edges) - 1)}
    for s, r in zip(scenes, res):
        c = s.frame.camera.center
        for p in r.predictions:
            g = s.frame.objects[p.gt_index].box3d
            d = float(np.linalg.norm(g.center - c))
            for i in range(len(edges) - 1):
                if edges[i] <= d < edges[i + 1]:
                    sums[i].append(iou_3d(g, p.box))
    for i, vals in sums.items():
        if vals:
            acc = 0.0
            for v in vals:
                acc += v
            assert rep.bin_mean_iou[i] == acc / len(vals)
        else:
            assert rep.bin_mean_iou[i] is None
    for k in ("tp", "fp", "fn"):
        assert sum(c[k] for c in rep.bin_counts) == rep.totals[k]
    assert 0.0 <= rep.pooled_ap <= 1.0


def test_grid_rendering():
    gts = _frames(2)
    rep = average_precision([Prediction("f0", "car", 1.0, gts[0].boxes[0])], gts)
    grid = {(r, c): rep for r in ROWS for c in COLUMNS}
    text = format_grid(grid)
    for name in ROWS + COLUMNS:
        assert name in text
    assert "50.000%" in text
    assert grid_csv(grid).splitlines()[0] == "setup,noise,class,ap"
    assert len(bins_csv(grid).splitlines()) == 1 + 9 * 8
    assert bins_svg({"Nominal": rep}).startswith("<svg")


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(iou_threshold=0.0)
    with pytest.raises(ValueError):
        MatchConfig(recall_positions=0)
    with pytest.raises(ValueError):
        MatchConfig(range_bins=(0.0, 20.0, 10.0))
