import numpy as np

from roadlift import net
from roadlift.codec import NoiseSpec, oracle_descriptor
from roadlift.metrics import COLUMNS, ROWS, MatchConfig
from roadlift.pipeline import DescriptorConfig, describe, evaluate, lift_frame, run_ablation, run_pipeline


def test_perfect_pipeline_flat(flat_bench):
    scenes = flat_bench.scenes[:20]
    rep = evaluate(scenes, run_pipeline(scenes, DescriptorConfig("perfect")))
    assert rep.pooled_ap == 1.0 and rep.ap["car"] == 1.0
    assert rep.totals["fp"] == 0 and rep.totals["fn"] == 0
    assert all(m is None or m > 0.99 for m in rep.bin_mean_iou)


def test_ablation_grid_shape_and_nominal_column(small_bench):
    scenes = small_bench.scenes[:10]
    desc = DescriptorConfig("noisy", NoiseSpec(0.02, 0.02, 0.02, seed=3))
    grid = run_ablation(scenes, desc, seed=1)
    assert set(grid) == {(r, c) for r in ROWS for c in COLUMNS}
    plain = evaluate(scenes, run_pipeline(scenes, desc))
    assert grid[(ROWS[0], COLUMNS[0])].to_dict() == plain.to_dict()
    # with an oracle descriptor the lane channel is never consulted and the
    # bottom-only vector feeds identical lifting inputs
    for col in COLUMNS:
        ref = grid[(ROWS[0], col)].to_dict()
        assert grid[(ROWS[1], col)].to_dict() == ref
        assert grid[(ROWS[2], col)].to_dict() == ref


def test_file_mode_filters_by_frame(small_bench):
    a, b = small_bench.scenes[:2]
    dets = tuple(oracle_descriptor(a.frame) + oracle_descriptor(b.frame))
    got = describe(b, DescriptorConfig("file", detections=dets))
    assert [d.frame_id for d in got] == [b.frame.frame_id] * len(b.objects)


def test_net_mode_end_to_end(small_bench):
    scene = small_bench.scenes[0]
    w = net.WeightBundle.random(0)
    dets = describe(scene, DescriptorConfig("net", weights=w))
    assert len(dets) == len(scene.objects)
    assert all(d.values.shape == (22,) and np.all(np.isfinite(d.values)) for d in dets)
    zero = describe(scene, DescriptorConfig("net", weights=w), zero_lanes=True)
    assert any(not np.array_equal(a.values, b.values) for a, b in zip(dets, zero))
    small = describe(scene, DescriptorConfig("net", weights=net.WeightBundle.random(0, net.BOTTOM_ONLY_SPEC)))
    assert all(d.values.shape == (9,) for d in small)
    # untrained outputs rarely lift; failures are reported, never raised
    res = lift_frame(scene, dets)
    assert len(res.predictions) + len(res.failures) == len(dets)


def test_3d_metric_space(flat_bench):
    scenes = flat_bench.scenes[:5]
    res = run_pipeline(scenes, DescriptorConfig("perfect"))
    assert evaluate(scenes, res, MatchConfig(metric_space="3d")).pooled_ap == 1.0
