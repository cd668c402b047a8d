"""``roadlift`` command line: generate, lift, eval, ablate, inspect-net, render.

Every subcommand accepts ``--config FILE`` (JSON object keyed by option
name, dashes or underscores); explicit flags override the file.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, net, synth
from .codec import FormatError, NoiseSpec, load_detections
from .geometry import EDGES, GeometryError, box_corners, project
from .lifting import LiftError, dumps_lifted, lift_record, load_lifted, record_box
from .pipeline import NOISE_LEVELS, DescriptorConfig, describe, run_ablation
from .tin import ElevationOnly, TinError, VertexPerturbed, with_noise

log = logging.getLogger("roadlift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _descriptor(args) -> DescriptorConfig:
    mode = args.descriptor
    if mode == "noisy":
        noise = NoiseSpec(args.sigma_kp, args.sigma_dim, args.sigma_alpha, args.rho, args.seed)
        return DescriptorConfig("noisy", noise)
    if mode == "net":
        if not args.weights:
            raise UsageError("--descriptor net requires --weights")
        spec = net.BOTTOM_ONLY_SPEC if args.bottom_only else net.DEFAULT_SPEC
        return DescriptorConfig("net", weights=net.load_weights(args.weights, spec))
    if mode == "file":
        if not args.detections:
            raise UsageError("--descriptor file requires --detections")
        return DescriptorConfig("file", detections=tuple(load_detections(args.detections)))
    return DescriptorConfig("perfect")


def _map_for(scene, args):
    if args.map_noise <= 0:
        return scene.tin
    if args.map_noise_mode == "vertex":
        return with_noise(scene.tin, VertexPerturbed(args.map_noise, args.seed))
    return with_noise(scene.tin, ElevationOnly(args.map_noise, args.seed))


def _ordered_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def _match_cfg(args) -> metrics.MatchConfig:
    edges = tuple(float(x) for x in np.arange(0.0, args.max_range + 1e-9, args.bin_width))
    return metrics.MatchConfig(args.iou, args.recall_positions, args.metric, edges, args.yaw_only_bev)


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    bench = synth.benchmark(args.seed, args.profile, args.scenes_per_pose, args.vehicles_per_scene)
    parent = out.parent if str(out.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=parent, prefix=f".{out.name}."))
    try:
        synth.write_dataset(bench, tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    print(f"wrote {len(bench.scenes)} scenes, {bench.vehicle_count()} vehicles to {out}")
    return EXIT_OK


def cmd_lift(args) -> int:
    scenes = synth.load_dataset(args.dataset)
    desc = _descriptor(args)

    def work(scene):
        dets = describe(scene, desc, args.no_centerlines, args.bottom_only)
        tin = _map_for(scene, args)
        return [lift_record(d, scene.frame.camera, tin) for d in dets]

    records = [r for batch in _ordered_map(work, scenes, args.workers) for r in batch]
    atomic_write(args.out, dumps_lifted(records))
    failed = sum(r["status"] != "ok" for r in records)
    print(f"lifted {len(records) - failed} of {len(records)} detections -> {args.out}")
    return EXIT_OK


def _self_check(root) -> list[str]:
    problems = []
    for scene in synth.load_dataset(root):
        cam = scene.frame.camera
        for i, gt in enumerate(scene.frame.objects):
            tag = f"{scene.frame.frame_id}/{i}"
            corners = box_corners(gt.box3d)
            if np.any(cam.to_camera(corners)[:, 2] <= 0):
                problems.append(f"{tag}: box extends behind the camera")
                continue
            b = gt.box2d
            if b.u_min < 0 or b.v_min < 0 or b.u_max > cam.image_width or b.v_max > cam.image_height:
                problems.append(f"{tag}: 2D box outside the image")
            if not all(scene.tin.covers(*corners[k, :2]) for k in range(4)):
                problems.append(f"{tag}: base outside map coverage")
    return problems


def cmd_eval(args) -> int:
    if args.self_check:
        problems = _self_check(args.dataset)
        for p in problems:
            print(p)
        print("self-check: " + ("FAIL" if problems else "ok"))
        return EXIT_DATA if problems else EXIT_OK
    if not args.lifted or not args.out:
        raise UsageError("eval needs --lifted and --out (or --self-check)")
    scenes = synth.load_dataset(args.dataset)
    records = load_lifted(args.lifted)
    preds = []
    for rec in records:
        box = record_box(rec)
        if box is not None:
            preds.append(metrics.Prediction(rec["frame"], rec["class"], rec["confidence"], box, rec.get("gt_index")))
    gts = metrics.gt_frames_from([s.frame for s in scenes])
    report = metrics.average_precision(preds, gts, _match_cfg(args))
    grid = {(args.setup, args.column): report}
    out = Path(args.out)
    atomic_write(out / "report.csv", metrics.grid_csv(grid))
    atomic_write(out / "bins.csv", metrics.bins_csv(grid))
    text = metrics.format_grid(grid, "pooled_ap", "AP (BEV) for all vehicles", full=True)
    text += metrics.format_grid(grid, "mean_ap", "AP (BEV) averaged over classes", full=True)
    atomic_write(out / "report.txt", text)
    atomic_write(out / "report.json", json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.svg:
        atomic_write(out / "bins.svg", metrics.bins_svg({args.column: report}))
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.dataset:
        scenes = synth.load_dataset(args.dataset)
    else:
        scenes = list(synth.benchmark(args.seed, args.profile, args.scenes_per_pose, args.vehicles_per_scene).scenes)
    desc = _descriptor(args)
    sigmas = tuple(args.sigmas) if args.sigmas else NOISE_LEVELS
    grid = run_ablation(scenes, desc, args.seed, sigmas, _match_cfg(args))
    out = Path(args.out)
    text = metrics.format_grid(grid, "pooled_ap", "AP (BEV) for all vehicles")
    text += metrics.format_grid(grid, "mean_ap", "AP (BEV) averaged over classes")
    atomic_write(out / "grid.txt", text)
    atomic_write(out / "grid.csv", metrics.grid_csv(grid))
    atomic_write(out / "bins.csv", metrics.bins_csv(grid))
    for k, row in enumerate(metrics.ROWS):
        series = {col: grid[(row, col)] for col in metrics.COLUMNS if (row, col) in grid}
        if series:
            atomic_write(out / f"bins_{k}.svg", metrics.bins_svg(series, f"Mean 3D IoU by range: {row}"))
    print(text, end="")
    return EXIT_OK


def cmd_inspect_net(args) -> int:
    spec = net.BOTTOM_ONLY_SPEC if args.bottom_only else net.DEFAULT_SPEC
    if args.weights:
        bundle = net.load_weights(args.weights, spec)
    else:
        bundle = net.WeightBundle.zeros(spec)
    rows = net.parameter_table(spec)
    lines = [f"{'layer':<8} {'weight shape':<20} {'params':>10}"]
    conv = fc = 0
    for name, shape, count in rows:
        lines.append(f"{name:<8} {'x'.join(map(str, shape)):<20} {count:>10,}")
        if name.startswith("conv"):
            conv += count
        else:
            fc += count
    total = net.parameter_count(spec)
    size = len(net.dumps_weights(bundle))
    lines.append(f"{'conv':<29} {conv:>10,}")
    lines.append(f"{'fc':<29} {fc:>10,}")
    lines.append(f"{'total':<29} {total:>10,}")
    lines.append(f"serialized float32 bundle: {size:,} bytes ({size / 2**20:.3f} MiB)")
    if args.save_random:
        b = net.WeightBundle.random(args.seed, spec)
        atomic_write(args.save_random, net.dumps_weights(b))
        lines.append(f"wrote random weights (seed {args.seed}) to {args.save_random}")
    print("\n".join(lines))
    return EXIT_OK


def _svg_wireframe(camera, box, color, scale) -> list[str]:
    try:
        uv = project(camera, box_corners(box)) * scale
    except GeometryError:
        return []
    return [
        f'<line x1="{uv[a, 0]:.2f}" y1="{uv[a, 1]:.2f}" x2="{uv[b, 0]:.2f}" y2="{uv[b, 1]:.2f}" '
        f'stroke="{color}" stroke-width="1"/>'
        for a, b in EDGES
    ]


def render_frame_svg(frame, predictions, scale: float = 0.5) -> str:
    cam = frame.camera
    w, h = cam.image_width * scale, cam.image_height * scale
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:g}" height="{h:g}" viewBox="0 0 {w:g} {h:g}">',
        f'<rect x="0" y="0" width="{w:g}" height="{h:g}" fill="white" stroke="black"/>',
    ]
    for gt in frame.objects:
        out += _svg_wireframe(cam, gt.box3d, "green", scale)
    for box in predictions:
        out += _svg_wireframe(cam, box, "red", scale)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_render(args) -> int:
    scenes = synth.load_dataset(args.dataset)
    by_frame: dict[str, list] = {}
    if args.lifted:
        for rec in load_lifted(args.lifted):
            box = record_box(rec)
            if box is not None:
                by_frame.setdefault(rec["frame"], []).append(box)
    out = Path(args.out)
    for s in scenes:
        fid = s.frame.frame_id
        atomic_write(out / f"{fid}.svg", render_frame_svg(s.frame, by_frame.get(fid, []), args.scale))
    print(f"rendered {len(scenes)} frames to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_descriptor_opts(p):
    p.add_argument("--descriptor", choices=("perfect", "noisy", "file", "net"), default="perfect")
    p.add_argument("--detections", help="detections file for --descriptor file")
    p.add_argument("--weights", help="weight bundle for --descriptor net")
    p.add_argument("--sigma-kp", type=float, default=0.02)
    p.add_argument("--sigma-dim", type=float, default=0.02)
    p.add_argument("--sigma-alpha", type=float, default=0.02)
    p.add_argument("--rho", type=float, default=5.0)


def _add_eval_opts(p):
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--recall-positions", type=int, default=40)
    p.add_argument("--metric", choices=("bev", "3d"), default="bev")
    p.add_argument("--bin-width", type=float, default=20.0)
    p.add_argument("--max-range", type=float, default=160.0)
    p.add_argument("--yaw-only-bev", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadlift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, "write the synthetic benchmark to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=synth.PROFILE_CYCLE)
    p.add_argument("--scenes-per-pose", type=int, default=10)
    p.add_argument("--vehicles-per-scene", type=int, default=10)
    p.add_argument("--force", action="store_true", help="replace an existing output directory")

    p = add("lift", cmd_lift, "lift detections to 3D boxes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_descriptor_opts(p)
    p.add_argument("--map-noise", type=float, default=0.0, help="elevation noise sigma in metres")
    p.add_argument("--map-noise-mode", choices=("elevation", "vertex"), default="elevation")
    p.add_argument("--no-centerlines", action="store_true")
    p.add_argument("--bottom-only", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = add("eval", cmd_eval, "evaluate lifted boxes against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lifted")
    p.add_argument("--out")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--self-check", action="store_true")
    p.add_argument("--setup", choices=metrics.ROWS, default=metrics.ROWS[0])
    p.add_argument("--column", choices=metrics.COLUMNS, default=metrics.COLUMNS[0])
    _add_eval_opts(p)

    p = add("ablate", cmd_ablate, "run the map-noise / lane / bottom-only ablation grid")
    p.add_argument("--dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=synth.PROFILE_CYCLE)
    p.add_argument("--scenes-per-pose", type=int, default=10)
    p.add_argument("--vehicles-per-scene", type=int, default=10)
    p.add_argument("--sigmas", type=float, nargs=3, metavar=("NOMINAL", "LOW", "HIGH"))
    p.add_argument("--bottom-only", action="store_true", help=argparse.SUPPRESS)
    _add_descriptor_opts(p)
    _add_eval_opts(p)
    p.set_defaults(descriptor="noisy")

    p = add("inspect-net", cmd_inspect_net, "print the descriptor network layer table")
    p.add_argument("--weights")
    p.add_argument("--bottom-only", action="store_true", help="9-output variant")
    p.add_argument("--save-random", metavar="PATH", help="also write a seeded random bundle")

    p = add("render", cmd_render, "SVG overlays: ground truth green, predictions red")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lifted")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=0.5)
    return parser


def _peek(argv):
    """Subcommand name and --config value, found before full parsing."""
    command = config = None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def _apply_config(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _peek(argv)
    choices = parser._subparsers._group_actions[0].choices
    if config and command in choices:
        try:
            cfg = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sub = choices[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in cfg.items():
            dest = k.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise UsageError(f"unknown config key {k!r} for {command}")
            defaults[dest] = v
            # required options may come from the config file
            actions[dest].required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except SystemExit as exc:
        # argparse exits on usage errors and --help; report the code instead
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"roadlift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        FormatError,
        LiftError,
        TinError,
        GeometryError,
        net.NetError,
        synth.InfeasibleSpec,
        ValueError,
        KeyError,
        OSError,
    ) as exc:
        print(f"roadlift: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"roadlift: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
