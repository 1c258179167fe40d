"""Command-line entry point: ``splatparse <command> ...``.

Exit codes: 0 success, 2 invalid manifest or inputs, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import amodal, io, pipeline, synth
from ._accel import set_num_threads
from .camera import CameraPose
from .raster import render

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3
log = logging.getLogger("splatparse")


def _kv(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, val = text.split("=", 1)
    return key.strip(), pipeline._parse_value(val)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default: manifest value)")
    p.add_argument("--threads", type=int, default=None, help="kernel worker threads")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _stage_args(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--manifest", type=Path, help="manifest JSON; its stage list is ignored")
    p.add_argument("--scene", type=Path, help="input 3DGS PLY")
    p.add_argument("--preset", help="synthetic layout preset used when no scene is given")
    p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="manifest override, e.g. config.regen.t=0.25 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatparse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedural labelled scene")
    _common(p)
    p.add_argument("--preset", default="three_objects")
    p.add_argument("--layout", type=Path, help="layout JSON instead of a preset")
    p.add_argument("--param", type=_kv, action="append", default=[], metavar="KEY=VALUE")

    for name in pipeline.STAGES:
        _stage_args(sub.add_parser(name, help=f"run the {name} stage"))

    p = sub.add_parser("run", help="run every stage listed in a manifest")
    _stage_args(p)

    p = sub.add_parser("eval-miou", help="mean IoU between predicted and ground-truth mask PNGs")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)

    p = sub.add_parser("render", help="render a PLY from one camera")
    _common(p)
    p.add_argument("scene", type=Path)
    p.add_argument("--azimuth", type=float, default=45.0, help="degrees")
    p.add_argument("--elevation", type=float, default=30.0, help="degrees")
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("W", "H"))
    p.add_argument("--projection", choices=("orthographic", "perspective"), default="orthographic")
    p.add_argument("--fov", type=float, default=50.0, help="vertical field of view in degrees")
    p.add_argument("--ortho-half-height", type=float, default=None, help="default: 0.75 x radius")
    p.add_argument("--look-at", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    return ap


def _cmd_synth(args) -> int:
    if args.layout is not None:
        layout = io.read_json(args.layout)
    else:
        layout = synth.preset_layout(args.preset, **dict(args.param))
    seed = 0 if args.seed is None else args.seed
    scene = synth.synth_scene(layout, pipeline.stage_rng(seed, "synth"))
    out = args.out or Path("out")
    io.write_ply(out / "scene.ply", scene)
    io.write_json(out / "layout.json", layout)
    print(json.dumps({"scene": str(out / "scene.ply"), "n_gaussians": len(scene),
                      "labels": [int(x) for x in scene.labels()]}))
    return EXIT_OK


def _stage_manifest(args, stages: list[str] | None) -> dict:
    overrides = dict(args.overrides)
    if stages is not None:
        overrides["stages"] = stages
    if args.scene is not None:
        overrides["scene"] = str(args.scene)
    if args.preset is not None:
        overrides["synth"] = {"preset": args.preset}
    for key in ("seed", "threads", "out"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = str(val) if key == "out" else val
    return pipeline.load_manifest(args.manifest, overrides=overrides)


def _cmd_stages(args) -> int:
    stages = None if args.command == "run" else [args.command]
    manifest = _stage_manifest(args, stages)
    reports = pipeline.run_pipeline(manifest)
    print(json.dumps(reports, sort_keys=True, default=str))
    return EXIT_OK


def _read_masks(folder: Path) -> dict[str, np.ndarray]:
    if not folder.is_dir():
        raise FileNotFoundError(f"mask folder not found: {folder}")
    return {p.name: io.read_png(p) > 127 for p in sorted(folder.glob("*.png"))}


def _cmd_miou(args) -> int:
    pred, gt = _read_masks(args.pred), _read_masks(args.gt)
    if set(pred) != set(gt):
        raise ValueError(f"mask names differ: {sorted(set(pred) ^ set(gt))}")
    names = sorted(gt)
    result = {"mIoU": amodal.amodal_miou([pred[n] for n in names], [gt[n] for n in names]),
              "per_mask": {n: amodal.mask_iou(pred[n], gt[n]) for n in names}}
    if args.out is not None:
        io.write_json(args.out / "miou.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _cmd_render(args) -> int:
    scene = io.read_ply(args.scene)
    cam = CameraPose(args.projection, args.radius, math.radians(args.azimuth), math.radians(args.elevation),
                     tuple(args.look_at), tuple(args.size), fov_y=math.radians(args.fov),
                     ortho_half_height=0.75 * args.radius if args.ortho_half_height is None else args.ortho_half_height)
    out = render(scene, cam, ("color", "alpha", "depth", "instance"))
    d = args.out or Path("out")
    io.write_png(d / "color.png", out.color)
    io.write_png(d / "alpha.png", out.alpha)
    io.write_depth_png(d / "depth.png", out.depth)
    io.write_label_png(d / "instance.png", out.instance_map)
    io.write_json(d / "camera.json", cam.to_dict())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        set_num_threads(args.threads)
    handlers = {"synth": _cmd_synth, "eval-miou": _cmd_miou, "render": _cmd_render}
    try:
        return handlers.get(args.command, _cmd_stages)(args)
    except pipeline.StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
