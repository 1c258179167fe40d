"""Stage orchestration: manifests, per-stage artifacts, provenance, composition.

Every stage reads its inputs from the output directory and writes its own
sub-directory, so any suffix of the stage list can be re-run on its own.
Randomness comes from one manifest seed split into named sub-streams.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import amodal, io, sceneparse, seglift, synth, viewgen, voxels
from . import flow as flowmod
from ._accel import set_num_threads
from .gaussians import UNLABELED, GaussianScene
from .raster import render

log = logging.getLogger(__name__)

SCHEMA = "splatparse.manifest/1"
STAGES = ("segment", "parse", "occlude", "amodal-data", "regen", "compose")
ENV_PREFIX = "SPLATPARSE_"
# env vars with this prefix that configure the library rather than the manifest
RESERVED_ENV = {"BACKEND", "DISABLE_NUMBA"}
BOUNDARY_TOL = 0.02

DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
    "segment": {"use_labels": False, "views": "scene_front", "radius": 2.0, "image_size": [64, 64],
                "mask_dir": None, "steps": 5000, "lr": 1.0, "n_samples": 1024,
                "similarity_threshold": 0.9, "k": 16, "min_cluster_size": 20},
    "parse": {"background": "auto", "names": {}},
    "occlude": {"tau": sceneparse.OCCLUSION_TAU, "image_size": [64, 64]},
    "amodal-data": {"frames": amodal.CLIP_FRAMES, "frame_size": list(amodal.FRAME_SIZE), "format": "png",
                    "max_tries": 8},
    "regen": {"resolution": 16, "extent": 3.0, "t": 0.3, "steps": 50, "checkpoint": None, "library_size": 64,
              "train_steps": 2000, "hidden": 256, "blocks": 2, "lr": 1e-3},
    "compose": {"geometry": "parsed"},
}

# upstream stage whose outputs each stage reads
REQUIRES = {"segment": None, "parse": "segment", "occlude": "parse", "amodal-data": "occlude",
            "regen": "parse", "compose": "parse"}
DONE_MARKER = {"segment": "segment/scene.ply", "parse": "parse/objects.json",
               "occlude": "occlude/summary.json", "amodal-data": "amodal/summary.json",
               "regen": "regen/summary.json", "compose": "compose/scene.ply"}


class ManifestError(ValueError):
    """Invalid manifest or inputs (CLI exit code 2)."""


class StageError(RuntimeError):
    """A stage failed while running (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def default_manifest() -> dict:
    return {"schema": SCHEMA, "scene": None, "synth": None, "out": "out", "seed": 0, "threads": 1,
            "stages": list(STAGES), "config": copy.deepcopy(DEFAULT_CONFIG)}


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ManifestError(f"unknown manifest key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, Mapping) and key != "names":
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(manifest: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a manifest; the key must already exist."""
    parts = dotted.split(".")
    node = manifest
    for i, p in enumerate(parts[:-1]):
        if p not in node or not isinstance(node[p], dict):
            raise ManifestError(f"unknown manifest key {'.'.join(parts[:i + 1])!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ManifestError(f"unknown manifest key {dotted!r}")
    node[parts[-1]] = value


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """``SPLATPARSE_CONFIG__REGEN__T=0.25`` becomes ``{"config.regen.t": 0.25}``.

    Stage names use ``_`` for ``-`` (``AMODAL_DATA``).
    """
    environ = os.environ if environ is None else environ
    out = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key in RESERVED_ENV:
            continue
        parts = [p.lower() for p in key.split("__")]
        if len(parts) >= 2 and parts[0] == "config":
            parts[1] = parts[1].replace("_", "-")
        out[".".join(parts)] = _parse_value(environ[name])
    return out


def load_manifest(source: Mapping | str | Path | None = None, *, overrides: Mapping[str, Any] | None = None,
                  environ: Mapping[str, str] | None = None) -> dict:
    """Defaults, then the manifest file or dict, then environment, then explicit overrides."""
    m = default_manifest()
    if source is not None:
        data = source if isinstance(source, Mapping) else io.read_json(source)
        schema = data.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ManifestError(f"unsupported manifest schema {schema!r}; expected {SCHEMA!r}")
        _merge(m, data)
    for key, val in env_overrides(environ).items():
        set_key(m, key, val)
    for key, val in (overrides or {}).items():
        set_key(m, key, val)
    validate_manifest(m)
    return m


def validate_manifest(m: dict, *, check_inputs: bool = True) -> None:
    stages = m["stages"]
    if not isinstance(stages, list) or not stages:
        raise ManifestError("stages must be a non-empty list")
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ManifestError(f"unknown stages {unknown}; expected a subset of {list(STAGES)}")
    if len(set(stages)) != len(stages):
        raise ManifestError("stages repeat")
    if [s for s in STAGES if s in stages] != stages:
        raise ManifestError(f"stages out of order; the order is {list(STAGES)}")
    if not isinstance(m["seed"], int) or m["seed"] < 0:
        raise ManifestError(f"seed must be a non-negative integer, got {m['seed']!r}")
    if not isinstance(m["threads"], int) or m["threads"] < 1:
        raise ManifestError(f"threads must be a positive integer, got {m['threads']!r}")
    cfg = m["config"]
    if not 0.0 <= float(cfg["regen"]["t"]) <= 1.0:
        raise ManifestError("config.regen.t must lie in [0, 1]")
    if cfg["compose"]["geometry"] not in ("parsed", "regenerated"):
        raise ManifestError("config.compose.geometry must be 'parsed' or 'regenerated'")
    bg = cfg["parse"]["background"]
    if not (bg in ("auto", "none") or (isinstance(bg, list) and all(isinstance(b, int) for b in bg))):
        raise ManifestError("config.parse.background must be 'auto', 'none' or a list of labels")
    if "segment" in stages and m["scene"] is None and m["synth"] is None:
        raise ManifestError("manifest needs a scene path or a synth layout")
    if check_inputs and m["scene"] is not None and "segment" in stages and not Path(m["scene"]).is_file():
        raise ManifestError(f"scene file not found: {m['scene']}")
    out = Path(m["out"])
    for stage in stages:
        needed = REQUIRES[stage]
        if stage == "compose" and cfg["compose"]["geometry"] == "regenerated":
            needed = "regen"
        if needed is None or needed in stages[:stages.index(stage)]:
            continue
        if not (out / DONE_MARKER[needed]).exists():
            raise ManifestError(f"stage {stage!r} needs outputs of {needed!r}, which is neither listed "
                                f"earlier nor present in {out}")


def stage_rng(seed: int, name: str, *sub: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of the manifest seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(s) for s in sub)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Recorder:
    """Collects one stage's inputs and outputs for the provenance log."""

    def __init__(self, root: Path):
        self.root = root
        self.inputs: set[Path] = set()
        self.outputs: set[Path] = set()

    @staticmethod
    def _with_header(path: Path) -> list[Path]:
        # raw arrays and depth PNGs carry a ``name.json`` header next to them
        side = path.with_name(path.name + ".json")
        return [path, side] if side.is_file() else [path]

    def read(self, path) -> Path:
        self.inputs.update(self._with_header(Path(path)))
        return Path(path)

    def wrote(self, *paths) -> None:
        for p in paths:
            if isinstance(p, (list, tuple)):
                self.wrote(*p)
            elif p is not None:
                self.outputs.update(self._with_header(Path(p)))

    def _rel(self, p: Path) -> str:
        try:
            return p.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(p)

    def entries(self, paths) -> list[dict]:
        return [{"path": self._rel(p), "sha256": sha256_file(p)} for p in sorted(paths, key=self._rel)]


@dataclass
class StageContext:
    manifest: dict
    out: Path
    rec: _Recorder

    @property
    def seed(self) -> int:
        return self.manifest["seed"]

    def cfg(self, stage: str) -> dict:
        return self.manifest["config"][stage]


def _object_stem(oid: int) -> str:
    return f"obj_{oid:02d}"


def _ids_with_labels(scene: GaussianScene) -> list[int]:
    return [int(i) for i in scene.labels()]


# -- stages -------------------------------------------------------------------


def _ingest(ctx: StageContext) -> GaussianScene:
    m = ctx.manifest
    if m["scene"] is not None:
        return io.read_ply(ctx.rec.read(m["scene"]))
    layout = m["synth"]
    if isinstance(layout, Mapping) and "preset" in layout:
        layout = synth.preset_layout(layout["preset"], **layout.get("params", {}))
    return synth.synth_scene(layout, stage_rng(ctx.seed, "synth"))


def stage_segment(ctx: StageContext) -> dict:
    c = ctx.cfg("segment")
    scene = _ingest(ctx)
    d = ctx.out / "segment"
    ctx.rec.wrote(io.write_ply(d / "input.ply", scene))
    if c["use_labels"]:
        if not len(scene.labels()):
            raise ValueError("use_labels is set but the scene carries no instance labels")
        seg_scene, n_inst, loss = scene, len(scene.labels()), []
    else:
        grid = viewgen.scene_viewpoints(c["views"], float(c["radius"]), image_size=tuple(c["image_size"]))
        if c["mask_dir"]:
            mask_dir = Path(c["mask_dir"])
            files = sorted(mask_dir.glob("*.png"))
            if len(files) != len(grid):
                raise ValueError(f"{mask_dir} holds {len(files)} masks for {len(grid)} views")
            masks = seglift.MaskSet.from_label_maps([io.read_label_map(ctx.rec.read(f)) for f in files], grid.poses)
        else:
            masks = seglift.masks_from_instance_renders(scene, grid.poses)
        lift_cfg = seglift.LiftConfig(steps=int(c["steps"]), lr=float(c["lr"]), n_samples=int(c["n_samples"]),
                                      seed=int(stage_rng(ctx.seed, "segment").integers(2 ** 31)))
        seg = seglift.segment_scene(scene.replace(features=np.zeros_like(scene.features)), masks, lift_cfg,
                                    similarity_threshold=float(c["similarity_threshold"]), k=int(c["k"]),
                                    min_cluster_size=int(c["min_cluster_size"]))
        seg_scene, n_inst, loss = seg.scene, seg.n_instances, seg.lift.loss_history
        ctx.rec.wrote(io.write_json(d / "views.json", grid.to_dict()))
    ctx.rec.wrote(io.write_ply(d / "scene.ply", seg_scene))
    report = {"n_gaussians": len(seg_scene), "n_instances": n_inst,
              "final_loss": float(np.mean(loss[-50:])) if loss else None}
    ctx.rec.wrote(io.write_json(d / "report.json", report))
    return report


def background_labels(scene: GaussianScene, tol: float = BOUNDARY_TOL) -> list[int]:
    """Largest cluster spanning the scene's bounding box on at least two axes.

    A floor or table top reaches both faces of the scene box along two axes;
    free-standing objects touch at most one face per axis.
    """
    labels = scene.labels()
    if len(labels) < 2:
        return []
    lo, hi = scene.positions.min(axis=0), scene.positions.max(axis=0)
    slack = tol * np.maximum(hi - lo, 1e-12)
    best, best_n = None, 0
    for lab in labels:
        pts = scene.positions[scene.instance_ids == lab]
        spans = (pts.min(axis=0) <= lo + slack) & (pts.max(axis=0) >= hi - slack)
        if spans.sum() >= 2 and len(pts) > best_n:
            best, best_n = int(lab), len(pts)
    return [] if best is None else [best]


def stage_parse(ctx: StageContext) -> dict:
    c = ctx.cfg("parse")
    scene = io.read_ply(ctx.rec.read(ctx.out / "segment/scene.ply"))
    bg = c["background"]
    bg_labels = background_labels(scene) if bg == "auto" else ([] if bg == "none" else [int(b) for b in bg])
    ids = scene.instance_ids.copy()
    ids[np.isin(ids, bg_labels)] = UNLABELED
    scene = scene.replace(instance_ids=ids)
    names = {int(k): str(v) for k, v in c["names"].items()}
    objects = sceneparse.extract_objects(scene, names=names)
    d = ctx.out / "parse"
    background = scene.subset(np.flatnonzero(sceneparse.background_mask(scene)))
    ctx.rec.wrote(io.write_ply(d / "background.ply", background))
    listing = []
    for obj in objects:
        stem = _object_stem(obj.instance_id)
        ctx.rec.wrote(io.write_ply(d / f"{stem}.ply", obj.local),
                      io.write_json(d / f"{stem}.json", obj.config.to_dict()))
        listing.append({"id": obj.instance_id, "ply": f"{stem}.ply", "config": f"{stem}.json",
                        "n_gaussians": len(obj.local)})
    ctx.rec.wrote(io.write_ply(d / "scene.ply", scene))
    summary = {"objects": listing, "background_labels": bg_labels, "n_background": len(background)}
    ctx.rec.wrote(io.write_json(d / "objects.json", summary))
    return summary


def _load_objects(ctx: StageContext) -> tuple[GaussianScene, list[sceneparse.ParsedObject]]:
    d = ctx.out / "parse"
    summary = io.read_json(ctx.rec.read(d / "objects.json"))
    objs = []
    for entry in summary["objects"]:
        local = io.read_ply(ctx.rec.read(d / entry["ply"]))
        cfg = sceneparse.ObjectConfig.from_dict(io.read_json(ctx.rec.read(d / entry["config"])))
        objs.append(sceneparse.ParsedObject(int(entry["id"]), local, cfg))
    return io.read_ply(ctx.rec.read(d / "scene.ply")), objs


def stage_occlude(ctx: StageContext) -> dict:
    c = ctx.cfg("occlude")
    scene, objs = _load_objects(ctx)
    d = ctx.out / "occlude"
    summary = {}
    for obj in objs:
        stem = _object_stem(obj.instance_id)
        ring = viewgen.object_ring_for(scene.select_label(obj.instance_id), image_size=tuple(c["image_size"]))
        try:
            cands = sceneparse.select_candidates(scene, obj.instance_id, ring,
                                                 stage_rng(ctx.seed, "occlude", obj.instance_id),
                                                 tau=float(c["tau"]))
        except sceneparse.ObjectUnobservable as err:
            log.warning("%s", err)
            summary[stem] = {"unobservable": True}
            continue
        renders = sceneparse.render_candidates(scene, obj.instance_id, ring, cands)
        ctx.rec.wrote(sceneparse.export_candidates(d / stem, renders),
                      io.write_json(d / stem / "ring.json", ring.to_dict()),
                      io.write_json(d / stem / "candidates.json", cands.to_dict()))
        summary[stem] = {"unobservable": False, "views": [cd.view for cd in cands.accepted],
                         "dropped_regions": list(cands.dropped),
                         "needs_completion": [cd.needs_completion for cd in cands.accepted]}
    ctx.rec.wrote(io.write_json(d / "summary.json", summary))
    return summary


def _candidate_pairs(ctx: StageContext, scene: GaussianScene, obj_id: int):
    """Natural pairs from the full-scene render of each accepted view."""
    d = ctx.out / "occlude" / _object_stem(obj_id)
    ring = viewgen.ViewGrid.from_dict(io.read_json(ctx.rec.read(d / "ring.json")))
    cands = io.read_json(ctx.rec.read(d / "candidates.json"))
    out = []
    for entry in cands["accepted"]:
        view = int(entry["view"])
        stem = d / f"view{view:02d}"
        whole = io.read_png(ctx.rec.read(stem.with_name(stem.name + ".png"))).astype(np.float64)
        whole_mask = io.read_png(ctx.rec.read(stem.with_name(stem.name + "_whole.png"))) > 127
        visible_mask = io.read_png(ctx.rec.read(stem.with_name(stem.name + "_visible.png"))) > 127
        full = np.round(255.0 * np.clip(render(scene, ring.poses[view], "color").color, 0.0, 1.0))
        out.append((view, amodal.AmodalPair(whole, whole_mask, full, visible_mask)))
    return out


def stage_amodal(ctx: StageContext) -> dict:
    """Transition clips for natural occlusions plus synthetic ones made by
    pasting another object's candidate render over the target."""
    c = ctx.cfg("amodal-data")
    scene, objs = _load_objects(ctx)
    occl = io.read_json(ctx.rec.read(ctx.out / "occlude/summary.json"))
    observed = [o for o in objs if not occl.get(_object_stem(o.instance_id), {}).get("unobservable", True)]
    pairs = {o.instance_id: _candidate_pairs(ctx, scene, o.instance_id) for o in observed}
    d = ctx.out / "amodal"
    summary = {}
    for obj in observed:
        rng = stage_rng(ctx.seed, "amodal-data", obj.instance_id)
        stem = _object_stem(obj.instance_id)
        others = [p for oid, ps in pairs.items() if oid != obj.instance_id for _, p in ps]
        made = []
        for view, natural in pairs[obj.instance_id]:
            jobs = []
            if natural.difference_mask.any():
                jobs.append(("natural", natural))
            synth_pair = _synthetic_pair(natural, others, rng, int(c["max_tries"]))
            if synth_pair is not None:
                jobs.append(("composite", synth_pair))
            for kind, pair in jobs:
                name = f"view{view:02d}_{kind}"
                clip = amodal.make_transition_clip(pair, int(c["frames"]), tuple(c["frame_size"]))
                light = amodal.sample_lighting(rng)
                ctx.rec.wrote(amodal.export_clip(d / stem / name, clip, fmt=c["format"], pair=pair),
                              io.write_json(d / stem / name / "lighting.json", light.to_dict()))
                made.append({"clip": name, "occluded_pixels": int(pair.difference_mask.sum()),
                             "lighting": light.kind})
        summary[stem] = made
    ctx.rec.wrote(io.write_json(d / "summary.json", summary))
    return summary


def _synthetic_pair(pair: amodal.AmodalPair, occluders, rng, max_tries: int):
    if not occluders or not pair.whole_mask.any():
        return None
    h, w = pair.whole_mask.shape
    ys, xs = np.nonzero(pair.whole_mask)
    for _ in range(max_tries):
        occ = occluders[int(rng.integers(len(occluders)))]
        oy, ox = np.nonzero(occ.whole_mask)
        if len(oy) == 0:
            continue
        crop = (slice(oy.min(), oy.max() + 1), slice(ox.min(), ox.max() + 1))
        # aim the occluder's centre at a random pixel of the target
        k = int(rng.integers(len(ys)))
        ch, cw = crop[0].stop - crop[0].start, crop[1].stop - crop[1].start
        offset = (int(ys[k]) - ch // 2, int(xs[k]) - cw // 2)
        try:
            p = amodal.composite_occlusion(pair.whole_image, pair.whole_mask, occ.whole_image[crop],
                                           occ.whole_mask[crop], offset)
        except ValueError:
            continue
        if p.difference_mask.any():
            return p
    return None


def _flow_model(ctx: StageContext, latent_shape) -> tuple[flowmod.FlowModel, Path]:
    c = ctx.cfg("regen")
    d = ctx.out / "regen"
    if c["checkpoint"]:
        path = ctx.rec.read(Path(c["checkpoint"]))
        ctx.rec.read(Path(str(path) + ".json"))
        ctx.rec.read(Path(str(path) + ".arch.json"))
    else:
        lib_seed = int(stage_rng(ctx.seed, "regen-library").integers(2 ** 31))
        lib = [voxels.encode_structure(g) for g in
               voxels.primitive_library(lib_seed, int(c["library_size"]), int(c["resolution"]))]
        cfg = flowmod.FlowConfig(hidden=int(c["hidden"]), blocks=int(c["blocks"]), steps=int(c["train_steps"]),
                                 lr=float(c["lr"]), seed=int(stage_rng(ctx.seed, "regen-train").integers(2 ** 31)))
        model = flowmod.train_toy_flow(lib, cfg, log_every=500, logger=log)
        path = d / "flow.f32"
        ctx.rec.wrote(model.save(path))
    # sample from the stored float32 weights so a checkpoint reproduces the run
    model = flowmod.FlowModel.load(path)
    if model.latent_shape != tuple(latent_shape):
        raise ValueError(f"checkpoint latent shape {model.latent_shape} does not match {tuple(latent_shape)}")
    return model, path


def stage_regen(ctx: StageContext) -> dict:
    c = ctx.cfg("regen")
    _, objs = _load_objects(ctx)
    n = int(c["resolution"])
    d = ctx.out / "regen"
    d.mkdir(parents=True, exist_ok=True)
    # splat objects are surface shells; the prior should describe a solid
    priors = {o.instance_id: voxels.encode_structure(voxels.voxelize_solid(o.local, n, extent=float(c["extent"])))
              for o in objs}
    shape = next(iter(priors.values())).values.shape if priors else (n // voxels.POOL_FACTOR,) * 3 + (4,)
    model, _ = _flow_model(ctx, shape)
    summary = {}
    for obj in objs:
        stem = _object_stem(obj.instance_id)
        prior = priors[obj.instance_id]
        out = flowmod.inject_prior_sample(model, prior, float(c["t"]), int(c["steps"]),
                                          stage_rng(ctx.seed, "regen", obj.instance_id))
        grid = voxels.decode_structure(out, n)
        color = obj.local.colors.mean(axis=0) if len(obj.local) else (0.6, 0.6, 0.6)
        geom = voxels.voxels_to_gaussians(grid, color=color, label=obj.instance_id)
        ctx.rec.wrote(voxels.write_latent(d / f"{stem}_prior.f32", prior),
                      voxels.write_latent(d / f"{stem}_latent.f32", out),
                      io.write_ply(d / f"{stem}.ply", geom))
        summary[stem] = {"prior_distance": float(np.linalg.norm(out.flat() - prior.flat())),
                         "voxel_iou_with_prior": voxels.voxel_iou(grid, voxels.decode_structure(prior, n)),
                         "n_gaussians": len(geom)}
    ctx.rec.wrote(io.write_json(d / "summary.json", summary))
    return summary


def compose(objects: list[sceneparse.ParsedObject], background: GaussianScene,
            background_color=None) -> GaussianScene:
    """Background followed by each placed object, in id order."""
    parts = [background] + [o.placed() for o in sorted(objects, key=lambda o: o.instance_id)]
    bg = background.background_color if background_color is None else background_color
    return GaussianScene.concat(parts, background_color=bg)


def load_bundle(out_dir, geometry: str = "parsed", rec: _Recorder | None = None):
    """Objects and background from a parse (and optionally regen) directory."""
    out = Path(out_dir)
    rec = rec or _Recorder(out)
    ctx = StageContext({}, out, rec)
    _, objs = _load_objects(ctx)
    if geometry == "regenerated":
        swapped = []
        for o in objs:
            path = out / "regen" / f"{_object_stem(o.instance_id)}.ply"
            if not path.is_file():
                raise FileNotFoundError(f"missing regenerated object {path}")
            swapped.append(sceneparse.ParsedObject(o.instance_id, io.read_ply(rec.read(path)), o.config))
        objs = swapped
    background = io.read_ply(rec.read(out / "parse" / "background.ply"))
    return objs, background


def stage_compose(ctx: StageContext) -> dict:
    c = ctx.cfg("compose")
    objs, background = load_bundle(ctx.out, c["geometry"], ctx.rec)
    scene = compose(objs, background)
    d = ctx.out / "compose"
    ctx.rec.wrote(io.write_ply(d / "scene.ply", scene))
    report = {"geometry": c["geometry"], "n_objects": len(objs), "n_gaussians": len(scene)}
    if c["geometry"] == "parsed":
        # compare with the parsed scene, ignoring gaussian order
        parsed = io.read_ply(ctx.rec.read(ctx.out / "parse" / "scene.ply"))
        report["max_position_error"] = _max_position_error(parsed, scene)
        report["compose_check"] = bool(report["max_position_error"] <= 1e-6)
    ctx.rec.wrote(io.write_json(d / "report.json", report))
    return report


def _max_position_error(a: GaussianScene, b: GaussianScene) -> float:
    if len(a) != len(b):
        return float("inf")
    worst = 0.0
    for lab in np.union1d(a.instance_ids, b.instance_ids):
        pa = a.positions[a.instance_ids == lab]
        pb = b.positions[b.instance_ids == lab]
        if len(pa) != len(pb):
            return float("inf")
        pa = pa[np.lexsort(np.round(pa, 5).T[::-1])]
        pb = pb[np.lexsort(np.round(pb, 5).T[::-1])]
        worst = max(worst, float(np.abs(pa - pb).max(initial=0.0)))
    return worst


STAGE_FUNCS: dict[str, Callable[[StageContext], dict]] = {
    "segment": stage_segment, "parse": stage_parse, "occlude": stage_occlude,
    "amodal-data": stage_amodal, "regen": stage_regen, "compose": stage_compose,
}


def _update_provenance(out: Path, manifest: dict, stage: str, entry: dict) -> Path:
    path = out / "provenance.json"
    prov = io.read_json(path) if path.is_file() else {"schema": SCHEMA, "stages": {}}
    prov["seed"] = manifest["seed"]
    prov["stages"][stage] = entry
    return io.write_json(path, prov)


def run_pipeline(manifest: Mapping | str | Path, **kwargs) -> dict:
    """Run the manifest's stages in order; returns the per-stage reports.

    Stage failures raise :class:`StageError`; outputs of finished stages stay on disk.
    """
    m = load_manifest(manifest, **kwargs)
    set_num_threads(m["threads"])
    out = Path(m["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "manifest.json", {k: v for k, v in m.items() if k != "out"})
    reports = {}
    for stage in m["stages"]:
        log.info("stage %s", stage)
        ctx = StageContext(m, out, _Recorder(out))
        try:
            reports[stage] = STAGE_FUNCS[stage](ctx)
        except Exception as err:
            raise StageError(stage, err) from err
        entry = {"seed": m["seed"], "config": m["config"][stage], "inputs": ctx.rec.entries(ctx.rec.inputs),
                 "outputs": ctx.rec.entries(ctx.rec.outputs)}
        _update_provenance(out, m, stage, entry)
    return reports
