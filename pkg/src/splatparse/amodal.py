"""Amodal-completion training data: occlusion pairs, transition clips, lighting, mIoU.

Images are float arrays on the 8-bit scale [0, 255] (uint8 input is accepted
and converted). Clip frames are normalised with ``v / 127.5 - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import io

CLIP_FRAMES = 8
FRAME_SIZE = (512, 512)
AREA_LIGHT_THRESHOLD = 0.2  # p above this picks the area light

AREA_RADIUS = (4.0, 6.0)
AREA_ENERGY = (800.0, 1200.0)
AREA_SIZE = (0.8, 1.2)
AREA_ELEVATION_DEG = (40.0, 89.9)
AREA_AZIMUTH_DEG = (0.0, 360.0)
SUN_ANGLE = (0.1, 0.5)
SUN_LIGHTS = ((5.0, 0.0), (3.0, 90.0), (3.0, 180.0), (3.0, 270.0))


def _as_image(img) -> np.ndarray:
    arr = np.asarray(img)
    out = arr.astype(np.float64)
    if out.ndim != 3 or out.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return out


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"expected an H x W mask, got shape {arr.shape}")
    return arr.astype(bool)


@dataclass(frozen=True)
class AmodalPair:
    whole_image: np.ndarray
    whole_mask: np.ndarray
    occluded_image: np.ndarray
    visible_mask: np.ndarray

    def __post_init__(self):
        wi, oi = _as_image(self.whole_image), _as_image(self.occluded_image)
        wm, vm = _as_mask(self.whole_mask), _as_mask(self.visible_mask)
        if not (wi.shape == oi.shape and wm.shape == vm.shape == wi.shape[:2]):
            raise ValueError("images and masks must share their height and width")
        if np.any(vm & ~wm):
            raise ValueError("visible mask must lie inside the whole mask")
        for name, val in (("whole_image", wi), ("whole_mask", wm), ("occluded_image", oi), ("visible_mask", vm)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def difference_mask(self) -> np.ndarray:
        return self.whole_mask & ~self.visible_mask

    @classmethod
    def from_renders(cls, whole_color, whole_mask, occluded_color, visible_mask) -> AmodalPair:
        """Build from renderer output (colours in [0, 1])."""
        return cls(255.0 * np.asarray(whole_color), whole_mask, 255.0 * np.asarray(occluded_color), visible_mask)


def shift_into(shape: tuple[int, int], src: np.ndarray, offset: tuple[int, int], fill=0) -> np.ndarray:
    """Place ``src`` with its top-left corner at ``offset`` (row, col) in a canvas of ``shape``."""
    h, w = shape
    dy, dx = int(offset[0]), int(offset[1])
    out = np.full((h, w) + src.shape[2:], fill, dtype=src.dtype)
    y0, x0 = max(dy, 0), max(dx, 0)
    y1, x1 = min(dy + src.shape[0], h), min(dx + src.shape[1], w)
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1] = src[y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


def composite_occlusion(image, mask, occluder_image, occluder_mask, offset=(0, 0)) -> AmodalPair:
    """Paste an occluder over a whole-object image and derive the visible mask."""
    img, whole_m = _as_image(image), _as_mask(mask)
    occ_img, occ_m = _as_image(occluder_image), _as_mask(occluder_mask)
    if occ_img.shape[:2] != occ_m.shape:
        raise ValueError("occluder image and mask differ in size")
    if img.shape[:2] != whole_m.shape:
        raise ValueError("object image and mask differ in size")
    if not occ_m.any():
        raise ValueError("occluder mask is empty")
    cover = shift_into(whole_m.shape, occ_m, offset, False)
    pasted = shift_into(whole_m.shape, occ_img, offset, 0.0)
    visible_m = whole_m & ~cover
    if whole_m.any() and not visible_m.any():
        raise ValueError("no visible support: occluder covers the whole object")
    occluded = np.where(cover[..., None], pasted, img)
    return AmodalPair(img, whole_m, occluded, visible_m)


def normalize_frame(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def denormalize_frame(frame: np.ndarray) -> np.ndarray:
    return (np.asarray(frame, dtype=np.float64) + 1.0) * 127.5


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float H x W x C image to ``size`` = (width, height)."""
    w, h = int(size[0]), int(size[1])
    if img.shape[1] == w and img.shape[0] == h:
        return img.astype(np.float64, copy=True)
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(img[..., c], dtype=np.float32))
                        .resize((w, h), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def blend(a: np.ndarray, b: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``weight * a + (1 - weight) * b`` with a per-pixel weight."""
    wgt = np.asarray(weight, dtype=np.float64)[..., None]
    return wgt * a + (1.0 - wgt) * b


def blend_schedule(n_frames: int) -> np.ndarray:
    if n_frames < 2:
        raise ValueError(f"need at least 2 interpolation frames, got {n_frames}")
    return 1.0 - np.arange(n_frames) / (n_frames - 1)


@dataclass(frozen=True)
class TransitionClip:
    frames: np.ndarray  # (N + 1, h, w, 3), normalised to [-1, 1]
    blended: np.ndarray  # (N, H, W, 3) interpolation frames before resize, 8-bit scale
    alphas: np.ndarray
    difference_mask: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.alphas)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]


def make_transition_clip(pair: AmodalPair, n_frames: int = CLIP_FRAMES,
                         frame_size: tuple[int, int] = FRAME_SIZE) -> TransitionClip:
    """Clip dissolving the occluder over the difference region.

    Frame 0 is the whole image. Interpolation frame ``i`` blends the occluded
    appearance into the whole image with weight ``1 - i / (N - 1)`` inside the
    difference mask, so the first shows the occlusion and the last the full object.
    """
    alphas = blend_schedule(n_frames)
    diff_m = pair.difference_mask.astype(np.float64)
    blended = np.stack([blend(pair.occluded_image, pair.whole_image, diff_m * a) for a in alphas])
    frames = [normalize_frame(resize_image(pair.whole_image, frame_size))]
    frames += [normalize_frame(resize_image(b, frame_size)) for b in blended]
    return TransitionClip(np.stack(frames), blended, alphas, pair.difference_mask.copy())


def export_clip(out_dir, clip: TransitionClip, *, fmt: str = "png", pair: AmodalPair | None = None) -> list[Path]:
    """Write a clip as numbered PNG frames or one raw float32 tensor, plus JSON metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"N": clip.n_frames, "frame_size": list(clip.frame_size), "alphas": clip.alphas.tolist(),
            "normalization": "v / 127.5 - 1", "format": fmt}
    paths = []
    if fmt == "png":
        names = []
        for k, f in enumerate(clip.frames):
            p = io.write_png(out_dir / f"frame_{k:03d}.png", np.clip(np.round(denormalize_frame(f)), 0, 255).astype(np.uint8))
            paths.append(p)
            names.append(p.name)
        meta["frames"] = names
    elif fmt == "raw":
        p = io.write_raw(out_dir / "frames.f32", clip.frames.astype(np.float32))
        paths += [p, p.with_name(p.name + ".json")]
        meta["frames"] = p.name
    else:
        raise ValueError(f"unknown clip format {fmt!r}")
    masks = {"difference": clip.difference_mask}
    if pair is not None:
        masks.update(whole=pair.whole_mask, visible=pair.visible_mask)
    meta["masks"] = {}
    for name, m in masks.items():
        p = io.write_png(out_dir / f"mask_{name}.png", m)
        paths.append(p)
        meta["masks"][name] = p.name
    paths.append(io.write_json(out_dir / "clip.json", meta))
    return paths


@dataclass(frozen=True)
class AreaLight:
    radius: float
    energy: float
    size: float
    elevation_deg: float
    azimuth_deg: float


@dataclass(frozen=True)
class SunLight:
    angle: float
    lights: tuple[tuple[float, float], ...] = SUN_LIGHTS  # (energy, rotation about x in degrees)


@dataclass(frozen=True)
class LightingConfig:
    kind: str
    area: AreaLight | None = None
    sun: SunLight | None = None

    def to_dict(self) -> dict:
        if self.kind == "area":
            a = self.area
            return {"kind": "area", "radius": a.radius, "energy": a.energy, "size": a.size,
                    "elevation_deg": a.elevation_deg, "azimuth_deg": a.azimuth_deg}
        return {"kind": "sun", "angle": self.sun.angle,
                "lights": [{"energy": e, "rotation_x_deg": r} for e, r in self.sun.lights]}

    @classmethod
    def from_dict(cls, d: dict) -> LightingConfig:
        if d["kind"] == "area":
            return cls("area", area=AreaLight(d["radius"], d["energy"], d["size"], d["elevation_deg"],
                                              d["azimuth_deg"]))
        lights = tuple((float(x["energy"]), float(x["rotation_x_deg"])) for x in d["lights"])
        return cls("sun", sun=SunLight(float(d["angle"]), lights))


def sample_lighting_batch(rng, n: int, p=None) -> dict[str, np.ndarray]:
    """Vectorised lighting draws; parameters of the other light kind are NaN."""
    rng = np.random.default_rng(rng)
    pick = rng.uniform(0.0, 1.0, n) if p is None else np.full(n, float(p))
    area = pick > AREA_LIGHT_THRESHOLD
    draws = {
        "radius": rng.uniform(*AREA_RADIUS, n),
        "energy": rng.uniform(*AREA_ENERGY, n),
        "size": rng.uniform(*AREA_SIZE, n),
        "elevation_deg": rng.uniform(*AREA_ELEVATION_DEG, n),
        "azimuth_deg": rng.uniform(*AREA_AZIMUTH_DEG, n),
        "angle": rng.uniform(*SUN_ANGLE, n),
    }
    out = {"p": pick, "is_area": area}
    for k, v in draws.items():
        keep = ~area if k == "angle" else area
        out[k] = np.where(keep, v, np.nan)
    return out


def sample_lighting(rng, p: float | None = None) -> LightingConfig:
    """One randomized lighting setup; ``p`` forces the light-kind draw."""
    b = sample_lighting_batch(rng, 1, p)
    if b["is_area"][0]:
        return LightingConfig("area", area=AreaLight(*(float(b[k][0]) for k in
                                                       ("radius", "energy", "size", "elevation_deg", "azimuth_deg"))))
    return LightingConfig("sun", sun=SunLight(float(b["angle"][0])))


def mask_iou(pred, gt) -> float:
    a, b = _as_mask(pred), _as_mask(gt)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def amodal_miou(preds: Sequence, gts: Sequence) -> float:
    """Mean IoU over mask pairs; a pair that is empty on both sides scores 1."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground-truth masks")
    if len(preds) == 0:
        raise ValueError("no masks to evaluate")
    return float(np.mean([mask_iou(p, g) for p, g in zip(preds, gts)]))
