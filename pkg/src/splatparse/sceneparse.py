"""Per-object extraction, placement, and occlusion-driven view selection."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .camera import CameraPose
from .gaussians import UNLABELED, GaussianScene, quat_to_matrix, scale_rotation_from_covariance
from .raster import render
from .viewgen import ViewGrid, partition_regions

OCCLUSION_TAU = 0.4
MASK_ALPHA = 0.5
MIN_HALF_EXTENT = 1e-6


@dataclass(frozen=True)
class ObjectConfig:
    """Placement of an object's local frame in the scene: scale, then rotate, then translate."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: str = "unknown"

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        rot = tuple(float(v) for v in self.rotation)
        scl = tuple(float(v) for v in self.scale)
        if len(pos) != 3 or len(rot) != 4 or len(scl) != 3:
            raise ValueError("position/scale need 3 components and rotation 4")
        if not np.all(np.isfinite(pos + rot + scl)):
            raise ValueError("non-finite object config")
        if any(s <= 0 for s in scl):
            raise ValueError(f"scale must be positive, got {scl}")
        norm = float(np.linalg.norm(rot))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"rotation must be a unit quaternion (norm {norm})")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "scale", scl)

    def matrix(self) -> np.ndarray:
        """Linear part R @ diag(s) of the local-to-scene map."""
        return quat_to_matrix(np.asarray(self.rotation)) * np.asarray(self.scale)[None, :]

    def to_dict(self) -> dict:
        return {"position": list(self.position), "rotation": list(self.rotation),
                "scale": list(self.scale), "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping) -> ObjectConfig:
        return cls(tuple(d["position"]), tuple(d["rotation"]), tuple(d["scale"]), str(d.get("label", "unknown")))


def _affine_scene(scene: GaussianScene, lin: np.ndarray, offset: np.ndarray, inverse: bool) -> GaussianScene:
    if inverse:
        inv = np.linalg.inv(lin)
        pos = (scene.positions - offset) @ inv.T
        lin = inv
    else:
        pos = scene.positions @ lin.T + offset
    if len(scene) == 0:
        return scene.replace(positions=pos)
    cov = lin @ scene.covariances() @ lin.T
    scales, rots = scale_rotation_from_covariance(cov)
    return scene.replace(positions=pos, scales=scales, rotations=rots)


def place_object(geometry, config: ObjectConfig):
    """Map local-frame geometry (a scene or an (n, 3) point array) into the scene frame."""
    lin, off = config.matrix(), np.asarray(config.position)
    if isinstance(geometry, GaussianScene):
        return _affine_scene(geometry, lin, off, inverse=False)
    pts = np.asarray(geometry, dtype=np.float64)
    return pts @ lin.T + off


def unplace_object(geometry, config: ObjectConfig):
    """Inverse of :func:`place_object`."""
    lin, off = config.matrix(), np.asarray(config.position)
    if isinstance(geometry, GaussianScene):
        return _affine_scene(geometry, lin, off, inverse=True)
    pts = np.asarray(geometry, dtype=np.float64)
    return (pts - off) @ np.linalg.inv(lin).T


@dataclass(frozen=True)
class ParsedObject:
    instance_id: int
    local: GaussianScene
    config: ObjectConfig

    def placed(self) -> GaussianScene:
        return place_object(self.local, self.config)


def object_config_for(positions: np.ndarray, label: str = "unknown") -> ObjectConfig:
    """Centroid position, identity rotation, half-extents about the centroid."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) == 0:
        raise ValueError("no gaussians for this object")
    centroid = pos.mean(axis=0)
    half = np.maximum(np.abs(pos - centroid).max(axis=0), MIN_HALF_EXTENT)
    return ObjectConfig(tuple(centroid), (1.0, 0.0, 0.0, 0.0), tuple(half), label)


def extract_objects(scene: GaussianScene, ids: Sequence[int] | None = None,
                    names: Mapping[int, str] | None = None) -> list[ParsedObject]:
    """Split a labelled scene into local-frame objects with their placements.

    Unlabeled gaussians are treated as background and skipped. Local frames
    put every gaussian centre inside [-1, 1]^3.
    """
    names = names or {}
    wanted = scene.labels() if ids is None else np.asarray(list(ids), dtype=np.int64)
    if len(wanted) == 0:
        raise ValueError("scene has no labelled gaussians")
    out = []
    for oid in wanted:
        idx = np.flatnonzero(scene.instance_ids == oid)
        if len(idx) == 0:
            raise ValueError(f"label {int(oid)} has no gaussians")
        part = scene.subset(idx)
        cfg = object_config_for(part.positions, names.get(int(oid), "unknown"))
        out.append(ParsedObject(int(oid), unplace_object(part, cfg), cfg))
    return out


class Verdict(str, enum.Enum):
    UNOCCLUDED = "unoccluded"
    COMPLETE = "complete"
    REJECT = "reject"


def occlusion_ratio(a_target: int, a_other: int) -> float:
    total = a_target + a_other
    return 0.0 if total == 0 else a_other / total


def verdict_for(rho: float, tau: float = OCCLUSION_TAU) -> Verdict:
    if rho <= 0.0:
        return Verdict.UNOCCLUDED
    return Verdict.COMPLETE if rho < tau else Verdict.REJECT


@dataclass(frozen=True)
class OcclusionReport:
    view: int
    a_target: int
    a_other: int
    rho: float
    verdict: Verdict

    @property
    def needs_completion(self) -> bool:
        return self.verdict is Verdict.COMPLETE

    def to_dict(self) -> dict:
        return {"view": self.view, "A_target": self.a_target, "A_other": self.a_other,
                "rho": self.rho, "verdict": self.verdict.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> OcclusionReport:
        return cls(int(d["view"]), int(d["A_target"]), int(d["A_other"]), float(d["rho"]), Verdict(d["verdict"]))


@dataclass(frozen=True)
class ObjectMasks:
    whole: np.ndarray  # target-only alpha > 0.5
    visible: np.ndarray  # whole mask pixels the target also wins in the full render
    alpha: np.ndarray


def object_masks(scene: GaussianScene, object_id: int, cam: CameraPose, *,
                 backend: str | None = None) -> ObjectMasks:
    target = scene.select_label(object_id)
    if len(target) == 0:
        raise ValueError(f"object {object_id} not in scene")
    alpha = render(target, cam, "alpha", backend=backend).alpha
    winner = render(scene, cam, "instance", backend=backend).instance_map
    whole = alpha > MASK_ALPHA
    return ObjectMasks(whole, whole & (winner == object_id), alpha)


def occlusion_test(scene: GaussianScene, object_id: int, cam: CameraPose, *, view: int = 0,
                   tau: float = OCCLUSION_TAU, backend: str | None = None) -> OcclusionReport:
    """Occlusion ratio of ``object_id`` seen from ``cam``, with its verdict."""
    m = object_masks(scene, object_id, cam, backend=backend)
    a_target = int(m.visible.sum())
    a_other = int(m.whole.sum()) - a_target
    if a_target + a_other == 0:
        warnings.warn(f"object {object_id} covers no pixels in view {view}; treating as unoccluded",
                      stacklevel=2)
    rho = occlusion_ratio(a_target, a_other)
    return OcclusionReport(view, a_target, a_other, rho, verdict_for(rho, tau))


class ObjectUnobservable(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    region: int
    view: int
    report: OcclusionReport

    @property
    def needs_completion(self) -> bool:
        return self.report.needs_completion


@dataclass(frozen=True)
class CandidateSet:
    object_id: int
    accepted: tuple[Candidate, ...]
    dropped: tuple[int, ...]
    reports: tuple[OcclusionReport, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "accepted": [{"region": c.region, "view": c.view, "needs_completion": c.needs_completion,
                          "rho": c.report.rho} for c in self.accepted],
            "dropped_regions": list(self.dropped),
            "reports": [r.to_dict() for r in self.reports],
        }


def select_candidates(scene: GaussianScene, object_id: int, ring: ViewGrid, rng, *,
                      tau: float = OCCLUSION_TAU, backend: str | None = None) -> CandidateSet:
    """Pick at most one usable view per ring quadrant, trying views in random order."""
    rng = np.random.default_rng(rng)
    accepted, dropped, reports = [], [], []
    for region, views in enumerate(partition_regions(ring)):
        chosen = None
        for v in rng.permutation(views):
            rep = occlusion_test(scene, object_id, ring.poses[int(v)], view=int(v), tau=tau, backend=backend)
            reports.append(rep)
            if rep.verdict is not Verdict.REJECT:
                chosen = Candidate(region, int(v), rep)
                break
        if chosen is None:
            dropped.append(region)
        else:
            accepted.append(chosen)
    if not accepted:
        raise ObjectUnobservable(f"object {object_id} unobservable: every region is occluded")
    return CandidateSet(object_id, tuple(accepted), tuple(dropped), tuple(reports))


@dataclass(frozen=True)
class CandidateRender:
    view: int
    pose: CameraPose
    color: np.ndarray
    alpha: np.ndarray
    whole_mask: np.ndarray
    visible_mask: np.ndarray
    needs_completion: bool


def render_candidates(scene: GaussianScene, object_id: int, ring: ViewGrid,
                      candidates: CandidateSet | Sequence[int], *,
                      backend: str | None = None) -> list[CandidateRender]:
    """Render the isolated object from each accepted view plus its visible mask.

    The object is drawn at its scene placement, so its pixels line up with the
    full-scene render used for the visible mask.
    """
    if isinstance(candidates, CandidateSet):
        picks = [(c.view, c.needs_completion) for c in candidates.accepted]
    else:
        picks = [(int(v), None) for v in candidates]
    if not picks:
        raise ValueError("no candidate views")
    target = scene.select_label(object_id)
    out = []
    for view, flag in picks:
        pose = ring.poses[view]
        iso = render(target, pose, ("color", "alpha"), backend=backend)
        m = object_masks(scene, object_id, pose, backend=backend)
        if flag is None:
            flag = verdict_for(occlusion_ratio(int(m.visible.sum()), int((m.whole & ~m.visible).sum()))) \
                is Verdict.COMPLETE
        out.append(CandidateRender(view, pose, iso.color, iso.alpha, m.whole, m.visible, flag))
    return out


def export_candidates(out_dir, renders: Sequence[CandidateRender], prefix: str = "view") -> list[Path]:
    """Write image/mask PNG pairs and return the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in renders:
        stem = f"{prefix}{r.view:02d}"
        paths.append(io.write_png(out_dir / f"{stem}.png", r.color))
        paths.append(io.write_png(out_dir / f"{stem}_whole.png", r.whole_mask))
        paths.append(io.write_png(out_dir / f"{stem}_visible.png", r.visible_mask))
    return paths


def background_mask(scene: GaussianScene) -> np.ndarray:
    return scene.instance_ids == UNLABELED
