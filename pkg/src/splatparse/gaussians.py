"""Gaussian-splat scene container.

Scenes are stored column-wise (one array per attribute) because every consumer
works on whole scenes; :class:`Gaussian` exists for building or inspecting a
single primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

FEATURE_DIM = 16
UNLABELED = -1
_QUAT_TOL = 1e-6


def quat_to_matrix(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions stored w, x, y, z."""
    q = np.asarray(quats, dtype=np.float64)
    flat = q.reshape(-1, 4)
    mats = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return mats.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(mats: np.ndarray) -> np.ndarray:
    m = np.asarray(mats, dtype=np.float64)
    xyzw = Rotation.from_matrix(m.reshape(-1, 3, 3)).as_quat()
    wxyz = xyzw[:, [3, 0, 1, 2]]
    # canonical sign: w >= 0
    wxyz *= np.where(wxyz[:, :1] < 0, -1.0, 1.0)
    return wxyz.reshape(m.shape[:-2] + (4,))


def covariance_from_scale_rotation(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    rot = quat_to_matrix(quats)
    rs = rot * np.asarray(scales, dtype=np.float64)[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def scale_rotation_from_covariance(covs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`covariance_from_scale_rotation` (up to axis order)."""
    covs = np.asarray(covs, dtype=np.float64)
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    evals, evecs = np.linalg.eigh(sym)
    if np.any(evals <= 0):
        raise ValueError("covariance is not positive definite")
    det = np.linalg.det(evecs)
    evecs[..., :, 2] *= np.sign(det)[..., None]
    return np.sqrt(evals), matrix_to_quat(evecs)


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    instance_id: int | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class GaussianScene:
    """Ordered set of 3D Gaussians plus a background colour.

    Arrays are copied on construction and frozen, so scenes can be shared
    across threads. ``instance_ids`` uses ``-1`` for unlabeled gaussians.
    """

    __slots__ = (
        "positions",
        "scales",
        "rotations",
        "opacities",
        "colors",
        "features",
        "instance_ids",
        "background_color",
    )

    def __init__(
        self,
        positions,
        scales,
        rotations,
        opacities,
        colors,
        features=None,
        instance_ids=None,
        background_color=(0.0, 0.0, 0.0),
        *,
        normalize_rotations: bool = False,
    ):
        pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        scl = np.array(scales, dtype=np.float64).reshape(n, 3)
        rot = np.array(rotations, dtype=np.float64).reshape(n, 4)
        opa = np.array(opacities, dtype=np.float64).reshape(n)
        col = np.array(colors, dtype=np.float64).reshape(n, 3)
        if features is None:
            feat = np.zeros((n, FEATURE_DIM))
        else:
            feat = np.array(features, dtype=np.float64)
            if feat.shape != (n, FEATURE_DIM):
                raise ValueError(f"features must have shape ({n}, {FEATURE_DIM}), got {feat.shape}")
        if instance_ids is None:
            ids = np.full(n, UNLABELED, dtype=np.int64)
        else:
            ids = np.array(instance_ids, dtype=np.int64).reshape(n)
        bg = np.array(background_color, dtype=np.float64).reshape(3)

        for name, arr in (("position", pos), ("scale", scl), ("rotation", rot),
                          ("opacity", opa), ("color", col), ("feature", feat), ("background", bg)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} values")
        if np.any(scl <= 0):
            raise ValueError("scales must be positive")
        norms = np.linalg.norm(rot, axis=1)
        if normalize_rotations:
            if np.any(norms == 0):
                raise ValueError("zero quaternion")
            rot = rot / norms[:, None]
        elif np.any(np.abs(norms - 1.0) > _QUAT_TOL):
            raise ValueError("rotations must be unit quaternions")
        if np.any((opa < 0) | (opa > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(ids < UNLABELED):
            raise ValueError("instance ids must be >= 0 or -1 (unlabeled)")

        object.__setattr__(self, "positions", _readonly(pos))
        object.__setattr__(self, "scales", _readonly(scl))
        object.__setattr__(self, "rotations", _readonly(rot))
        object.__setattr__(self, "opacities", _readonly(opa))
        object.__setattr__(self, "colors", _readonly(col))
        object.__setattr__(self, "features", _readonly(feat))
        object.__setattr__(self, "instance_ids", _readonly(ids))
        object.__setattr__(self, "background_color", _readonly(bg))

    def __setattr__(self, name, value):
        raise AttributeError("GaussianScene is immutable")

    def __len__(self) -> int:
        return len(self.positions)

    def __repr__(self) -> str:
        return f"GaussianScene(n={len(self)}, labels={self.labels().tolist()})"

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian], background_color=(0.0, 0.0, 0.0)) -> GaussianScene:
        gs = list(gaussians)
        return cls(
            [g.position for g in gs],
            [g.scale for g in gs],
            [g.rotation for g in gs],
            [g.opacity for g in gs],
            [g.color for g in gs],
            [g.feature for g in gs] if gs else None,
            [UNLABELED if g.instance_id is None else g.instance_id for g in gs],
            background_color,
        )

    @classmethod
    def from_covariances(cls, positions, covariances, opacities, colors, features=None,
                         instance_ids=None, background_color=(0.0, 0.0, 0.0)) -> GaussianScene:
        scales, quats = scale_rotation_from_covariance(covariances)
        return cls(positions, scales, quats, opacities, colors, features, instance_ids,
                   background_color, normalize_rotations=True)

    @classmethod
    def empty(cls, background_color=(0.0, 0.0, 0.0)) -> GaussianScene:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), background_color=background_color)

    def gaussian(self, i: int) -> Gaussian:
        lab = int(self.instance_ids[i])
        return Gaussian(self.positions[i].copy(), self.scales[i].copy(), self.rotations[i].copy(),
                        float(self.opacities[i]), self.colors[i].copy(), self.features[i].copy(),
                        None if lab == UNLABELED else lab)

    def covariances(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.scales, self.rotations)

    def labels(self) -> np.ndarray:
        """Sorted distinct labels, excluding the unlabeled marker."""
        ids = np.unique(self.instance_ids)
        return ids[ids != UNLABELED]

    def replace(self, **changes) -> GaussianScene:
        kw = dict(
            positions=self.positions, scales=self.scales, rotations=self.rotations,
            opacities=self.opacities, colors=self.colors, features=self.features,
            instance_ids=self.instance_ids, background_color=self.background_color,
        )
        kw.update(changes)
        return GaussianScene(**kw)

    def subset(self, index) -> GaussianScene:
        idx = np.asarray(index)
        return GaussianScene(
            self.positions[idx], self.scales[idx], self.rotations[idx], self.opacities[idx],
            self.colors[idx], self.features[idx], self.instance_ids[idx], self.background_color,
        )

    def select_label(self, label: int) -> GaussianScene:
        return self.subset(np.flatnonzero(self.instance_ids == label))

    def relabeled(self) -> tuple[GaussianScene, dict[int, int]]:
        """Map labels onto the contiguous range 0..K-1 (order preserved)."""
        mapping = {int(old): new for new, old in enumerate(self.labels())}
        ids = np.array([mapping.get(int(i), UNLABELED) for i in self.instance_ids], dtype=np.int64)
        return self.replace(instance_ids=ids), mapping

    @staticmethod
    def concat(scenes: Sequence[GaussianScene], background_color=None) -> GaussianScene:
        if not scenes:
            raise ValueError("nothing to concatenate")
        bg = scenes[0].background_color if background_color is None else background_color
        return GaussianScene(
            np.concatenate([s.positions for s in scenes]),
            np.concatenate([s.scales for s in scenes]),
            np.concatenate([s.rotations for s in scenes]),
            np.concatenate([s.opacities for s in scenes]),
            np.concatenate([s.colors for s in scenes]),
            np.concatenate([s.features for s in scenes]),
            np.concatenate([s.instance_ids for s in scenes]),
            bg,
        )

    def bounding_sphere(self, sigma: float = 3.0) -> tuple[np.ndarray, float]:
        """Centre (box centre) and radius enclosing every gaussian's ``sigma`` extent."""
        if len(self) == 0:
            raise ValueError("empty scene")
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        center = 0.5 * (lo + hi)
        reach = np.linalg.norm(self.positions - center, axis=1) + sigma * self.scales.max(axis=1)
        return center, float(reach.max())
