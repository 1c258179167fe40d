"""Cameras on a view sphere and EWA projection of 3D Gaussians.

Conventions: world up is +z, azimuth is measured from +x toward +y and
elevation from the xy-plane. Image rows grow downward; pixel (i, j) has its
centre at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .gaussians import Gaussian, GaussianScene, covariance_from_scale_rotation

NEAR_PLANE = 1e-2


@dataclass(frozen=True)
class CameraPose:
    projection: Literal["orthographic", "perspective"] = "orthographic"
    radius: float = 2.0
    azimuth: float = 0.0
    elevation: float = 0.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_size: tuple[int, int] = (64, 64)
    fov_y: float = math.radians(50.0)
    # half height of the orthographic window, scene units
    ortho_half_height: float = 1.0

    def __post_init__(self):
        if self.projection not in ("orthographic", "perspective"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError("camera radius must be positive")
        if not (-math.pi / 2 < self.elevation <= math.pi / 2 + 1e-12):
            raise ValueError("elevation must lie in (-pi/2, pi/2]")
        w, h = self.image_size
        if int(w) < 1 or int(h) < 1:
            raise ValueError("image size must be at least 1x1")
        object.__setattr__(self, "image_size", (int(w), int(h)))
        object.__setattr__(self, "look_at", tuple(float(v) for v in self.look_at))
        if self.projection == "perspective" and not (0 < self.fov_y < math.pi):
            raise ValueError("fov_y must lie in (0, pi)")
        if self.ortho_half_height <= 0:
            raise ValueError("ortho_half_height must be positive")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def direction(self) -> np.ndarray:
        """Unit vector from look_at toward the eye."""
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        return np.array([ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), se])

    def eye(self) -> np.ndarray:
        return np.asarray(self.look_at) + self.radius * self.direction()

    def basis(self) -> np.ndarray:
        """Rows: right, up, forward. Right follows increasing azimuth, so the
        frame stays defined at elevation 90 degrees."""
        forward = -self.direction()
        right = np.array([-math.sin(self.azimuth), math.cos(self.azimuth), 0.0])
        up = np.cross(right, forward)
        return np.stack([right, up, forward])

    @property
    def focal(self) -> float:
        """Pixels per scene unit (orthographic) or focal length in pixels."""
        if self.projection == "orthographic":
            return self.height / (2.0 * self.ortho_half_height)
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    def to_view(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.eye()) @ self.basis().T

    def project_points(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of world points."""
        v = self.to_view(points)
        f = self.focal
        if self.projection == "orthographic":
            x, y = v[..., 0], v[..., 1]
        else:
            x, y = v[..., 0] / v[..., 2], v[..., 1] / v[..., 2]
        return np.stack([0.5 * self.width + f * x, 0.5 * self.height - f * y], axis=-1)

    def with_(self, **changes) -> CameraPose:
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return CameraPose(**kw)

    def to_dict(self) -> dict:
        return {
            "projection": self.projection,
            "radius": self.radius,
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "look_at": list(self.look_at),
            "image_size": list(self.image_size),
            "fov_y": self.fov_y,
            "ortho_half_height": self.ortho_half_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraPose:
        d = dict(d)
        d["look_at"] = tuple(d.get("look_at", (0.0, 0.0, 0.0)))
        d["image_size"] = tuple(d.get("image_size", (64, 64)))
        return cls(**d)


@dataclass(frozen=True)
class Projected2D:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    culled: bool = False


@dataclass(frozen=True)
class ProjectedScene:
    means: np.ndarray
    covs: np.ndarray
    depths: np.ndarray
    valid: np.ndarray = field(repr=False)


def projection_jacobians(cam: CameraPose, view_points: np.ndarray) -> np.ndarray:
    """(G, 2, 3) Jacobian of pixel coordinates w.r.t. view-space position."""
    vp = np.atleast_2d(view_points)
    f = cam.focal
    jac = np.zeros((len(vp), 2, 3))
    if cam.projection == "orthographic":
        jac[:, 0, 0] = f
        jac[:, 1, 1] = -f
        return jac
    x, y, z = vp[:, 0], vp[:, 1], vp[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        jac[:, 0, 0] = f / z
        jac[:, 0, 2] = -f * x / z**2
        jac[:, 1, 1] = -f / z
        jac[:, 1, 2] = f * y / z**2
    return jac


def project_scene(scene: GaussianScene, cam: CameraPose) -> ProjectedScene:
    view = cam.to_view(scene.positions)
    depths = view[:, 2].copy()
    if cam.projection == "perspective":
        valid = depths > NEAR_PLANE
    else:
        valid = np.ones(len(scene), dtype=bool)
    means = cam.project_points(scene.positions) if len(scene) else np.zeros((0, 2))
    rot = cam.basis()
    cov_view = rot @ scene.covariances() @ rot.T
    jac = projection_jacobians(cam, view)
    covs = jac @ cov_view @ np.swapaxes(jac, 1, 2)
    means[~valid] = np.nan
    covs[~valid] = np.nan
    return ProjectedScene(means, covs, depths, valid)


def project_gaussian(g: Gaussian, cam: CameraPose) -> Projected2D:
    """Project one Gaussian; behind-camera perspective hits come back culled."""
    view = cam.to_view(g.position[None])[0]
    if cam.projection == "perspective" and view[2] <= NEAR_PLANE:
        return Projected2D(np.full(2, np.nan), np.full((2, 2), np.nan), float(view[2]), culled=True)
    rot = cam.basis()
    cov3 = covariance_from_scale_rotation(np.asarray(g.scale)[None], np.asarray(g.rotation)[None])[0]
    jac = projection_jacobians(cam, view[None])[0]
    cov2 = jac @ (rot @ cov3 @ rot.T) @ jac.T
    return Projected2D(cam.project_points(g.position[None])[0], cov2, float(view[2]))
