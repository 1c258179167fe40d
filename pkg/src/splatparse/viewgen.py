"""Predefined viewpoint sets: scene grids and object-centric rings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .camera import CameraPose
from .gaussians import GaussianScene

SCENE_AZIMUTH_RANGE_DEG = (-5.0, 95.0)
SCENE_ELEVATION_RANGE_DEG = (-10.0, 90.0)
SCENE_RADIUS = 2.0
RING_VIEWS = 16
RING_ELEVATION_DEG = 30.0
N_REGIONS = 4
AUTO_RADIUS_FACTOR = 1.8

Kind = Literal["scene_front", "scene_full", "object_ring"]


@dataclass(frozen=True)
class ViewGrid:
    kind: Kind
    radius: float
    azimuths: tuple[float, ...]
    elevations: tuple[float, ...]
    poses: tuple[CameraPose, ...]

    def __len__(self) -> int:
        return len(self.poses)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "radius": self.radius,
            "poses": [
                {
                    "azimuth_deg": math.degrees(p.azimuth),
                    "elevation_deg": math.degrees(p.elevation),
                    **p.to_dict(),
                }
                for p in self.poses
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ViewGrid:
        poses = tuple(
            CameraPose.from_dict({k: v for k, v in p.items() if not k.endswith("_deg")})
            for p in d["poses"]
        )
        azs = tuple(dict.fromkeys(p.azimuth for p in poses))
        els = tuple(dict.fromkeys(p.elevation for p in poses))
        return cls(d["kind"], float(d["radius"]), azs, els, poses)


def _check_radius(radius: float) -> None:
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")


def scene_viewpoints(
    kind: Kind = "scene_front",
    radius: float = SCENE_RADIUS,
    look_at: Sequence[float] = (0.0, 0.0, 0.0),
    *,
    image_size: tuple[int, int] = (64, 64),
    projection: str = "orthographic",
    ortho_half_height: float | None = None,
    n_azimuth: int = 8,
    n_elevation: int = 5,
) -> ViewGrid:
    """Azimuth x elevation grid on a sphere around ``look_at``.

    ``scene_front`` spans azimuth [-5, 95] deg inclusive; ``scene_full`` spans
    [0, 360) deg. Elevations span [-10, 90] deg inclusive for both. Poses are
    ordered elevation-major.
    """
    _check_radius(radius)
    if kind == "scene_front":
        az = np.linspace(*SCENE_AZIMUTH_RANGE_DEG, n_azimuth)
    elif kind == "scene_full":
        az = np.arange(n_azimuth) * (360.0 / n_azimuth)
    else:
        raise ValueError(f"not a scene grid kind: {kind!r}")
    el = np.linspace(*SCENE_ELEVATION_RANGE_DEG, n_elevation)
    half = 0.75 * radius if ortho_half_height is None else ortho_half_height
    azr = tuple(math.radians(a) for a in az)
    elr = tuple(math.radians(e) for e in el)
    poses = tuple(
        CameraPose(projection, radius, a, e, tuple(look_at), image_size, ortho_half_height=half)
        for e in elr
        for a in azr
    )
    return ViewGrid(kind, float(radius), azr, elr, poses)


def object_viewpoints(
    center: Sequence[float],
    radius: float,
    *,
    n_views: int = RING_VIEWS,
    elevation_deg: float = RING_ELEVATION_DEG,
    image_size: tuple[int, int] = (64, 64),
    projection: str = "orthographic",
    ortho_half_height: float | None = None,
) -> ViewGrid:
    """Ring of ``n_views`` cameras at a fixed elevation, all aimed at ``center``.

    The default orthographic window has half-height ``radius / 1.5``, which with
    the auto radius below leaves a margin of 20% around the object.
    """
    _check_radius(radius)
    half = radius / 1.5 if ortho_half_height is None else ortho_half_height
    az = tuple(math.radians(i * 360.0 / n_views) for i in range(n_views))
    el = math.radians(elevation_deg)
    poses = tuple(
        CameraPose(projection, radius, a, el, tuple(float(c) for c in center), image_size,
                   ortho_half_height=half)
        for a in az
    )
    return ViewGrid("object_ring", float(radius), az, (el,), poses)


def object_ring_for(obj: GaussianScene, **kwargs) -> ViewGrid:
    """Ring sized from the object's 3-sigma bounding sphere (radius = 1.8 x R)."""
    center, r = obj.bounding_sphere()
    return object_viewpoints(center, AUTO_RADIUS_FACTOR * r, **kwargs)


def region_of(azimuth: float) -> int:
    deg = math.degrees(azimuth) % 360.0
    # snap values a rounding error below a boundary
    return int(math.floor(deg / 90.0 + 1e-9)) % N_REGIONS


def partition_regions(ring: ViewGrid) -> list[list[int]]:
    """Split a 16-view ring into 4 quadrants of 4 view indices each."""
    if ring.kind != "object_ring" or len(ring) != RING_VIEWS:
        raise ValueError(f"expected a {RING_VIEWS}-view object ring, got {len(ring)} {ring.kind} poses")
    regions: list[list[int]] = [[] for _ in range(N_REGIONS)]
    for i, pose in enumerate(ring.poses):
        regions[region_of(pose.azimuth)].append(i)
    if any(len(r) != RING_VIEWS // N_REGIONS for r in regions):
        raise ValueError("ring azimuths are not uniformly spread over the quadrants")
    return regions
