"""Occupancy grids and the toy structure latent (pooled occupancy plus centroid offsets)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from . import _voxel_kernels as K
from . import io
from ._accel import resolve_backend
from .gaussians import GaussianScene

LATENT_CHANNELS = 4
POOL_FACTOR = 4
DEFAULT_DOMAIN = (-1.0, 1.0)


def _domain_bounds(domain) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(domain, dtype=np.float64)
    if d.shape == (2,):
        lo, hi = np.full(3, d[0]), np.full(3, d[1])
    elif d.shape == (2, 3):
        lo, hi = d[0].copy(), d[1].copy()
    else:
        raise ValueError(f"domain must be (lo, hi) or a 2 x 3 array, got shape {d.shape}")
    if np.any(hi <= lo):
        raise ValueError("domain upper bounds must exceed lower bounds")
    return lo, hi


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray  # uint8, (N, N, N), indexed [x, y, z]
    domain: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.0,) * 3, (1.0,) * 3)

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ValueError(f"occupancy must be a cube, got shape {occ.shape}")
        if occ.shape[0] < 4:
            raise ValueError(f"resolution must be at least 4, got {occ.shape[0]}")
        if not np.isin(occ, (0, 1)).all():
            raise ValueError("occupancy must be binary")
        lo, hi = _domain_bounds(self.domain)
        occ = occ.astype(np.uint8)
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "domain", (tuple(lo.tolist()), tuple(hi.tolist())))

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def cell_width(self) -> np.ndarray:
        lo, hi = np.asarray(self.domain)
        return (hi - lo) / self.resolution

    def cell_centers(self) -> np.ndarray:
        """(N, N, N, 3) array of cell-centre coordinates."""
        lo = np.asarray(self.domain[0])
        axes = [lo[k] + (np.arange(self.resolution) + 0.5) * self.cell_width[k] for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def occupied_centers(self) -> np.ndarray:
        return self.cell_centers()[self.occupancy.astype(bool)]

    def fraction(self) -> float:
        return float(self.occupancy.mean())


def voxelize(geometry: GaussianScene | Callable[[np.ndarray], np.ndarray], n: int, domain=DEFAULT_DOMAIN, *,
             backend: str | None = None) -> VoxelGrid:
    """Occupancy of cell centres.

    ``geometry`` is either an implicit inside-test taking an (M, 3) point array,
    or a gaussian scene, in which case a cell is occupied when its centre lies
    within one standard deviation of some gaussian.
    """
    if n < 4:
        raise ValueError(f"resolution must be at least 4, got {n}")
    lo, hi = _domain_bounds(domain)
    width = (hi - lo) / n
    dom = (tuple(lo), tuple(hi))
    if not isinstance(geometry, GaussianScene):
        probe = VoxelGrid(np.zeros((n, n, n), np.uint8), dom)
        inside = np.asarray(geometry(probe.cell_centers().reshape(-1, 3)), dtype=bool)
        return VoxelGrid(inside.reshape(n, n, n).astype(np.uint8), dom)

    out = np.zeros((n, n, n), dtype=np.uint8)
    if len(geometry) == 0:
        warnings.warn("voxelizing empty geometry; grid is all zeros", stacklevel=2)
        return VoxelGrid(out, dom)
    cov = geometry.covariances()
    std = np.sqrt(np.einsum("gii->gi", cov))
    lo_idx, hi_idx = K.index_bounds(geometry.positions, std, lo, width, n)
    means = np.ascontiguousarray(geometry.positions)
    inv = K.pack_inverse(cov)
    kernel = K.voxelize_numba if resolve_backend(backend) == "numba" else K.voxelize_numpy
    kernel(means, inv, lo_idx, hi_idx, lo, width, out)
    return VoxelGrid(out, dom)


def fill_interior(grid: VoxelGrid) -> VoxelGrid:
    """Occupy cells enclosed by the occupied shell (closed surfaces become solids)."""
    filled = ndimage.binary_fill_holes(grid.occupancy.astype(bool))
    return VoxelGrid(filled.astype(np.uint8), grid.domain)


def voxelize_solid(scene: GaussianScene, n: int, domain=DEFAULT_DOMAIN, *, extent: float = 3.0,
                   backend: str | None = None) -> VoxelGrid:
    """Solid occupancy of a splat surface: each gaussian covers ``extent`` sigma
    (its rendered footprint), then enclosed cells are filled."""
    grown = scene.replace(scales=scene.scales * extent) if len(scene) else scene
    return fill_interior(voxelize(grown, n, domain, backend=backend))


def sphere_test(radius: float, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.sum((p - c) ** 2, axis=1) <= radius * radius


def box_test(half_extents, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    return lambda p: np.all(np.abs(p - c) <= h, axis=1)


def cylinder_test(radius: float, half_height: float, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: (np.sum((p[:, :2] - c[:2]) ** 2, axis=1) <= radius * radius) & (np.abs(p[:, 2] - c[2]) <= half_height)


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray  # (D, D, D, C)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 4 or len(set(v.shape[:3])) != 1:
            raise ValueError(f"latent must be D x D x D x C, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, resolution: int, channels: int = LATENT_CHANNELS) -> LatentGrid:
        return cls(np.asarray(flat).reshape(resolution, resolution, resolution, channels))


def _pool_blocks(occ: np.ndarray, d: int) -> np.ndarray:
    n = occ.shape[0]
    if d < 1 or n % d:
        raise ValueError(f"latent resolution {d} does not divide voxel resolution {n}")
    f = n // d
    return occ.reshape(d, f, d, f, d, f).transpose(0, 2, 4, 1, 3, 5).astype(np.float64)


def encode_structure(grid: VoxelGrid, d: int | None = None) -> LatentGrid:
    """Pool occupancy into D^3 cells.

    Channel 0 is ``2 * fill - 1``; channels 1-3 hold the centroid of the occupied
    sub-cells relative to the cell centre, in units of the cell half-width
    (zero for empty cells).
    """
    n = grid.resolution
    d = n // POOL_FACTOR if d is None else d
    blocks = _pool_blocks(grid.occupancy, d)
    f = n // d
    count = blocks.sum(axis=(3, 4, 5))
    sub = (np.arange(f) + 0.5) / f * 2.0 - 1.0
    out = np.zeros((d, d, d, LATENT_CHANNELS))
    out[..., 0] = 2.0 * count / f ** 3 - 1.0
    safe = np.maximum(count, 1.0)
    out[..., 1] = np.einsum("abcijk,i->abc", blocks, sub) / safe
    out[..., 2] = np.einsum("abcijk,j->abc", blocks, sub) / safe
    out[..., 3] = np.einsum("abcijk,k->abc", blocks, sub) / safe
    return LatentGrid(out)


def pooled_occupancy(latent: LatentGrid) -> np.ndarray:
    return (latent.values[..., 0] > 0.0).astype(np.uint8)


def decode_structure(latent: LatentGrid, n: int | None = None, domain=DEFAULT_DOMAIN) -> VoxelGrid:
    """Threshold channel 0 at zero and fill each latent cell's block of voxels."""
    d = latent.resolution
    n = d * POOL_FACTOR if n is None else n
    if n % d:
        raise ValueError(f"latent resolution {d} does not divide voxel resolution {n}")
    f = n // d
    occ = pooled_occupancy(latent)
    full = np.repeat(np.repeat(np.repeat(occ, f, axis=0), f, axis=1), f, axis=2)
    lo, hi = _domain_bounds(domain)
    return VoxelGrid(full, (tuple(lo), tuple(hi)))


def voxel_iou(a: VoxelGrid | np.ndarray, b: VoxelGrid | np.ndarray) -> float:
    x = np.asarray(a.occupancy if isinstance(a, VoxelGrid) else a, dtype=bool)
    y = np.asarray(b.occupancy if isinstance(b, VoxelGrid) else b, dtype=bool)
    union = np.count_nonzero(x | y)
    return 1.0 if union == 0 else np.count_nonzero(x & y) / union


def voxels_to_gaussians(grid: VoxelGrid, *, color=(0.6, 0.6, 0.6), opacity: float = 0.9,
                        label: int = -1) -> GaussianScene:
    """One isotropic gaussian per occupied cell, sigma = half the cell width.

    Voxelizing the result at the same resolution gives back the same grid.
    """
    centers = grid.occupied_centers()
    m = len(centers)
    sigma = 0.5 * grid.cell_width
    return GaussianScene(centers, np.tile(sigma, (m, 1)), np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)),
                         np.full(m, opacity), np.tile(np.asarray(color, dtype=np.float64), (m, 1)),
                         instance_ids=np.full(m, label))


def write_voxels(path, grid: VoxelGrid):
    return io.write_raw(path, grid.occupancy, kind="voxel_grid", resolution=grid.resolution,
                        domain=[list(grid.domain[0]), list(grid.domain[1])])


def read_voxels(path) -> VoxelGrid:
    arr, meta = io.read_raw(path)
    return VoxelGrid(arr, tuple(tuple(x) for x in meta["domain"]))


def write_latent(path, latent: LatentGrid):
    return io.write_raw(path, latent.values.astype(np.float32), kind="latent_grid",
                        resolution=latent.resolution, channels=latent.channels)


def read_latent(path) -> LatentGrid:
    arr, _ = io.read_raw(path)
    return LatentGrid(arr.astype(np.float64))


def primitive_library(rng, n: int, resolution: int = 16) -> list[VoxelGrid]:
    """Random solid boxes, spheres and cylinders for training the toy flow.

    Sizes match objects normalised by their half-extents, which reach close
    to the faces of [-1, 1]^3.
    """
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(n):
        kind = rng.integers(3)
        center = rng.uniform(-0.1, 0.1, 3)
        if kind == 0:
            test = box_test(rng.uniform(0.6, 1.0, 3), center)
        elif kind == 1:
            test = sphere_test(rng.uniform(0.7, 1.05), center)
        else:
            test = cylinder_test(rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), center)
        out.append(voxelize(test, resolution))
    return out
