"""Deterministic tiled software rasterizer for Gaussian splats.

Per pixel, gaussians are composited front to back in view-depth order
(ties broken by input index):

    out = sum_i c_i a_i prod_{j<i} (1 - a_j)

Channels: ``color`` (over the background colour), ``alpha``, ``depth``
(depth of the gaussian at which accumulated alpha first exceeds half of the
final alpha, +inf where nothing is drawn), ``feature`` (weighted sum of
per-gaussian features, no background term) and ``instance`` (label of the
single largest contributor, -1 for background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _raster_kernels as K
from ._accel import resolve_backend
from .camera import CameraPose, project_scene
from .gaussians import FEATURE_DIM, GaussianScene

TILE_SIZE = 16
ALL_CHANNELS = frozenset({"color", "alpha", "depth", "feature", "instance"})
BACKGROUND_LABEL = -1


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray | None = None
    alpha: np.ndarray | None = None
    depth: np.ndarray | None = None
    feature: np.ndarray | None = None
    instance_map: np.ndarray | None = None


@dataclass(frozen=True)
class Binned:
    """Screen-space gaussians binned into tiles."""

    means: np.ndarray
    conics: np.ndarray
    opacities: np.ndarray
    depths: np.ndarray
    tile_ptr: np.ndarray
    tile_gauss: np.ndarray
    n_tx: int
    tile: int
    width: int
    height: int


def bin_gaussians(scene: GaussianScene, cam: CameraPose, tile: int = TILE_SIZE) -> Binned:
    width, height = cam.image_size
    n_tx = -(-width // tile)
    n_ty = -(-height // tile)
    proj = project_scene(scene, cam)
    n = len(scene)
    conics = np.zeros((n, 3))
    keep = proj.valid & (scene.opacities > 0)
    covs = proj.covs
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
    keep &= det > 0
    d = np.where(keep, det, 1.0)
    conics[:, 0] = covs[:, 1, 1] / d
    conics[:, 1] = -covs[:, 0, 1] / d
    conics[:, 2] = covs[:, 0, 0] / d
    means = np.where(keep[:, None], proj.means, 0.0)

    # exact 3-sigma extent of the ellipse along each axis, padded against rounding
    rx = 3.0 * np.sqrt(np.where(keep, covs[:, 0, 0], 0.0)) + 1e-6
    ry = 3.0 * np.sqrt(np.where(keep, covs[:, 1, 1], 0.0)) + 1e-6
    px0 = np.clip(np.ceil(means[:, 0] - rx - 0.5), 0, width - 1).astype(np.int64)
    px1 = np.clip(np.floor(means[:, 0] + rx - 0.5), -1, width - 1).astype(np.int64)
    py0 = np.clip(np.ceil(means[:, 1] - ry - 0.5), 0, height - 1).astype(np.int64)
    py1 = np.clip(np.floor(means[:, 1] + ry - 0.5), -1, height - 1).astype(np.int64)
    keep &= (px1 >= px0) & (py1 >= py0)
    keep &= (means[:, 0] + rx > 0) & (means[:, 0] - rx < width)
    keep &= (means[:, 1] + ry > 0) & (means[:, 1] - ry < height)

    order = np.argsort(proj.depths, kind="stable")
    order = order[keep[order]]
    tx0, tx1 = px0[order] // tile, px1[order] // tile
    ty0, ty1 = py0[order] // tile, py1[order] // tile
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    per = nx * ny
    total = int(per.sum())
    owner = np.repeat(np.arange(len(order)), per)
    local = np.arange(total) - np.repeat(np.cumsum(per) - per, per)
    tid = (ty0[owner] + local // nx[owner]) * n_tx + tx0[owner] + local % nx[owner]
    # owner is already depth rank, so a stable sort on tile id keeps depth order per tile
    srt = np.argsort(tid, kind="stable")
    tile_gauss = order[owner[srt]].astype(np.int64)
    counts = np.bincount(tid, minlength=n_tx * n_ty)
    tile_ptr = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_ptr[1:])
    return Binned(np.ascontiguousarray(means), conics, np.ascontiguousarray(scene.opacities),
                  proj.depths, tile_ptr, tile_gauss, n_tx, tile, width, height)


def _normalize_channels(channels) -> frozenset:
    if channels is None:
        return ALL_CHANNELS
    if isinstance(channels, str):
        channels = {channels}
    chans = frozenset(channels)
    unknown = chans - ALL_CHANNELS
    if unknown:
        raise ValueError(f"unknown channels: {sorted(unknown)}")
    return chans


def render(scene: GaussianScene, cam: CameraPose, channels=None, *, backend: str | None = None,
           tile: int = TILE_SIZE) -> RenderOutput:
    """Rasterize ``scene`` from ``cam``; only the requested ``channels`` are produced."""
    chans = _normalize_channels(channels)
    if not chans:
        return RenderOutput()
    backend = resolve_backend(backend)
    width, height = cam.image_size
    b = bin_gaussians(scene, cam, tile)

    want_color = "color" in chans
    want_depth = "depth" in chans
    want_feat = "feature" in chans
    want_inst = "instance" in chans
    out_color = np.zeros((height, width, 3) if want_color else (1, 1, 3))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width) if want_depth else (1, 1))
    out_feat = np.zeros((height, width, FEATURE_DIM) if want_feat else (1, 1, FEATURE_DIM))
    out_inst = np.full((height, width) if want_inst else (1, 1), BACKGROUND_LABEL, dtype=np.int64)

    kernel = K.raster_numba if backend == "numba" else K.raster_numpy
    kernel(b.means, b.conics, b.opacities, np.ascontiguousarray(scene.colors),
           np.ascontiguousarray(scene.features), b.depths, np.ascontiguousarray(scene.instance_ids),
           b.tile_ptr, b.tile_gauss, b.n_tx, tile, np.ascontiguousarray(scene.background_color),
           want_color, want_depth, want_feat, want_inst,
           out_color, out_alpha, out_depth, out_feat, out_inst)
    return RenderOutput(
        color=out_color if want_color else None,
        alpha=out_alpha if "alpha" in chans else None,
        depth=out_depth if want_depth else None,
        feature=out_feat if want_feat else None,
        instance_map=out_inst if want_inst else None,
    )


def feature_weights(scene: GaussianScene, cam: CameraPose, *, backend: str | None = None,
                    tile: int = TILE_SIZE) -> sp.csr_matrix:
    """Compositing weights as a sparse (H*W, n_gaussians) matrix.

    For fixed geometry the feature render is linear, ``F = W @ features``,
    and its adjoint gives the feature gradient.
    """
    backend = resolve_backend(backend)
    width, height = cam.image_size
    b = bin_gaussians(scene, cam, tile)
    n_pix = width * height
    if backend == "numba":
        counts = np.zeros((height, width), dtype=np.int64)
        K.count_contribs_numba(b.means, b.conics, b.opacities, b.tile_ptr, b.tile_gauss,
                               b.n_tx, tile, counts)
        indptr = np.zeros(n_pix + 1, dtype=np.int64)
        np.cumsum(counts.ravel(), out=indptr[1:])
        idx = np.zeros(indptr[-1], dtype=np.int64)
        wts = np.zeros(indptr[-1])
        K.fill_contribs_numba(b.means, b.conics, b.opacities, b.tile_ptr, b.tile_gauss,
                              b.n_tx, tile, width, height, indptr, idx, wts)
    else:
        pix, idx, wts = K.contribs_numpy(b.means, b.conics, b.opacities, b.tile_ptr,
                                         b.tile_gauss, b.n_tx, tile, width, height)
        indptr = np.zeros(n_pix + 1, dtype=np.int64)
        np.cumsum(np.bincount(pix, minlength=n_pix), out=indptr[1:])
    return sp.csr_matrix((wts, idx, indptr), shape=(n_pix, len(scene)))


def render_feature_grad(scene: GaussianScene, cam: CameraPose, pixel_loss_grads: np.ndarray, *,
                        weights: sp.spmatrix | None = None, backend: str | None = None) -> np.ndarray:
    """Per-gaussian feature gradient: sum over pixels of w_g(p) * dL/dF(p)."""
    width, height = cam.image_size
    grads = np.asarray(pixel_loss_grads, dtype=np.float64)
    if grads.shape != (height, width, FEATURE_DIM):
        raise ValueError(f"pixel_loss_grads must have shape {(height, width, FEATURE_DIM)}, got {grads.shape}")
    if weights is None:
        weights = feature_weights(scene, cam, backend=backend)
    return np.asarray(weights.T @ grads.reshape(-1, FEATURE_DIM))
