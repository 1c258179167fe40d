"""Splat voxelization kernels: mark cells whose centre lies within 1 sigma of a gaussian."""

from __future__ import annotations

import numpy as np

from ._accel import njit, prange


@njit(cache=True, inline="always")
def _maha(a, dx, dy, dz):
    return (a[0] * dx * dx + a[3] * dy * dy + a[5] * dz * dz
            + 2.0 * (a[1] * dx * dy + a[2] * dx * dz + a[4] * dy * dz))


@njit(parallel=True, cache=True)
def voxelize_numba(means, inv_cov, lo_idx, hi_idx, origin, width, out):
    # one x-slab per worker so no two workers write the same cell
    n = out.shape[0]
    for ix in prange(n):
        cx = origin[0] + (ix + 0.5) * width[0]
        for g in range(means.shape[0]):
            if ix < lo_idx[g, 0] or ix > hi_idx[g, 0]:
                continue
            a = inv_cov[g]
            dx = cx - means[g, 0]
            for iy in range(lo_idx[g, 1], hi_idx[g, 1] + 1):
                dy = origin[1] + (iy + 0.5) * width[1] - means[g, 1]
                for iz in range(lo_idx[g, 2], hi_idx[g, 2] + 1):
                    if out[ix, iy, iz]:
                        continue
                    dz = origin[2] + (iz + 0.5) * width[2] - means[g, 2]
                    if _maha(a, dx, dy, dz) <= 1.0:
                        out[ix, iy, iz] = 1


def voxelize_numpy(means, inv_cov, lo_idx, hi_idx, origin, width, out):
    for g in range(len(means)):
        if np.any(hi_idx[g] < lo_idx[g]):
            continue
        ix, iy, iz = (np.arange(lo_idx[g, k], hi_idx[g, k] + 1) for k in range(3))
        dx = (origin[0] + (ix + 0.5) * width[0] - means[g, 0])[:, None, None]
        dy = (origin[1] + (iy + 0.5) * width[1] - means[g, 1])[None, :, None]
        dz = (origin[2] + (iz + 0.5) * width[2] - means[g, 2])[None, None, :]
        a = inv_cov[g]
        maha = (a[0] * dx * dx + a[3] * dy * dy + a[5] * dz * dz
                + 2.0 * (a[1] * dx * dy + a[2] * dx * dz + a[4] * dy * dz))
        block = out[ix[0]:ix[-1] + 1, iy[0]:iy[-1] + 1, iz[0]:iz[-1] + 1]
        block |= (maha <= 1.0).astype(out.dtype)


def index_bounds(means, std, origin, width, n):
    """Inclusive cell index range covering each gaussian's 1-sigma box, clipped to the grid."""
    lo = np.ceil((means - std - origin) / width - 0.5).astype(np.int64)
    hi = np.floor((means + std - origin) / width - 0.5).astype(np.int64)
    return np.clip(lo, 0, n), np.clip(hi, -1, n - 1)


def pack_inverse(cov: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(cov)
    return np.ascontiguousarray(np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 0, 2],
                                          inv[:, 1, 1], inv[:, 1, 2], inv[:, 2, 2]], axis=1))
