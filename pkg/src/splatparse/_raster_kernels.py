"""Per-tile compositing kernels (numba and numpy variants).

Both variants take gaussians already binned into tiles: ``tile_gauss`` holds
gaussian indices grouped by tile (CSR offsets in ``tile_ptr``), depth-sorted
within each tile. Arithmetic order is identical in the two paths so results
agree to the last few ulps (``exp`` implementations may differ).
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import njit, prange

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
MAHA_CUTOFF = 9.0  # 3 sigma, squared


@njit(cache=True, inline="always")
def _alpha_at(cx, cy, mx, my, c0, c1, c2, opacity):
    dx = cx - mx
    dy = cy - my
    maha = c0 * dx * dx + 2.0 * c1 * dx * dy + c2 * dy * dy
    if maha > MAHA_CUTOFF:
        return 0.0
    a = opacity * math.exp(-0.5 * maha)
    if a > ALPHA_MAX:
        a = ALPHA_MAX
    if a < ALPHA_MIN:
        return 0.0
    return a


@njit(parallel=True, cache=True)
def raster_numba(means, conics, opac, colors, feats, depths, inst, tile_ptr, tile_gauss,
                 n_tx, tile, bg, want_color, want_depth, want_feat, want_inst,
                 out_color, out_alpha, out_depth, out_feat, out_inst):
    height, width = out_alpha.shape
    n_tiles = tile_ptr.shape[0] - 1
    nf = feats.shape[1]
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        start = tile_ptr[t]
        end = tile_ptr[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            cy = py + 0.5
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                cx = px + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                best = 0.0
                label = -1
                for k in range(start, end):
                    gi = tile_gauss[k]
                    a = _alpha_at(cx, cy, means[gi, 0], means[gi, 1], conics[gi, 0],
                                  conics[gi, 1], conics[gi, 2], opac[gi])
                    if a == 0.0:
                        continue
                    w = a * trans
                    if want_color:
                        r += w * colors[gi, 0]
                        g += w * colors[gi, 1]
                        b += w * colors[gi, 2]
                    if want_feat:
                        for c in range(nf):
                            out_feat[py, px, c] += w * feats[gi, c]
                    if w > best:
                        best = w
                        label = inst[gi]
                    trans *= 1.0 - a
                final_alpha = 1.0 - trans
                out_alpha[py, px] = final_alpha
                if want_color:
                    out_color[py, px, 0] = r + trans * bg[0]
                    out_color[py, px, 1] = g + trans * bg[1]
                    out_color[py, px, 2] = b + trans * bg[2]
                if want_inst:
                    out_inst[py, px] = label
                if want_depth:
                    out_depth[py, px] = np.inf
                    if final_alpha > 0.0:
                        half = 0.5 * final_alpha
                        trans = 1.0
                        for k in range(start, end):
                            gi = tile_gauss[k]
                            a = _alpha_at(cx, cy, means[gi, 0], means[gi, 1], conics[gi, 0],
                                          conics[gi, 1], conics[gi, 2], opac[gi])
                            if a == 0.0:
                                continue
                            trans *= 1.0 - a
                            if 1.0 - trans > half:
                                out_depth[py, px] = depths[gi]
                                break


@njit(parallel=True, cache=True)
def count_contribs_numba(means, conics, opac, tile_ptr, tile_gauss, n_tx, tile, counts):
    height, width = counts.shape
    n_tiles = tile_ptr.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                n = 0
                for k in range(tile_ptr[t], tile_ptr[t + 1]):
                    gi = tile_gauss[k]
                    a = _alpha_at(px + 0.5, py + 0.5, means[gi, 0], means[gi, 1], conics[gi, 0],
                                  conics[gi, 1], conics[gi, 2], opac[gi])
                    if a != 0.0:
                        n += 1
                counts[py, px] = n


@njit(parallel=True, cache=True)
def fill_contribs_numba(means, conics, opac, tile_ptr, tile_gauss, n_tx, tile, width, height,
                        indptr, out_idx, out_w):
    n_tiles = tile_ptr.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                pos = indptr[py * width + px]
                trans = 1.0
                for k in range(tile_ptr[t], tile_ptr[t + 1]):
                    gi = tile_gauss[k]
                    a = _alpha_at(px + 0.5, py + 0.5, means[gi, 0], means[gi, 1], conics[gi, 0],
                                  conics[gi, 1], conics[gi, 2], opac[gi])
                    if a == 0.0:
                        continue
                    out_idx[pos] = gi
                    out_w[pos] = a * trans
                    pos += 1
                    trans *= 1.0 - a


def _tile_alphas(means, conics, opac, g, cx, cy):
    dx = cx[:, None] - means[g, 0][None, :]
    dy = cy[:, None] - means[g, 1][None, :]
    maha = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
    a = opac[g] * np.exp(-0.5 * maha)
    np.minimum(a, ALPHA_MAX, out=a)
    a[(maha > MAHA_CUTOFF) | (a < ALPHA_MIN)] = 0.0
    return a


def _tile_pixels(t, n_tx, tile, width, height):
    ty, tx = divmod(t, n_tx)
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def raster_numpy(means, conics, opac, colors, feats, depths, inst, tile_ptr, tile_gauss,
                 n_tx, tile, bg, want_color, want_depth, want_feat, want_inst,
                 out_color, out_alpha, out_depth, out_feat, out_inst):
    height, width = out_alpha.shape
    for t in range(len(tile_ptr) - 1):
        py, px = _tile_pixels(t, n_tx, tile, width, height)
        g = tile_gauss[tile_ptr[t]:tile_ptr[t + 1]]
        if len(g) == 0:
            out_alpha[py, px] = 0.0
            if want_color:
                out_color[py, px] = bg
            if want_inst:
                out_inst[py, px] = -1
            if want_depth:
                out_depth[py, px] = np.inf
            continue
        a = _tile_alphas(means, conics, opac, g, px + 0.5, py + 0.5)
        trans_after = np.cumprod(1.0 - a, axis=1)
        trans_before = np.empty_like(trans_after)
        trans_before[:, 0] = 1.0
        trans_before[:, 1:] = trans_after[:, :-1]
        w = a * trans_before
        trans = trans_after[:, -1]
        final_alpha = 1.0 - trans
        out_alpha[py, px] = final_alpha
        if want_color:
            out_color[py, px] = w @ colors[g] + trans[:, None] * bg[None, :]
        if want_feat:
            out_feat[py, px] = w @ feats[g]
        if want_inst:
            best = np.argmax(w, axis=1)
            lab = inst[g][best]
            lab[w[np.arange(len(best)), best] <= 0.0] = -1
            out_inst[py, px] = lab
        if want_depth:
            crossed = (1.0 - trans_after) > 0.5 * final_alpha[:, None]
            first = np.argmax(crossed, axis=1)
            d = depths[g][first]
            d[final_alpha <= 0.0] = np.inf
            out_depth[py, px] = d


def contribs_numpy(means, conics, opac, tile_ptr, tile_gauss, n_tx, tile, width, height):
    """Return (pixel, gaussian, weight) triples, grouped by pixel in depth order."""
    pix_parts, g_parts, w_parts, rank_parts = [], [], [], []
    for t in range(len(tile_ptr) - 1):
        g = tile_gauss[tile_ptr[t]:tile_ptr[t + 1]]
        if len(g) == 0:
            continue
        py, px = _tile_pixels(t, n_tx, tile, width, height)
        a = _tile_alphas(means, conics, opac, g, px + 0.5, py + 0.5)
        trans_after = np.cumprod(1.0 - a, axis=1)
        trans_before = np.ones_like(trans_after)
        trans_before[:, 1:] = trans_after[:, :-1]
        rows, cols = np.nonzero(a)
        pix_parts.append((py * width + px)[rows])
        g_parts.append(g[cols])
        w_parts.append(a[rows, cols] * trans_before[rows, cols])
        rank_parts.append(cols)
    if not pix_parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    pix = np.concatenate(pix_parts)
    gid = np.concatenate(g_parts)
    wts = np.concatenate(w_parts)
    rank = np.concatenate(rank_parts)
    order = np.lexsort((rank, pix))
    return pix[order], gid[order], wts[order]
