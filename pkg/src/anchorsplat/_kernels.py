"""Numba kernels for the tile-based rasterizer hot loops.

Front-to-back alpha blending per pixel over depth-sorted tile entry lists.
Kernels parallelize over tiles; every write goes either to that tile's pixel
block or to that tile's slice of the flattened entry arrays, so results are
bit-stable regardless of thread count.

Blending rules (shared by forward and the backward replay):
  * hits outside the 3-sigma ellipse (quadratic form > 9) are skipped,
  * sigma = opacity * G clamped to 0.99, skipped when < 1/255,
  * a pixel terminates before a hit that would push transmittance below
    ``stop_t``, so sum(w) + residual transmittance = 1 exactly.
"""

import numpy as np
from numba import njit, prange

SIGMA_CLAMP = 0.99
SIGMA_SKIP = 1.0 / 255.0
CUTOFF_Q = 9.0


@njit(cache=True)
def fill_tile_entries(tx0, tx1, ty0, ty1, offsets, n_tiles_x, tile_ids, splat_ids):
    n = tx0.shape[0]
    for i in range(n):
        pos = offsets[i]
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                tile_ids[pos] = ty * n_tiles_x + tx
                splat_ids[pos] = i
                pos += 1


@njit(cache=True, parallel=True)
def tile_forward(
    tile_starts, entry_splat,
    mean2d, conic, opac, color, depthz, normalcam,
    width, height, tile, n_tiles_x, stop_t,
    out_color, out_depth_raw, out_normal_raw, out_alpha, out_trans,
    wsum_e, touched_e,
):
    n_tiles = tile_starts.shape[0] - 1
    for ti in prange(n_tiles):
        e0 = tile_starts[ti]
        e1 = tile_starts[ti + 1]
        ty = ti // n_tiles_x
        tx = ti % n_tiles_x
        py0 = ty * tile
        px0 = tx * tile
        py1 = min(py0 + tile, height)
        px1 = min(px0 + tile, width)
        for py in range(py0, py1):
            for px in range(px0, px1):
                T = 1.0
                cr = 0.0; cg = 0.0; cb = 0.0
                dacc = 0.0; aacc = 0.0
                nx = 0.0; ny = 0.0; nz = 0.0
                for e in range(e0, e1):
                    i = entry_splat[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if q > CUTOFF_Q or q < 0.0:
                        continue
                    g = np.exp(-0.5 * q)
                    s = opac[i] * g
                    if s > SIGMA_CLAMP:
                        s = SIGMA_CLAMP
                    if s < SIGMA_SKIP:
                        continue
                    Tn = T * (1.0 - s)
                    if Tn < stop_t:
                        break
                    w = s * T
                    cr += color[i, 0] * w
                    cg += color[i, 1] * w
                    cb += color[i, 2] * w
                    dacc += depthz[i] * w
                    nx += normalcam[i, 0] * w
                    ny += normalcam[i, 1] * w
                    nz += normalcam[i, 2] * w
                    aacc += w
                    wsum_e[e] += w
                    touched_e[e] += 1
                    T = Tn
                out_color[py, px, 0] = cr
                out_color[py, px, 1] = cg
                out_color[py, px, 2] = cb
                out_depth_raw[py, px] = dacc
                out_normal_raw[py, px, 0] = nx
                out_normal_raw[py, px, 1] = ny
                out_normal_raw[py, px, 2] = nz
                out_alpha[py, px] = aacc
                out_trans[py, px] = T


@njit(cache=True, parallel=True)
def tile_backward(
    tile_starts, entry_splat,
    mean2d, conic, opac, color, depthz, normalcam,
    width, height, tile, n_tiles_x, stop_t,
    g_color, g_depth_raw, g_normal_raw, g_alpha, u_bg,
    d_mean2d_e, d_conic_e, d_opac_e, d_color_e, d_depthz_e, d_normal_e,
):
    n_tiles = tile_starts.shape[0] - 1
    for ti in prange(n_tiles):
        e0 = tile_starts[ti]
        e1 = tile_starts[ti + 1]
        if e1 == e0:
            continue
        ty = ti // n_tiles_x
        tx = ti % n_tiles_x
        py0 = ty * tile
        px0 = tx * tile
        py1 = min(py0 + tile, height)
        px1 = min(px0 + tile, width)
        cap = e1 - e0
        hit_e = np.empty(cap, dtype=np.int64)
        hit_g = np.empty(cap)
        hit_s = np.empty(cap)
        hit_T = np.empty(cap)
        for py in range(py0, py1):
            for px in range(px0, px1):
                # replay the forward blend for this pixel
                T = 1.0
                cnt = 0
                for e in range(e0, e1):
                    i = entry_splat[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if q > CUTOFF_Q or q < 0.0:
                        continue
                    g = np.exp(-0.5 * q)
                    s = opac[i] * g
                    if s > SIGMA_CLAMP:
                        s = SIGMA_CLAMP
                    if s < SIGMA_SKIP:
                        continue
                    Tn = T * (1.0 - s)
                    if Tn < stop_t:
                        break
                    hit_e[cnt] = e
                    hit_g[cnt] = g
                    hit_s[cnt] = s
                    hit_T[cnt] = T
                    cnt += 1
                    T = Tn
                if cnt == 0:
                    continue
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth_raw[py, px]
                gn0 = g_normal_raw[py, px, 0]
                gn1 = g_normal_raw[py, px, 1]
                gn2 = g_normal_raw[py, px, 2]
                ga = g_alpha[py, px]
                # suffix of downstream contribution, seeded by the background
                # term (value u_bg weighted by final transmittance T)
                S = T * u_bg[py, px]
                for k in range(cnt - 1, -1, -1):
                    e = hit_e[k]
                    i = entry_splat[e]
                    g = hit_g[k]
                    s = hit_s[k]
                    Tb = hit_T[k]
                    w = s * Tb
                    u = (color[i, 0] * gc0 + color[i, 1] * gc1
                         + color[i, 2] * gc2 + depthz[i] * gd
                         + normalcam[i, 0] * gn0 + normalcam[i, 1] * gn1
                         + normalcam[i, 2] * gn2 + ga)
                    dsig = Tb * u - S / (1.0 - s)
                    S += w * u
                    d_color_e[e, 0] += w * gc0
                    d_color_e[e, 1] += w * gc1
                    d_color_e[e, 2] += w * gc2
                    d_depthz_e[e] += w * gd
                    d_normal_e[e, 0] += w * gn0
                    d_normal_e[e, 1] += w * gn1
                    d_normal_e[e, 2] += w * gn2
                    if s >= SIGMA_CLAMP:
                        continue  # clamped sigma: no path to opacity/shape
                    d_opac_e[e] += g * dsig
                    dpow = opac[i] * g * dsig  # dL/d(power), power = -q/2
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    d_conic_e[e, 0] += dpow * (-0.5 * dx * dx)
                    d_conic_e[e, 1] += dpow * (-0.5 * dx * dy)
                    d_conic_e[e, 2] += dpow * (-0.5 * dy * dx)
                    d_conic_e[e, 3] += dpow * (-0.5 * dy * dy)
                    d_mean2d_e[e, 0] += dpow * (conic[i, 0] * dx + conic[i, 1] * dy)
                    d_mean2d_e[e, 1] += dpow * (conic[i, 1] * dx + conic[i, 2] * dy)
