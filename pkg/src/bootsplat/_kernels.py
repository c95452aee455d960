"""Numba kernels for the tile rasterizer's per-pixel loops.

Splat arrays arriving here are already depth-sorted; kernels preserve that
order inside every tile so the composited result is independent of both
the caller's input order and the tile size (bitwise). No fastmath: IEEE
evaluation order is part of that guarantee.

The screen-space cutoff (squared Mahalanobis distance > R2_CUTOFF skips a
splat at a pixel) is shared between tile binning and shading, which is
what makes tile binning lossless.
"""

import numpy as np
from numba import njit

R2_CUTOFF = 60.0  # exp(-30) ~ 1e-13: far below every comparison tolerance


@njit(cache=True)
def bin_splats(u, v, rx, ry, width, height, tile, ntx, nty):
    """CSR tile lists (offsets, indices) for depth-sorted splats.

    rx/ry are the conservative half-extents of the cutoff ellipse, so any
    pixel a splat can touch lies inside its tile range.
    """
    n = u.shape[0]
    ntiles = ntx * nty
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    tx0 = np.empty(n, dtype=np.int64)
    tx1 = np.empty(n, dtype=np.int64)
    ty0 = np.empty(n, dtype=np.int64)
    ty1 = np.empty(n, dtype=np.int64)
    for s in range(n):
        x_lo = u[s] - rx[s]
        x_hi = u[s] + rx[s]
        y_lo = v[s] - ry[s]
        y_hi = v[s] + ry[s]
        if x_hi < 0.0 or x_lo > width or y_hi < 0.0 or y_lo > height:
            tx0[s], tx1[s] = 0, -1
            continue
        a = int(np.floor(x_lo / tile))
        b = int(np.floor(x_hi / tile))
        c = int(np.floor(y_lo / tile))
        d = int(np.floor(y_hi / tile))
        tx0[s] = min(max(a, 0), ntx - 1)
        tx1[s] = min(max(b, 0), ntx - 1)
        ty0[s] = min(max(c, 0), nty - 1)
        ty1[s] = min(max(d, 0), nty - 1)
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    indices = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for s in range(n):  # splat order == sorted order inside each tile
        if tx1[s] < tx0[s]:
            continue
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                t = ty * ntx + tx
                indices[fill[t]] = s
                fill[t] += 1
    return offsets, indices


@njit(cache=True)
def forward(u, v, qa, qb, qc, alpha, color, depth, offsets, indices,
            width, height, tile, ntx, nty, stop_eps,
            image, alpha_map, depth_map, contrib):
    """Front-to-back alpha blending; outputs written in place."""
    for t in range(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        lo = offsets[t]
        hi = offsets[t + 1]
        for py in range(ty * tile, y_end):
            yc = py + 0.5
            for px in range(tx * tile, x_end):
                xc = px + 0.5
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                n_hit = 0
                for k in range(lo, hi):
                    s = indices[k]
                    dx = xc - u[s]
                    dy = yc - v[s]
                    maha = qa[s] * dx * dx + 2.0 * qb[s] * dx * dy + qc[s] * dy * dy
                    if maha > R2_CUTOFF:
                        continue
                    sigma = alpha[s] * np.exp(-0.5 * maha)
                    w = sigma * trans
                    c0 += color[s, 0] * w
                    c1 += color[s, 1] * w
                    c2 += color[s, 2] * w
                    dsum += depth[s] * w
                    trans *= 1.0 - sigma
                    n_hit += 1
                    if trans < stop_eps:
                        break
                image[py, px, 0] = c0
                image[py, px, 1] = c1
                image[py, px, 2] = c2
                alpha_map[py, px] = 1.0 - trans
                depth_map[py, px] = dsum
                contrib[py, px] = n_hit


@njit(cache=True)
def backward(u, v, qa, qb, qc, alpha, color, offsets, indices,
             width, height, tile, ntx, nty, stop_eps, dl_dimage,
             g_u, g_v, g_qa, g_qb, g_qc, g_alpha, g_color):
    """Per-splat gradients of the blend; replays the forward walk, then
    runs the suffix recursion back-to-front within each pixel."""
    max_n = 0
    for t in range(ntx * nty):
        span = offsets[t + 1] - offsets[t]
        if span > max_n:
            max_n = span
    hit_idx = np.empty(max_n, dtype=np.int64)
    hit_sigma = np.empty(max_n)
    hit_tprev = np.empty(max_n)
    hit_g = np.empty(max_n)

    for t in range(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        lo = offsets[t]
        hi = offsets[t + 1]
        if lo == hi:
            continue
        for py in range(ty * tile, y_end):
            yc = py + 0.5
            for px in range(tx * tile, x_end):
                xc = px + 0.5
                dl0 = dl_dimage[py, px, 0]
                dl1 = dl_dimage[py, px, 1]
                dl2 = dl_dimage[py, px, 2]
                trans = 1.0
                n_hit = 0
                for k in range(lo, hi):
                    s = indices[k]
                    dx = xc - u[s]
                    dy = yc - v[s]
                    maha = qa[s] * dx * dx + 2.0 * qb[s] * dx * dy + qc[s] * dy * dy
                    if maha > R2_CUTOFF:
                        continue
                    g = np.exp(-0.5 * maha)
                    sigma = alpha[s] * g
                    hit_idx[n_hit] = s
                    hit_sigma[n_hit] = sigma
                    hit_tprev[n_hit] = trans
                    hit_g[n_hit] = g
                    trans *= 1.0 - sigma
                    n_hit += 1
                    if trans < stop_eps:
                        break
                if n_hit == 0:
                    continue
                # suffix sum over later contributions, walked back-to-front
                accum = 0.0
                for j in range(n_hit - 1, -1, -1):
                    s = hit_idx[j]
                    sigma = hit_sigma[j]
                    tprev = hit_tprev[j]
                    g = hit_g[j]
                    b = dl0 * color[s, 0] + dl1 * color[s, 1] + dl2 * color[s, 2]
                    w = sigma * tprev
                    om = 1.0 - sigma
                    if om < 1e-12:  # saturated splat: nothing blends behind it
                        om = 1e-12
                    dsigma = tprev * b - accum / om
                    accum += b * w
                    g_color[s, 0] += dl0 * w
                    g_color[s, 1] += dl1 * w
                    g_color[s, 2] += dl2 * w
                    g_alpha[s] += dsigma * g
                    gmaha = -0.5 * g * dsigma * alpha[s]
                    dx = xc - u[s]
                    dy = yc - v[s]
                    mx = 2.0 * qa[s] * dx + 2.0 * qb[s] * dy
                    my = 2.0 * qb[s] * dx + 2.0 * qc[s] * dy
                    g_u[s] -= gmaha * mx
                    g_v[s] -= gmaha * my
                    g_qa[s] += gmaha * dx * dx
                    g_qb[s] += gmaha * 2.0 * dx * dy
                    g_qc[s] += gmaha * dy * dy
