"""Numba kernels for the raster forward/backward passes and footprint sums.

Compositing is tile-binned: primitives are bucketed into 16x16 pixel tiles in
global compositing order, then each tile walks its bucket gaussian-major while
per-pixel transmittance lives in a tile-local scratch row. Tiles rows are the
parallel unit; every tile row writes only its own image rows and its own slice
of the per-gaussian accumulator buffers, so results are independent of thread
count and schedule. Accumulator buffers are reduced row-major by the caller.

All float arrays of one call must share a dtype (float32 or float64); numba
specializes per dtype. `t_min` is the early-termination transmittance: a pixel
stops compositing once its transmittance falls below it (0 disables, making
the pass exact over the 3-sigma footprint boxes).
"""

import math

import numpy as np
from numba import njit, prange

TILE = 16


@njit(cache=True)
def bin_tiles(boxes, order, H, W):
    """CSR buckets of primitive ids per tile, in compositing order.

    boxes: (n, 4) int64 inclusive pixel bounds (x0, x1, y0, y1), may lie
    outside the image. Returns (offsets, idx) with idx holding positions into
    `order`'s sequence (i.e. already-ordered primitive ids).
    """
    tx = (W + TILE - 1) // TILE
    ty = (H + TILE - 1) // TILE
    n_tiles = tx * ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    n = order.shape[0]
    for oi in range(n):
        k = order[oi]
        if boxes[k, 1] < 0 or boxes[k, 0] > W - 1 or boxes[k, 3] < 0 or boxes[k, 2] > H - 1:
            continue
        if boxes[k, 1] < boxes[k, 0] or boxes[k, 3] < boxes[k, 2]:
            continue
        tx0 = max(0, boxes[k, 0]) // TILE
        tx1 = min(W - 1, boxes[k, 1]) // TILE
        ty0 = max(0, boxes[k, 2]) // TILE
        ty1 = min(H - 1, boxes[k, 3]) // TILE
        for tyi in range(ty0, ty1 + 1):
            for txi in range(tx0, tx1 + 1):
                counts[tyi * tx + txi + 1] += 1
    offsets = np.cumsum(counts)
    idx = np.zeros(offsets[-1], dtype=np.int32)
    fill = offsets[:-1].copy()
    for oi in range(n):
        k = order[oi]
        if boxes[k, 1] < 0 or boxes[k, 0] > W - 1 or boxes[k, 3] < 0 or boxes[k, 2] > H - 1:
            continue
        if boxes[k, 1] < boxes[k, 0] or boxes[k, 3] < boxes[k, 2]:
            continue
        tx0 = max(0, boxes[k, 0]) // TILE
        tx1 = min(W - 1, boxes[k, 1]) // TILE
        ty0 = max(0, boxes[k, 2]) // TILE
        ty1 = min(H - 1, boxes[k, 3]) // TILE
        for tyi in range(ty0, ty1 + 1):
            for txi in range(tx0, tx1 + 1):
                t = tyi * tx + txi
                idx[fill[t]] = k
                fill[t] += 1
    return offsets, idx


@njit(parallel=True, cache=True)
def forward(mu_p, q3, alpha, color, boxes, offsets, tidx, H, W, bg, t_min,
            want_bw, image, T_fin, n_contrib, bw_rows, scratch_T):
    """Front-to-back alpha compositing over tile buckets.

    image must be zero-initialized; n_contrib zero-initialized. scratch_T has
    shape (ty, TILE*TILE). bw_rows (ty, n) receives per-tile-row blend-weight
    sums (alpha * G * T per covered pixel) when want_bw is nonzero.
    """
    tx = (W + TILE - 1) // TILE
    ty = (H + TILE - 1) // TILE
    for trow in prange(ty):
        y0 = trow * TILE
        y1 = min(H, y0 + TILE)
        th = y1 - y0
        for tcol in range(tx):
            x0 = tcol * TILE
            x1 = min(W, x0 + TILE)
            tw = x1 - x0
            t = trow * tx + tcol
            lo = offsets[t]
            hi = offsets[t + 1]
            for li in range(th * tw):
                scratch_T[trow, li] = 1.0
            for ii in range(lo, hi):
                k = tidx[ii]
                bx0 = max(x0, boxes[k, 0])
                bx1 = min(x1 - 1, boxes[k, 1])
                by0 = max(y0, boxes[k, 2])
                by1 = min(y1 - 1, boxes[k, 3])
                if bx1 < bx0 or by1 < by0:
                    continue
                mx = mu_p[k, 0]
                my = mu_p[k, 1]
                qa = q3[k, 0]
                qb = q3[k, 1]
                qc = q3[k, 2]
                ak = alpha[k]
                c0 = color[k, 0]
                c1 = color[k, 1]
                c2 = color[k, 2]
                bwk = 0.0
                rel = ii - lo + 1
                for py in range(by0, by1 + 1):
                    dy = py - my
                    row = (py - y0) * tw - x0
                    for px in range(bx0, bx1 + 1):
                        li = row + px
                        T = scratch_T[trow, li]
                        if T < t_min:
                            continue
                        dx = px - mx
                        q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                        G = math.exp(-0.5 * q)
                        a = ak * G
                        if a > 0.99:
                            a = 0.99
                        w = a * T
                        image[py, px, 0] += c0 * w
                        image[py, px, 1] += c1 * w
                        image[py, px, 2] += c2 * w
                        bwk += w
                        scratch_T[trow, li] = T * (1.0 - a)
                        n_contrib[py, px] = rel
                if want_bw != 0:
                    bw_rows[trow, k] += bwk
            for py in range(y0, y1):
                row = (py - y0) * tw - x0
                for px in range(x0, x1):
                    T = scratch_T[trow, row + px]
                    image[py, px, 0] += bg[0] * T
                    image[py, px, 1] += bg[1] * T
                    image[py, px, 2] += bg[2] * T
                    T_fin[py, px] = T


@njit(parallel=True, cache=True)
def backward(mu_p, q3, alpha, color, boxes, offsets, tidx, H, W, bg,
             dLdC, T_fin, n_contrib, grad_rows, scratch_T, scratch_S):
    """Reverse compositing pass: per-gaussian gradients of sum(dLdC * C).

    grad_rows has shape (ty, n, 9): d/d(color r,g,b), d/d(activated alpha),
    d/d(mu_p x,y), d/d(inverse-covariance qa,qb,qc). Transmittance is
    reconstructed in reverse by division; the forward alpha clamp at 0.99
    zeroes every gradient path except color for clamped contributions.
    scratch_T: (ty, TILE*TILE); scratch_S: (ty, TILE*TILE, 3).
    """
    tx = (W + TILE - 1) // TILE
    ty = (H + TILE - 1) // TILE
    for trow in prange(ty):
        y0 = trow * TILE
        y1 = min(H, y0 + TILE)
        th = y1 - y0
        for tcol in range(tx):
            x0 = tcol * TILE
            x1 = min(W, x0 + TILE)
            tw = x1 - x0
            t = trow * tx + tcol
            lo = offsets[t]
            hi = offsets[t + 1]
            if hi == lo:
                continue
            for py in range(y0, y1):
                row = (py - y0) * tw - x0
                for px in range(x0, x1):
                    li = row + px
                    T = T_fin[py, px]
                    scratch_T[trow, li] = T
                    scratch_S[trow, li, 0] = bg[0] * T
                    scratch_S[trow, li, 1] = bg[1] * T
                    scratch_S[trow, li, 2] = bg[2] * T
            for ii in range(hi - 1, lo - 1, -1):
                k = tidx[ii]
                bx0 = max(x0, boxes[k, 0])
                bx1 = min(x1 - 1, boxes[k, 1])
                by0 = max(y0, boxes[k, 2])
                by1 = min(y1 - 1, boxes[k, 3])
                if bx1 < bx0 or by1 < by0:
                    continue
                mx = mu_p[k, 0]
                my = mu_p[k, 1]
                qa = q3[k, 0]
                qb = q3[k, 1]
                qc = q3[k, 2]
                ak = alpha[k]
                c0 = color[k, 0]
                c1 = color[k, 1]
                c2 = color[k, 2]
                rel = ii - lo + 1
                gc0 = 0.0
                gc1 = 0.0
                gc2 = 0.0
                gal = 0.0
                gmx = 0.0
                gmy = 0.0
                gqa = 0.0
                gqb = 0.0
                gqc = 0.0
                for py in range(by0, by1 + 1):
                    dy = py - my
                    row = (py - y0) * tw - x0
                    for px in range(bx0, bx1 + 1):
                        li = row + px
                        if rel > n_contrib[py, px]:
                            continue
                        dx = px - mx
                        q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                        G = math.exp(-0.5 * q)
                        a = ak * G
                        clamped = a > 0.99
                        if clamped:
                            a = 0.99
                        one_m = 1.0 - a
                        T = scratch_T[trow, li] / one_m
                        w = a * T
                        dl0 = dLdC[py, px, 0]
                        dl1 = dLdC[py, px, 1]
                        dl2 = dLdC[py, px, 2]
                        gc0 += dl0 * w
                        gc1 += dl1 * w
                        gc2 += dl2 * w
                        s0 = scratch_S[trow, li, 0]
                        s1 = scratch_S[trow, li, 1]
                        s2 = scratch_S[trow, li, 2]
                        if not clamped:
                            ga = (dl0 * (c0 * T - s0 / one_m)
                                  + dl1 * (c1 * T - s1 / one_m)
                                  + dl2 * (c2 * T - s2 / one_m))
                            gal += ga * G
                            dldq = -0.5 * G * (ga * ak)
                            qdx = qa * dx + qb * dy
                            qdy = qb * dx + qc * dy
                            gmx += dldq * (-2.0) * qdx
                            gmy += dldq * (-2.0) * qdy
                            gqa += dldq * dx * dx
                            gqb += dldq * 2.0 * dx * dy
                            gqc += dldq * dy * dy
                        scratch_S[trow, li, 0] = s0 + c0 * w
                        scratch_S[trow, li, 1] = s1 + c1 * w
                        scratch_S[trow, li, 2] = s2 + c2 * w
                        scratch_T[trow, li] = T
                grad_rows[trow, k, 0] += gc0
                grad_rows[trow, k, 1] += gc1
                grad_rows[trow, k, 2] += gc2
                grad_rows[trow, k, 3] += gal
                grad_rows[trow, k, 4] += gmx
                grad_rows[trow, k, 5] += gmy
                grad_rows[trow, k, 6] += gqa
                grad_rows[trow, k, 7] += gqb
                grad_rows[trow, k, 8] += gqc


@njit(parallel=True, cache=True)
def footprint_sums(mu_p, q3, alpha, boxes, H, W, out):
    """Per-primitive sum of alpha * G over its clipped footprint box."""
    n = mu_p.shape[0]
    for k in prange(n):
        bx0 = max(0, boxes[k, 0])
        bx1 = min(W - 1, boxes[k, 1])
        by0 = max(0, boxes[k, 2])
        by1 = min(H - 1, boxes[k, 3])
        acc = 0.0
        if bx1 >= bx0 and by1 >= by0:
            mx = mu_p[k, 0]
            my = mu_p[k, 1]
            qa = q3[k, 0]
            qb = q3[k, 1]
            qc = q3[k, 2]
            for py in range(by0, by1 + 1):
                dy = py - my
                for px in range(bx0, bx1 + 1):
                    dx = px - mx
                    q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                    acc += math.exp(-0.5 * q)
        out[k] = alpha[k] * acc
