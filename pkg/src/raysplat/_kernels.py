"""Compiled per-pixel compositing loops for the rasterizer.

Both kernels walk each pixel's depth-ordered candidate list (the list of the
16x16 tile holding the pixel) and reproduce the same rules: box test,
contribution floor, alpha clamp and early termination. ``pfloor`` holds
log(alpha_min / opacity) per primitive so sub-floor overlaps are rejected
before the exponential. Accumulation order is
fixed, so results are bit-reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def composite_forward(W, H, ts, tile_start, tile_prims, bx0, bx1, by0, by1, mx, my, c0, c1, c2,
                      opac, pfloor, rgb, zc, bg, amax, amin, tmin):
    npx = W * H
    color = np.zeros((npx, 3))
    depth = np.zeros(npx)
    t_final = np.ones(npx)
    n_contrib = np.zeros(npx, dtype=np.int64)
    ntx = (W + ts - 1) // ts
    ntiles = len(tile_start) - 1
    for tile in range(ntiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        tx = tile % ntx
        ty = tile // ntx
        for py in range(ty * ts, min((ty + 1) * ts, H)):
            for px in range(tx * ts, min((tx + 1) * ts, W)):
                pid = py * W + px
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                last = 0
                for k in range(s0, s1):
                    i = tile_prims[k]
                    if px < bx0[i] or px >= bx1[i] or py < by0[i] or py >= by1[i]:
                        continue
                    dx = px - mx[i]
                    dy = py - my[i]
                    power = -0.5 * (c0[i] * dx * dx + 2.0 * c1[i] * dx * dy + c2[i] * dy * dy)
                    if power > 0.0:
                        power = 0.0
                    if power < pfloor[i]:
                        continue
                    a = opac[i] * np.exp(power)
                    if a > amax:
                        a = amax
                    if a < amin:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < tmin:
                        last = k - s0 + 1
                        break
                    w = a * T
                    r += w * rgb[i, 0]
                    g += w * rgb[i, 1]
                    b += w * rgb[i, 2]
                    d += w * zc[i]
                    T = test_T
                    last = k - s0 + 1
                color[pid, 0] = r + T * bg[0]
                color[pid, 1] = g + T * bg[1]
                color[pid, 2] = b + T * bg[2]
                depth[pid] = d
                t_final[pid] = T
                n_contrib[pid] = last
    return color, depth, t_final, n_contrib


@njit(cache=True, nogil=True)
def composite_backward(W, H, ts, tile_start, tile_prims, bx0, bx1, by0, by1, mx, my, c0, c1, c2,
                       opac, pfloor, rgb, zc, bg, amax, amin, tmin, t_final, n_contrib, gC, gD, gA):
    n = len(opac)
    d_opac = np.zeros(n)
    g_u = np.zeros(n)
    g_v = np.zeros(n)
    g_cA = np.zeros(n)
    g_cB = np.zeros(n)
    g_cC = np.zeros(n)
    g_rgb = np.zeros((n, 3))
    g_depth = np.zeros(n)
    hits = np.zeros(n, dtype=np.int64)
    ntx = (W + ts - 1) // ts
    ntiles = len(tile_start) - 1
    for tile in range(ntiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        L = s1 - s0
        if L == 0:
            continue
        kk = np.empty(L, dtype=np.int64)
        al = np.empty(L)
        raw = np.empty(L)
        Gs = np.empty(L)
        Ts = np.empty(L)
        tx = tile % ntx
        ty = tile // ntx
        for py in range(ty * ts, min((ty + 1) * ts, H)):
            for px in range(tx * ts, min((tx + 1) * ts, W)):
                pid = py * W + px
                last = n_contrib[pid]
                # forward replay: transmittance in front of every kept contribution
                T = 1.0
                m = 0
                for k in range(s0, s0 + last):
                    i = tile_prims[k]
                    if px < bx0[i] or px >= bx1[i] or py < by0[i] or py >= by1[i]:
                        continue
                    dx = px - mx[i]
                    dy = py - my[i]
                    power = -0.5 * (c0[i] * dx * dx + 2.0 * c1[i] * dx * dy + c2[i] * dy * dy)
                    if power > 0.0:
                        power = 0.0
                    if power < pfloor[i]:
                        continue
                    G = np.exp(power)
                    ra = opac[i] * G
                    a = ra if ra <= amax else amax
                    if a < amin:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < tmin:
                        break
                    kk[m] = k
                    al[m] = a
                    raw[m] = ra
                    Gs[m] = G
                    Ts[m] = T
                    T = test_T
                    m += 1
                gr = gC[pid, 0]
                gg = gC[pid, 1]
                gb = gC[pid, 2]
                gd = gD[pid]
                tail = t_final[pid] * (gr * bg[0] + gg * bg[1] + gb * bg[2] - gA[pid])
                S = 0.0
                for j in range(m - 1, -1, -1):
                    i = tile_prims[kk[j]]
                    a = al[j]
                    Tj = Ts[j]
                    q = rgb[i, 0] * gr + rgb[i, 1] * gg + rgb[i, 2] * gb + zc[i] * gd
                    w = a * Tj
                    om = 1.0 - a
                    dLda = Tj * q
                    if om > 1e-12:
                        dLda -= (S + tail) / om
                    S += w * q
                    hits[i] += 1
                    g_rgb[i, 0] += w * gr
                    g_rgb[i, 1] += w * gg
                    g_rgb[i, 2] += w * gb
                    g_depth[i] += w * gd
                    if raw[j] > amax:
                        continue
                    G = Gs[j]
                    d_opac[i] += dLda * G
                    gp = dLda * opac[i] * G
                    dx = px - mx[i]
                    dy = py - my[i]
                    g_u[i] += gp * (c0[i] * dx + c1[i] * dy)
                    g_v[i] += gp * (c1[i] * dx + c2[i] * dy)
                    g_cA[i] += gp * (-0.5 * dx * dx)
                    g_cB[i] += gp * (-dx * dy)
                    g_cC[i] += gp * (-0.5 * dy * dy)
    return d_opac, g_u, g_v, g_cA, g_cB, g_cC, g_rgb, g_depth, hits
