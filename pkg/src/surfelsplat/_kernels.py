# Per-pixel splatting kernels. All geometry is in camera space; surfel j is
# the plane patch p_j + u * a_j + v * b_j with Gaussian weight exp(-(u^2+v^2)/2).
import math

import numpy as np
from numba import njit

ALPHA_MIN = 1.0 / 255.0
CUTOFF_R2 = 9.0  # 3 sigma


@njit(cache=True)
def _det(x0, x1, x2, y0, y1, y2, z0, z1, z2):
    # x . (y cross z)
    return x0 * (y1 * z2 - y2 * z1) + x1 * (y2 * z0 - y0 * z2) + x2 * (y0 * z1 - y1 * z0)


@njit(cache=True)
def _intersect(P, A, B, j, dx, dy):
    # ray (dx, dy, 1) against surfel j: returns (u, v, t, D)
    D = _det(dx, dy, 1.0, A[j, 0], A[j, 1], A[j, 2], B[j, 0], B[j, 1], B[j, 2])
    if D == 0.0:
        return 0.0, 0.0, -1.0, 0.0
    nu = _det(dx, dy, 1.0, B[j, 0], B[j, 1], B[j, 2], P[j, 0], P[j, 1], P[j, 2])
    nv = _det(dx, dy, 1.0, P[j, 0], P[j, 1], P[j, 2], A[j, 0], A[j, 1], A[j, 2])
    nt = _det(P[j, 0], P[j, 1], P[j, 2], A[j, 0], A[j, 1], A[j, 2], B[j, 0], B[j, 1], B[j, 2])
    return nu / D, nv / D, nt / D, D


@njit(cache=True)
def bin_tiles(lo_x, hi_x, lo_y, hi_y, visible, tiles_x, tiles_y, tile):
    n = lo_x.shape[0]
    counts = np.zeros(tiles_x * tiles_y, np.int64)
    for j in range(n):
        if not visible[j]:
            continue
        for ty in range(lo_y[j] // tile, hi_y[j] // tile + 1):
            for tx in range(lo_x[j] // tile, hi_x[j] // tile + 1):
                counts[ty * tiles_x + tx] += 1
    start = np.zeros(tiles_x * tiles_y + 1, np.int64)
    for k in range(tiles_x * tiles_y):
        start[k + 1] = start[k] + counts[k]
    ids = np.empty(start[-1], np.int64)
    fill = start[:-1].copy()
    for j in range(n):
        if not visible[j]:
            continue
        for ty in range(lo_y[j] // tile, hi_y[j] // tile + 1):
            for tx in range(lo_x[j] // tile, hi_x[j] // tile + 1):
                k = ty * tiles_x + tx
                ids[fill[k]] = j
                fill[k] += 1
    return start, ids


@njit(cache=True)
def _gather(P, A, B, op, ids, s0, s1, dx, dy, near, far, buf_t, buf_j, buf_a):
    # collect valid fragments along one ray, insertion-sorted by (depth, index)
    m = 0
    for k in range(s0, s1):
        j = ids[k]
        u, v, t, D = _intersect(P, A, B, j, dx, dy)
        if D == 0.0 or t <= near or t >= far:
            continue
        r2 = u * u + v * v
        if r2 > CUTOFF_R2:
            continue
        a = op[j] * math.exp(-0.5 * r2)
        if a < ALPHA_MIN:
            continue
        i = m
        while i > 0 and (buf_t[i - 1] > t or (buf_t[i - 1] == t and buf_j[i - 1] > j)):
            buf_t[i] = buf_t[i - 1]
            buf_j[i] = buf_j[i - 1]
            buf_a[i] = buf_a[i - 1]
            i -= 1
        buf_t[i] = t
        buf_j[i] = j
        buf_a[i] = a
        m += 1
    return m


@njit(cache=True)
def forward(P, A, B, op, col, nrm, tile_start, tile_ids, tiles_x, tile,
            W, H, fx, fy, cx, cy, near, far, t_min):
    npix = W * H
    color = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth = np.zeros((H, W))
    nsum = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    fcount = np.zeros(npix, np.int64)

    maxc = 1
    for k in range(tile_start.shape[0] - 1):
        maxc = max(maxc, tile_start[k + 1] - tile_start[k])
    buf_t = np.empty(maxc)
    buf_j = np.empty(maxc, np.int64)
    buf_a = np.empty(maxc)

    # pass 1: upper bound on stored fragments per pixel
    for y in range(H):
        for x in range(W):
            k = (y // tile) * tiles_x + x // tile
            dx = (x + 0.5 - cx) / fx
            dy = (y + 0.5 - cy) / fy
            fcount[y * W + x] = _gather(P, A, B, op, tile_ids, tile_start[k], tile_start[k + 1],
                                        dx, dy, near, far, buf_t, buf_j, buf_a)
    fstart = np.zeros(npix + 1, np.int64)
    for i in range(npix):
        fstart[i + 1] = fstart[i] + fcount[i]
    f_surf = np.empty(fstart[-1], np.int64)
    f_depth = np.empty(fstart[-1])
    f_weight = np.empty(fstart[-1])

    # pass 2: composite front to back
    for y in range(H):
        for x in range(W):
            pix = y * W + x
            k = (y // tile) * tiles_x + x // tile
            dx = (x + 0.5 - cx) / fx
            dy = (y + 0.5 - cy) / fy
            m = _gather(P, A, B, op, tile_ids, tile_start[k], tile_start[k + 1],
                        dx, dy, near, far, buf_t, buf_j, buf_a)
            T = 1.0
            used = 0
            s = fstart[pix]
            zs = 0.0
            for i in range(m):
                j = buf_j[i]
                w = buf_a[i] * T
                color[y, x, 0] += w * col[j, 0]
                color[y, x, 1] += w * col[j, 1]
                color[y, x, 2] += w * col[j, 2]
                nsum[y, x, 0] += w * nrm[j, 0]
                nsum[y, x, 1] += w * nrm[j, 1]
                nsum[y, x, 2] += w * nrm[j, 2]
                zs += w * buf_t[i]
                f_surf[s + used] = j
                f_depth[s + used] = buf_t[i]
                f_weight[s + used] = w
                used += 1
                T *= 1.0 - buf_a[i]
                if T < t_min:
                    break
            fcount[pix] = used
            trans[y, x] = T
            acc = 1.0 - T
            alpha[y, x] = acc
            if used > 0 and acc > 0.0:
                depth[y, x] = zs / acc
    return color, alpha, depth, nsum, trans, fstart, fcount, f_surf, f_depth, f_weight


@njit(cache=True)
def backward(P, A, B, op, col, nrm, W, H, fx, fy, cx, cy,
             fstart, fcount, f_surf, alpha, depth,
             g_color, g_alpha, g_depth, g_nsum, g_fw, g_fz):
    n = P.shape[0]
    gP = np.zeros((n, 3))
    gA = np.zeros((n, 3))
    gB = np.zeros((n, 3))
    gop = np.zeros(n)
    gcol = np.zeros((n, 3))
    gn = np.zeros((n, 3))
    maxf = 1
    for i in range(W * H):
        maxf = max(maxf, fcount[i])
    a_ = np.empty(maxf)
    G_ = np.empty(maxf)
    u_ = np.empty(maxf)
    v_ = np.empty(maxf)
    t_ = np.empty(maxf)
    D_ = np.empty(maxf)
    T_ = np.empty(maxf)
    gw = np.empty(maxf)

    for y in range(H):
        for x in range(W):
            pix = y * W + x
            m = fcount[pix]
            if m == 0:
                continue
            s = fstart[pix]
            dx = (x + 0.5 - cx) / fx
            dy = (y + 0.5 - cy) / fy
            acc = alpha[y, x]
            dep = depth[y, x]
            T = 1.0
            for i in range(m):
                j = f_surf[s + i]
                u, v, t, D = _intersect(P, A, B, j, dx, dy)
                G = math.exp(-0.5 * (u * u + v * v))
                u_[i] = u
                v_[i] = v
                t_[i] = t
                D_[i] = D
                G_[i] = G
                a_[i] = op[j] * G
                T_[i] = T
                T *= 1.0 - a_[i]
            # upstream gradient on each weight w_i = a_i T_i and on each depth
            for i in range(m):
                j = f_surf[s + i]
                g = g_alpha[y, x] + g_fw[s + i]
                g += g_color[y, x, 0] * col[j, 0] + g_color[y, x, 1] * col[j, 1] + g_color[y, x, 2] * col[j, 2]
                g += g_nsum[y, x, 0] * nrm[j, 0] + g_nsum[y, x, 1] * nrm[j, 1] + g_nsum[y, x, 2] * nrm[j, 2]
                if acc > 0.0:
                    g += g_depth[y, x] * (t_[i] - dep) / acc
                gw[i] = g
            R = 0.0
            for i in range(m - 1, -1, -1):
                j = f_surf[s + i]
                w = a_[i] * T_[i]
                g_a = T_[i] * (gw[i] - R)
                R = gw[i] * a_[i] + (1.0 - a_[i]) * R
                gcol[j, 0] += w * g_color[y, x, 0]
                gcol[j, 1] += w * g_color[y, x, 1]
                gcol[j, 2] += w * g_color[y, x, 2]
                gn[j, 0] += w * g_nsum[y, x, 0]
                gn[j, 1] += w * g_nsum[y, x, 1]
                gn[j, 2] += w * g_nsum[y, x, 2]
                gt = g_fz[s + i]
                if acc > 0.0:
                    gt += g_depth[y, x] * w / acc
                G = G_[i]
                gop[j] += g_a * G
                gG = g_a * op[j]
                gu = -gG * G * u_[i]
                gv = -gG * G * v_[i]
                u = u_[i]
                v = v_[i]
                t = t_[i]
                D = D_[i]
                gNu = gu / D
                gNv = gv / D
                gNt = gt / D
                gD = -(gu * u + gv * v + gt * t) / D
                p0, p1, p2 = P[j, 0], P[j, 1], P[j, 2]
                a0, a1, a2 = A[j, 0], A[j, 1], A[j, 2]
                b0, b1, b2 = B[j, 0], B[j, 1], B[j, 2]
                d0, d1, d2 = dx, dy, 1.0
                # gP += gNu (d x b) + gNv (a x d) + gNt (a x b)
                gP[j, 0] += gNu * (d1 * b2 - d2 * b1) + gNv * (a1 * d2 - a2 * d1) + gNt * (a1 * b2 - a2 * b1)
                gP[j, 1] += gNu * (d2 * b0 - d0 * b2) + gNv * (a2 * d0 - a0 * d2) + gNt * (a2 * b0 - a0 * b2)
                gP[j, 2] += gNu * (d0 * b1 - d1 * b0) + gNv * (a0 * d1 - a1 * d0) + gNt * (a0 * b1 - a1 * b0)
                # gA += gNv (d x p) + gNt (b x p) + gD (b x d)
                gA[j, 0] += gNv * (d1 * p2 - d2 * p1) + gNt * (b1 * p2 - b2 * p1) + gD * (b1 * d2 - b2 * d1)
                gA[j, 1] += gNv * (d2 * p0 - d0 * p2) + gNt * (b2 * p0 - b0 * p2) + gD * (b2 * d0 - b0 * d2)
                gA[j, 2] += gNv * (d0 * p1 - d1 * p0) + gNt * (b0 * p1 - b1 * p0) + gD * (b0 * d1 - b1 * d0)
                # gB += gNu (p x d) + gNt (p x a) + gD (d x a)
                gB[j, 0] += gNu * (p1 * d2 - p2 * d1) + gNt * (p1 * a2 - p2 * a1) + gD * (d1 * a2 - d2 * a1)
                gB[j, 1] += gNu * (p2 * d0 - p0 * d2) + gNt * (p2 * a0 - p0 * a2) + gD * (d2 * a0 - d0 * a2)
                gB[j, 2] += gNu * (p0 * d1 - p1 * d0) + gNt * (p0 * a1 - p1 * a0) + gD * (d0 * a1 - d1 * a0)
    return gP, gA, gB, gop, gcol, gn
