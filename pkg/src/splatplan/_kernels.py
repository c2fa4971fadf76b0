"""Numba kernels for rendering, grid traversal, and carving.

Everything here is pure numeric code over preallocated arrays. Parallel loops
are only ever parallel over pixels/rays with disjoint outputs, so results are
bitwise reproducible regardless of thread count or scheduling.

Grid state codes: 0 = unknown, 1 = free, 2 = occupied.
Brick summaries (one per BRICK^3 voxel block) cache whether a block contains
any unknown / any occupied voxels so rays can jump across homogeneous space;
traversal output is identical to plain per-voxel stepping.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

BRICK = 4
# brick summary bit flags
B_HAS_UNK = 1
B_ALL_UNK = 2
B_HAS_OCC = 4


@njit(cache=True)
def build_brick_summary(state, brick):
    nx, ny, nz = state.shape
    bnx, bny, bnz = brick.shape
    for bx in range(bnx):
        x0 = bx * BRICK
        x1 = min(x0 + BRICK, nx)
        for by in range(bny):
            y0 = by * BRICK
            y1 = min(y0 + BRICK, ny)
            for bz in range(bnz):
                z0 = bz * BRICK
                z1 = min(z0 + BRICK, nz)
                has_unk = False
                all_unk = True
                has_occ = False
                for i in range(x0, x1):
                    for j in range(y0, y1):
                        for k in range(z0, z1):
                            s = state[i, j, k]
                            if s == UNKNOWN:
                                has_unk = True
                            else:
                                all_unk = False
                                if s == OCCUPIED:
                                    has_occ = True
                code = 0
                if has_unk:
                    code |= B_HAS_UNK
                if all_unk:
                    code |= B_ALL_UNK
                if has_occ:
                    code |= B_HAS_OCC
                brick[bx, by, bz] = code


@njit(cache=True, inline="always")
def _clip_to_box(ox, oy, oz, dx, dy, dz, gx, gy, gz, hx, hy, hz, t0, t1):
    """Clip ray parameter range [t0, t1] to an axis-aligned box."""
    if dx == 0.0:
        if ox < gx or ox >= hx:
            return 1.0, 0.0
    else:
        ta = (gx - ox) / dx
        tb = (hx - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if dy == 0.0:
        if oy < gy or oy >= hy:
            return 1.0, 0.0
    else:
        ta = (gy - oy) / dy
        tb = (hy - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if dz == 0.0:
        if oz < gz or oz >= hz:
            return 1.0, 0.0
    else:
        ta = (gz - oz) / dz
        tb = (hz - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@njit(cache=True, inline="always")
def _box_exit(ox, oy, oz, dx, dy, dz, lox, loy, loz, hix, hiy, hiz, tmax):
    """First exit parameter from an axis-aligned box (assumes point inside)."""
    te = tmax
    if dx > 0.0:
        tb = (hix - ox) / dx
        if tb < te:
            te = tb
    elif dx < 0.0:
        tb = (lox - ox) / dx
        if tb < te:
            te = tb
    if dy > 0.0:
        tb = (hiy - oy) / dy
        if tb < te:
            te = tb
    elif dy < 0.0:
        tb = (loy - oy) / dy
        if tb < te:
            te = tb
    if dz > 0.0:
        tb = (hiz - oz) / dz
        if tb < te:
            te = tb
    elif dz < 0.0:
        tb = (loz - oz) / dz
        if tb < te:
            te = tb
    return te


@njit(cache=True)
def unknown_runs_ray(ox, oy, oz, dx, dy, dz, tstart, tstop,
                     gx, gy, gz, vox, state, brick,
                     run_lo, run_hi):
    """Maximal unknown-voxel runs along one ray within [tstart, tstop].

    Fills run_lo/run_hi (preallocated) with interval entry/exit parameters and
    returns the run count. Bricks with uniform unknown-ness are crossed in one
    step; mixed bricks fall back to per-voxel stepping, so the merged intervals
    equal those of a plain voxel traversal.
    """
    nx, ny, nz = state.shape
    hx = gx + nx * vox
    hy = gy + ny * vox
    hz = gz + nz * vox
    t0, t1 = _clip_to_box(ox, oy, oz, dx, dy, dz, gx, gy, gz, hx, hy, hz, tstart, tstop)
    if t1 <= t0:
        return 0
    bs = BRICK * vox
    bnx, bny, bnz = brick.shape
    eps = 1e-9 * (1.0 + abs(t1))
    nrun = 0
    run_open = False
    rstart = 0.0
    tcur = t0
    while tcur < t1 - eps:
        tp = tcur + eps
        px = ox + tp * dx
        py = oy + tp * dy
        pz = oz + tp * dz
        bxi = int((px - gx) / bs)
        byi = int((py - gy) / bs)
        bzi = int((pz - gz) / bs)
        if bxi < 0:
            bxi = 0
        if byi < 0:
            byi = 0
        if bzi < 0:
            bzi = 0
        if bxi >= bnx:
            bxi = bnx - 1
        if byi >= bny:
            byi = bny - 1
        if bzi >= bnz:
            bzi = bnz - 1
        code = brick[bxi, byi, bzi]
        blox = gx + bxi * bs
        bloy = gy + byi * bs
        bloz = gz + bzi * bs
        texit = _box_exit(ox, oy, oz, dx, dy, dz, blox, bloy, bloz,
                          blox + bs, bloy + bs, bloz + bs, t1)
        if texit > t1:
            texit = t1
        if code & B_ALL_UNK:
            if not run_open:
                run_open = True
                rstart = tcur
            tcur = texit
        elif not (code & B_HAS_UNK):
            if run_open:
                run_open = False
                run_lo[nrun] = rstart
                run_hi[nrun] = tcur
                nrun += 1
            tcur = texit
        else:
            # mixed brick: per-voxel stepping inside [tcur, texit]
            t = tcur + eps
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            ix = int((px - gx) / vox)
            iy = int((py - gy) / vox)
            iz = int((pz - gz) / vox)
            if ix < 0:
                ix = 0
            if iy < 0:
                iy = 0
            if iz < 0:
                iz = 0
            if ix >= nx:
                ix = nx - 1
            if iy >= ny:
                iy = ny - 1
            if iz >= nz:
                iz = nz - 1
            big = 1e300
            if dx > 0.0:
                tmx = (gx + (ix + 1) * vox - ox) / dx
                tdx = vox / dx
                sx = 1
            elif dx < 0.0:
                tmx = (gx + ix * vox - ox) / dx
                tdx = -vox / dx
                sx = -1
            else:
                tmx = big
                tdx = big
                sx = 0
            if dy > 0.0:
                tmy = (gy + (iy + 1) * vox - oy) / dy
                tdy = vox / dy
                sy = 1
            elif dy < 0.0:
                tmy = (gy + iy * vox - oy) / dy
                tdy = -vox / dy
                sy = -1
            else:
                tmy = big
                tdy = big
                sy = 0
            if dz > 0.0:
                tmz = (gz + (iz + 1) * vox - oz) / dz
                tdz = vox / dz
                sz = 1
            elif dz < 0.0:
                tmz = (gz + iz * vox - oz) / dz
                tdz = -vox / dz
                sz = -1
            else:
                tmz = big
                tdz = big
                sz = 0
            tv = tcur
            while tv < texit - eps:
                s = state[ix, iy, iz]
                if s == UNKNOWN:
                    if not run_open:
                        run_open = True
                        rstart = tv
                else:
                    if run_open:
                        run_open = False
                        run_lo[nrun] = rstart
                        run_hi[nrun] = tv
                        nrun += 1
                if tmx < tmy:
                    if tmx < tmz:
                        tn = tmx
                        ix += sx
                        tmx += tdx
                    else:
                        tn = tmz
                        iz += sz
                        tmz += tdz
                else:
                    if tmy < tmz:
                        tn = tmy
                        iy += sy
                        tmy += tdy
                    else:
                        tn = tmz
                        iz += sz
                        tmz += tdz
                tv = tn
                if tv >= texit:
                    break
                if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
                    break
            tcur = texit
    if run_open:
        run_lo[nrun] = rstart
        run_hi[nrun] = t1
        nrun += 1
    return nrun


@njit(cache=True)
def bin_splats_csr(px, py, rpix, width, height):
    """CSR map pixel -> indices of overlapping splats, in input (depth) order."""
    n = px.shape[0]
    npx = width * height
    counts = np.zeros(npx + 1, dtype=np.int64)
    for s in range(n):
        m = 3.0 * rpix[s]
        if m < 0.5:
            m = 0.5
        u0 = int(np.ceil(px[s] - m - 0.5))
        u1 = int(np.floor(px[s] + m - 0.5))
        v0 = int(np.ceil(py[s] - m - 0.5))
        v1 = int(np.floor(py[s] + m - 0.5))
        if u0 < 0:
            u0 = 0
        if v0 < 0:
            v0 = 0
        if u1 >= width:
            u1 = width - 1
        if v1 >= height:
            v1 = height - 1
        for v in range(v0, v1 + 1):
            base = v * width
            for u in range(u0, u1 + 1):
                counts[base + u + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    order = np.empty(offsets[-1], dtype=np.int64)
    for s in range(n):
        m = 3.0 * rpix[s]
        if m < 0.5:
            m = 0.5
        u0 = int(np.ceil(px[s] - m - 0.5))
        u1 = int(np.floor(px[s] + m - 0.5))
        v0 = int(np.ceil(py[s] - m - 0.5))
        v1 = int(np.floor(py[s] + m - 0.5))
        if u0 < 0:
            u0 = 0
        if v0 < 0:
            v0 = 0
        if u1 >= width:
            u1 = width - 1
        if v1 >= height:
            v1 = height - 1
        for v in range(v0, v1 + 1):
            base = v * width
            for u in range(u0, u1 + 1):
                p = base + u
                order[fill[p]] = s
                fill[p] += 1
    return offsets, order


@njit(cache=True, parallel=True)
def render_pixels(offsets, order, px, py, rpix, sdepth, scolor, sopac,
                  dirs, origin, near, far, stop_t,
                  want_comp, gorigin, vox, state, brick, inv_ff,
                  out_color, out_depth, out_sil, out_comp):
    """Front-to-back composite per pixel, with unknown-volume gain interleaved.

    dirs is (npx, 3) world ray directions scaled to unit camera z, so all depth
    parameters are camera z-depths. Completeness weighs each unknown interval
    by the transmittance accumulated from splats strictly in front of its entry.
    """
    npx = dirs.shape[0]
    gx, gy, gz = gorigin[0], gorigin[1], gorigin[2]
    for p in prange(npx):
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        ox, oy, oz = origin[0], origin[1], origin[2]
        ucen = (p % out_color.shape[1]) + 0.5
        vcen = (p // out_color.shape[1]) + 0.5
        i0 = offsets[p]
        i1 = offsets[p + 1]
        nk = i1 - i0
        # unknown intervals along this ray (entry-ordered, disjoint)
        nrun = 0
        run_lo = np.empty(0, dtype=np.float64)
        run_hi = np.empty(0, dtype=np.float64)
        if want_comp:
            cap = 0
            span = far - near
            if span > 0.0:
                cap = 8 + 2 * int(span / vox * 3.0 + 2.0)
            run_lo = np.empty(cap, dtype=np.float64)
            run_hi = np.empty(cap, dtype=np.float64)
            nrun = unknown_runs_ray(ox, oy, oz, dx, dy, dz, near, far,
                                    gx, gy, gz, vox, state, brick, run_lo, run_hi)
        t_trans = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        dep = 0.0
        sil = 0.0
        vgain = 0.0
        irun = 0
        for k in range(nk):
            s = order[i0 + k]
            d_evt = sdepth[s]
            # flush intervals entered strictly before this splat
            while irun < nrun and run_lo[irun] <= d_evt:
                a = run_lo[irun]
                b = run_hi[irun]
                vgain += (b * b * b - a * a * a) / 3.0 * inv_ff * t_trans
                irun += 1
            du = ucen - px[s]
            dv = vcen - py[s]
            rp = rpix[s]
            alpha = sopac[s] * np.exp(-(du * du + dv * dv) / (2.0 * rp * rp))
            w = alpha * t_trans
            cr += scolor[s, 0] * w
            cg += scolor[s, 1] * w
            cb += scolor[s, 2] * w
            dep += d_evt * w
            sil += w
            t_trans *= 1.0 - alpha
            if t_trans < stop_t:
                break
        if t_trans >= stop_t:
            while irun < nrun:
                a = run_lo[irun]
                b = run_hi[irun]
                vgain += (b * b * b - a * a * a) / 3.0 * inv_ff * t_trans
                irun += 1
        vq = p // out_color.shape[1]
        uq = p % out_color.shape[1]
        out_color[vq, uq, 0] = cr
        out_color[vq, uq, 1] = cg
        out_color[vq, uq, 2] = cb
        out_depth[vq, uq] = dep
        out_sil[vq, uq] = sil
        out_comp[vq, uq] = vgain


@njit(cache=True)
def carve_depth(depth_img, dirs, origin, gorigin, vox, state):
    """Free-space carving along valid-depth rays; endpoint voxel becomes occupied.

    Voxels whose exit lies more than one voxel (euclidean) short of the hit
    point are upgraded to free; the hit voxel is upgraded to occupied; the one
    in between is left untouched as a noise margin. State only ever increases
    (unknown -> free -> occupied). Returns (freed, occupied) counts.
    """
    nx, ny, nz = state.shape
    gx, gy, gz = gorigin[0], gorigin[1], gorigin[2]
    hx = gx + nx * vox
    hy = gy + ny * vox
    hz = gz + nz * vox
    h, w = depth_img.shape
    freed = 0
    occ = 0
    for v in range(h):
        for u in range(w):
            d = depth_img[v, u]
            if not np.isfinite(d) or d <= 0.0:
                continue
            dx = dirs[v, u, 0]
            dy = dirs[v, u, 1]
            dz = dirs[v, u, 2]
            ox, oy, oz = origin[0], origin[1], origin[2]
            dnorm = np.sqrt(dx * dx + dy * dy + dz * dz)
            margin_t = vox / dnorm
            free_end = d - margin_t
            t0, t1 = _clip_to_box(ox, oy, oz, dx, dy, dz, gx, gy, gz, hx, hy, hz,
                                  0.0, free_end)
            eps = 1e-9 * (1.0 + abs(d))
            if t1 > t0 + eps:
                t = t0 + eps
                ix = int((ox + t * dx - gx) / vox)
                iy = int((oy + t * dy - gy) / vox)
                iz = int((oz + t * dz - gz) / vox)
                if ix < 0:
                    ix = 0
                if iy < 0:
                    iy = 0
                if iz < 0:
                    iz = 0
                if ix >= nx:
                    ix = nx - 1
                if iy >= ny:
                    iy = ny - 1
                if iz >= nz:
                    iz = nz - 1
                big = 1e300
                if dx > 0.0:
                    tmx = (gx + (ix + 1) * vox - ox) / dx
                    tdx = vox / dx
                    sx = 1
                elif dx < 0.0:
                    tmx = (gx + ix * vox - ox) / dx
                    tdx = -vox / dx
                    sx = -1
                else:
                    tmx = big
                    tdx = big
                    sx = 0
                if dy > 0.0:
                    tmy = (gy + (iy + 1) * vox - oy) / dy
                    tdy = vox / dy
                    sy = 1
                elif dy < 0.0:
                    tmy = (gy + iy * vox - oy) / dy
                    tdy = -vox / dy
                    sy = -1
                else:
                    tmy = big
                    tdy = big
                    sy = 0
                if dz > 0.0:
                    tmz = (gz + (iz + 1) * vox - oz) / dz
                    tdz = vox / dz
                    sz = 1
                elif dz < 0.0:
                    tmz = (gz + iz * vox - oz) / dz
                    tdz = -vox / dz
                    sz = -1
                else:
                    tmz = big
                    tdz = big
                    sz = 0
                while True:
                    # true exit of the current voxel decides the margin test
                    if tmx < tmy:
                        if tmx < tmz:
                            tn = tmx
                        else:
                            tn = tmz
                    else:
                        if tmy < tmz:
                            tn = tmy
                        else:
                            tn = tmz
                    if tn <= free_end and state[ix, iy, iz] == UNKNOWN:
                        state[ix, iy, iz] = FREE
                        freed += 1
                    if tn >= t1:
                        break
                    if tmx < tmy:
                        if tmx < tmz:
                            ix += sx
                            tmx += tdx
                        else:
                            iz += sz
                            tmz += tdz
                    else:
                        if tmy < tmz:
                            iy += sy
                            tmy += tdy
                        else:
                            iz += sz
                            tmz += tdz
                    if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
                        break
            # endpoint voxel
            ex = ox + d * dx
            ey = oy + d * dy
            ez = oz + d * dz
            ix = int(np.floor((ex - gx) / vox))
            iy = int(np.floor((ey - gy) / vox))
            iz = int(np.floor((ez - gz) / vox))
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                if state[ix, iy, iz] < OCCUPIED:
                    occ += 1
                    state[ix, iy, iz] = OCCUPIED
    return freed, occ


@njit(cache=True, parallel=True)
def reproject_first_hit(origin, dirs, tmax, gorigin, vox, state, brick, loss, out):
    """Cached loss of the first occupied voxel along each ray (0 if none)."""
    n = dirs.shape[0]
    nx, ny, nz = state.shape
    bnx, bny, bnz = brick.shape
    gx, gy, gz = gorigin[0], gorigin[1], gorigin[2]
    hx = gx + nx * vox
    hy = gy + ny * vox
    hz = gz + nz * vox
    bs = BRICK * vox
    for i in prange(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        ox, oy, oz = origin[0], origin[1], origin[2]
        t0, t1 = _clip_to_box(ox, oy, oz, dx, dy, dz, gx, gy, gz, hx, hy, hz,
                              0.0, tmax)
        val = 0.0
        if t1 > t0:
            eps = 1e-9 * (1.0 + abs(t1))
            tcur = t0
            done = False
            while tcur < t1 - eps and not done:
                tp = tcur + eps
                bxi = int((ox + tp * dx - gx) / bs)
                byi = int((oy + tp * dy - gy) / bs)
                bzi = int((oz + tp * dz - gz) / bs)
                if bxi < 0:
                    bxi = 0
                if byi < 0:
                    byi = 0
                if bzi < 0:
                    bzi = 0
                if bxi >= bnx:
                    bxi = bnx - 1
                if byi >= bny:
                    byi = bny - 1
                if bzi >= bnz:
                    bzi = bnz - 1
                blox = gx + bxi * bs
                bloy = gy + byi * bs
                bloz = gz + bzi * bs
                texit = _box_exit(ox, oy, oz, dx, dy, dz, blox, bloy, bloz,
                                  blox + bs, bloy + bs, bloz + bs, t1)
                if texit > t1:
                    texit = t1
                if not (brick[bxi, byi, bzi] & B_HAS_OCC):
                    tcur = texit
                    continue
                # voxel stepping inside the brick
                t = tcur + eps
                ix = int((ox + t * dx - gx) / vox)
                iy = int((oy + t * dy - gy) / vox)
                iz = int((oz + t * dz - gz) / vox)
                if ix < 0:
                    ix = 0
                if iy < 0:
                    iy = 0
                if iz < 0:
                    iz = 0
                if ix >= nx:
                    ix = nx - 1
                if iy >= ny:
                    iy = ny - 1
                if iz >= nz:
                    iz = nz - 1
                big = 1e300
                if dx > 0.0:
                    tmx = (gx + (ix + 1) * vox - ox) / dx
                    tdx = vox / dx
                    sx = 1
                elif dx < 0.0:
                    tmx = (gx + ix * vox - ox) / dx
                    tdx = -vox / dx
                    sx = -1
                else:
                    tmx = big
                    tdx = big
                    sx = 0
                if dy > 0.0:
                    tmy = (gy + (iy + 1) * vox - oy) / dy
                    tdy = vox / dy
                    sy = 1
                elif dy < 0.0:
                    tmy = (gy + iy * vox - oy) / dy
                    tdy = -vox / dy
                    sy = -1
                else:
                    tmy = big
                    tdy = big
                    sy = 0
                if dz > 0.0:
                    tmz = (gz + (iz + 1) * vox - oz) / dz
                    tdz = vox / dz
                    sz = 1
                elif dz < 0.0:
                    tmz = (gz + iz * vox - oz) / dz
                    tdz = -vox / dz
                    sz = -1
                else:
                    tmz = big
                    tdz = big
                    sz = 0
                tv = tcur
                while tv < texit - eps:
                    if state[ix, iy, iz] == OCCUPIED:
                        val = loss[ix, iy, iz]
                        done = True
                        break
                    if tmx < tmy:
                        if tmx < tmz:
                            tn = tmx
                            ix += sx
                            tmx += tdx
                        else:
                            tn = tmz
                            iz += sz
                            tmz += tdz
                    else:
                        if tmy < tmz:
                            tn = tmy
                            iy += sy
                            tmy += tdy
                        else:
                            tn = tmz
                            iz += sz
                            tmz += tdz
                    tv = tn
                    if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
                        break
                tcur = texit
        out[i] = val


@njit(cache=True)
def fixed_step_unknown_volume(origin, dirs, near, far, step,
                              gorigin, vox, state, inv_ff, out):
    """Classical raycast gain: march each ray at a fixed euclidean step, add the
    pixel-frustum slab volume at unknown samples, stop at occupied voxels."""
    n = dirs.shape[0]
    nx, ny, nz = state.shape
    gx, gy, gz = gorigin[0], gorigin[1], gorigin[2]
    inv_vox = 1.0 / vox
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        ox, oy, oz = origin[0], origin[1], origin[2]
        dnorm = np.sqrt(dx * dx + dy * dy + dz * dz)
        dt = step / dnorm
        t = near
        vol = 0.0
        while t < far:
            ix = int(np.floor((ox + t * dx - gx) * inv_vox))
            iy = int(np.floor((oy + t * dy - gy) * inv_vox))
            iz = int(np.floor((oz + t * dz - gz) * inv_vox))
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                s = state[ix, iy, iz]
                if s == OCCUPIED:
                    break
                if s == UNKNOWN:
                    vol += t * t * inv_ff * dt
            t += dt
        out[i] = vol


@njit(cache=True)
def appearance_backward(offsets, order, px, py, rpix, sdepth, scolor, sopac,
                        res_color_sign, res_depth_sign, valid, lam_c, stop_t,
                        grad_color, grad_opac):
    """Gradient of the mean per-pixel photometric+depth L1 loss w.r.t. splat
    color and opacity, matching the forward composite (including early exit)."""
    height, width = res_depth_sign.shape
    npx = width * height
    nvalid = 0
    for p in range(npx):
        if valid[p // width, p % width]:
            nvalid += 1
    if nvalid == 0:
        return
    scale = 1.0 / nvalid
    for p in range(npx):
        vq = p // width
        uq = p % width
        if not valid[vq, uq]:
            continue
        i0 = offsets[p]
        i1 = offsets[p + 1]
        nk = i1 - i0
        if nk == 0:
            continue
        alphas = np.empty(nk, dtype=np.float64)
        trans = np.empty(nk, dtype=np.float64)
        nact = 0
        t_trans = 1.0
        ucen = uq + 0.5
        vcen = vq + 0.5
        for k in range(nk):
            s = order[i0 + k]
            du = ucen - px[s]
            dv = vcen - py[s]
            rp = rpix[s]
            a = sopac[s] * np.exp(-(du * du + dv * dv) / (2.0 * rp * rp))
            alphas[k] = a
            trans[k] = t_trans
            nact += 1
            t_trans *= 1.0 - a
            if t_trans < stop_t:
                break
        # suffix sums of downstream composited contributions
        sufc0 = 0.0
        sufc1 = 0.0
        sufc2 = 0.0
        sufd = 0.0
        sd = res_depth_sign[vq, uq] * scale
        sc0 = res_color_sign[vq, uq, 0] * (lam_c / 3.0) * scale
        sc1 = res_color_sign[vq, uq, 1] * (lam_c / 3.0) * scale
        sc2 = res_color_sign[vq, uq, 2] * (lam_c / 3.0) * scale
        for k in range(nact - 1, -1, -1):
            s = order[i0 + k]
            a = alphas[k]
            ti = trans[k]
            w = a * ti
            grad_color[s, 0] += sc0 * w
            grad_color[s, 1] += sc1 * w
            grad_color[s, 2] += sc2 * w
            one_m = 1.0 - a
            if one_m > 1e-12:
                dC0 = scolor[s, 0] * ti - sufc0 / one_m
                dC1 = scolor[s, 1] * ti - sufc1 / one_m
                dC2 = scolor[s, 2] * ti - sufc2 / one_m
                dD = sdepth[s] * ti - sufd / one_m
            else:
                dC0 = scolor[s, 0] * ti
                dC1 = scolor[s, 1] * ti
                dC2 = scolor[s, 2] * ti
                dD = sdepth[s] * ti
            dalpha = sc0 * dC0 + sc1 * dC1 + sc2 * dC2 + sd * dD
            if sopac[s] > 1e-12:
                grad_opac[s] += dalpha * a / sopac[s]
            sufc0 += scolor[s, 0] * w
            sufc1 += scolor[s, 1] * w
            sufc2 += scolor[s, 2] * w
            sufd += sdepth[s] * w
