"""Analytic backward pass of the tiled renderer.

Two-pass design per pixel inside one compiled kernel. Pass one replays the
forward walk with the same expressions and dtypes, so every grouping branch
lands identically, and records per-layer sums. From those the per-layer
upstream gradients are assembled with suffix recursions over the compositing
chain (color, alpha, and the depth-consolidation penalty, which is evaluated
and differentiated here because it lives on per-pixel layer moments). Pass
two replays the walk again and distributes per-surfel gradients.

Gradients are written into per-(tile, record) pair buffers owned by exactly
one tile, then reduced serially in fixed pair order, so results are
bit-identical for any worker count. The T-row, filter, and shading chains
back to world parameters are plain vectorized numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange, set_num_threads, get_num_threads

from .preprocess import DENOM_EPS
from .rasterizer import RenderResult, _resolve_workers
from .surfels import SurfelCloud, quat_to_frame, quat_frame_backward


@dataclass
class BackwardResult:
    """Per-parameter gradients plus the densification statistics gathered
    while walking pixels."""

    centers: np.ndarray        # (N, 3)
    quats: np.ndarray          # (N, 4)
    log_scales: np.ndarray     # (N, 2)
    albedo_raw: np.ndarray     # (N, 3)
    metallic_raw: np.ndarray   # (N,)
    roughness_raw: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) gradient w.r.t. the per-surfel colors
    env_base_log: np.ndarray | None
    background: np.ndarray     # (3,)
    ss_grad: np.ndarray        # (N,) summed per-pixel screen-space gradient norms
    touched: np.ndarray        # (N,) bool, surfel contributed to some pixel
    cons_loss: float           # value of the consolidation penalty


@njit(cache=True, parallel=True)
def _backward_kernel(width, height, tile, ntx, ntiles,
                     tile_offsets, pair_rec,
                     t1, t2, t4, sinv, n_f, view_z, eps_z, z_start, z_end,
                     rect, colors, xs, ys, bg,
                     r_cut2, alpha_rate, k_max,
                     g_rgb, g_alpha, cons_scale,
                     pb, ss, touch, cons_out):
    for t in prange(ntiles):
        pa = tile_offsets[t]
        pz = tile_offsets[t + 1]
        if pa == pz:
            continue
        tx = t % ntx
        ty = t // ntx
        x_lo = tx * tile
        y_lo = ty * tile
        x_hi = min(x_lo + tile, width)
        y_hi = min(y_lo + tile, height)

        lw = np.empty(k_max, dtype=np.float64)
        lc = np.empty((k_max, 3), dtype=np.float64)
        lz = np.empty(k_max, dtype=np.float64)
        lz2 = np.empty(k_max, dtype=np.float64)
        a_arr = np.empty(k_max, dtype=np.float64)
        tbar = np.empty(k_max, dtype=np.float64)
        wm = np.empty(k_max, dtype=np.float64)
        zb_a = np.empty(k_max, dtype=np.float64)
        var_a = np.empty(k_max, dtype=np.float64)
        gw_c = np.empty(k_max, dtype=np.float64)
        gz_c = np.empty(k_max, dtype=np.float64)
        gv_c = np.empty(k_max, dtype=np.float64)
        g_wtot = np.empty(k_max, dtype=np.float64)
        g_craw = np.empty((k_max, 3), dtype=np.float64)
        g_zc = np.empty(k_max, dtype=np.float64)
        g_z2c = np.empty(k_max, dtype=np.float64)
        cons_local = 0.0

        for iy in range(y_lo, y_hi):
            y = ys[iy]
            for ix in range(x_lo, x_hi):
                x = xs[ix]

                # pass one: replay the forward walk, collect layer sums
                nl = 0
                w_g = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                z_g = 0.0
                z2_g = 0.0
                z_max_end = 0.0
                stopped = False
                for p in range(pa, pz):
                    r = pair_rec[p]
                    if ix < rect[r, 0] or ix >= rect[r, 2] or iy < rect[r, 1] or iy >= rect[r, 3]:
                        continue
                    if stopped:
                        continue
                    if w_g > 0.0 and z_start[r] > z_max_end:
                        lw[nl] = w_g
                        lc[nl, 0] = c0
                        lc[nl, 1] = c1
                        lc[nl, 2] = c2
                        lz[nl] = z_g
                        lz2[nl] = z2_g
                        nl += 1
                        w_g = 0.0
                        c0 = 0.0
                        c1 = 0.0
                        c2 = 0.0
                        z_g = 0.0
                        z2_g = 0.0
                        z_max_end = 0.0
                        if nl >= k_max:
                            stopped = True
                            continue
                    k0 = x * t4[r, 0] - t1[r, 0]
                    k1 = x * t4[r, 1] - t1[r, 1]
                    k2 = x * t4[r, 2] - t1[r, 2]
                    l0 = y * t4[r, 0] - t2[r, 0]
                    l1 = y * t4[r, 1] - t2[r, 1]
                    l2 = y * t4[r, 2] - t2[r, 2]
                    den = k0 * l1 - k1 * l0
                    if np.abs(den) < DENOM_EPS:
                        continue
                    u = (k1 * l2 - k2 * l1) / den
                    v = (k2 * l0 - k0 * l2) / den
                    rho2 = sinv[r, 0] * u * u + 2.0 * sinv[r, 1] * u * v + sinv[r, 2] * v * v
                    if rho2 >= r_cut2:
                        continue
                    w = n_f[r] * np.exp(-0.5 * rho2)
                    z = view_z[r]
                    w_g += w
                    c0 += w * colors[r, 0]
                    c1 += w * colors[r, 1]
                    c2 += w * colors[r, 2]
                    z_g += w * z
                    z2_g += w * z * z
                    if z_end[r] > z_max_end:
                        z_max_end = z_end[r]
                if w_g > 0.0:
                    lw[nl] = w_g
                    lc[nl, 0] = c0
                    lc[nl, 1] = c1
                    lc[nl, 2] = c2
                    lz[nl] = z_g
                    lz2[nl] = z2_g
                    nl += 1
                if nl == 0:
                    continue

                # layer opacities and prefix transmittance
                trans = 1.0
                for m in range(nl):
                    a_arr[m] = 1.0 - np.exp(-lw[m] * alpha_rate)
                    tbar[m] = trans
                    trans *= 1.0 - a_arr[m]

                # consolidation penalty on composite weights and depth moments
                for m in range(nl):
                    gw_c[m] = 0.0
                    gz_c[m] = 0.0
                    gv_c[m] = 0.0
                if cons_scale > 0.0:
                    for m in range(nl):
                        wm[m] = tbar[m] * a_arr[m]
                        inv_w = 1.0 / lw[m]
                        zb = lz[m] * inv_w
                        v_raw = lz2[m] * inv_w - zb * zb
                        zb_a[m] = zb
                        var_a[m] = v_raw if v_raw > 0.0 else 0.0
                        gv_c[m] = cons_scale * wm[m] * wm[m] if v_raw > 0.0 else 0.0
                    l_pix = 0.0
                    for i in range(nl):
                        l_pix += wm[i] * wm[i] * var_a[i]
                        gw_c[i] += cons_scale * 2.0 * wm[i] * var_a[i]
                        for j in range(i + 1, nl):
                            dz = zb_a[i] - zb_a[j]
                            adz = np.abs(dz)
                            l_pix += wm[i] * wm[j] * adz
                            gw_c[i] += cons_scale * wm[j] * adz
                            gw_c[j] += cons_scale * wm[i] * adz
                            if dz > 0.0:
                                sgn = 1.0
                            elif dz < 0.0:
                                sgn = -1.0
                            else:
                                sgn = 0.0
                            gz_c[i] += cons_scale * wm[i] * wm[j] * sgn
                            gz_c[j] -= cons_scale * wm[i] * wm[j] * sgn
                    cons_local += cons_scale * l_pix

                # suffix recursions back over the compositing chain
                gc0 = g_rgb[iy, ix, 0]
                gc1 = g_rgb[iy, ix, 1]
                gc2 = g_rgb[iy, ix, 2]
                ga_pix = g_alpha[iy, ix]
                sfx0 = np.float64(bg[0])
                sfx1 = np.float64(bg[1])
                sfx2 = np.float64(bg[2])
                q_sfx = 1.0
                rw_sfx = 0.0
                for m in range(nl - 1, -1, -1):
                    inv_w = 1.0 / lw[m]
                    ch0 = lc[m, 0] * inv_w
                    ch1 = lc[m, 1] * inv_w
                    ch2 = lc[m, 2] * inv_w
                    zb = lz[m] * inv_w
                    v_raw = lz2[m] * inv_w - zb * zb
                    g_alpha_m = tbar[m] * (gc0 * (ch0 - sfx0) + gc1 * (ch1 - sfx1)
                                           + gc2 * (ch2 - sfx2)
                                           + ga_pix * q_sfx + gw_c[m] - rw_sfx)
                    gch0 = gc0 * tbar[m] * a_arr[m]
                    gch1 = gc1 * tbar[m] * a_arr[m]
                    gch2 = gc2 * tbar[m] * a_arr[m]
                    g_w = g_alpha_m * alpha_rate * (1.0 - a_arr[m])
                    g_w -= (gch0 * ch0 + gch1 * ch1 + gch2 * ch2) * inv_w
                    g_w -= gz_c[m] * zb * inv_w
                    g_w += gv_c[m] * (zb * zb - v_raw) * inv_w
                    g_wtot[m] = g_w
                    g_craw[m, 0] = gch0 * inv_w
                    g_craw[m, 1] = gch1 * inv_w
                    g_craw[m, 2] = gch2 * inv_w
                    g_zc[m] = gz_c[m] * inv_w - 2.0 * gv_c[m] * zb * inv_w
                    g_z2c[m] = gv_c[m] * inv_w
                    sfx0 = a_arr[m] * ch0 + (1.0 - a_arr[m]) * sfx0
                    sfx1 = a_arr[m] * ch1 + (1.0 - a_arr[m]) * sfx1
                    sfx2 = a_arr[m] * ch2 + (1.0 - a_arr[m]) * sfx2
                    q_sfx *= 1.0 - a_arr[m]
                    rw_sfx = gw_c[m] * a_arr[m] + (1.0 - a_arr[m]) * rw_sfx

                # pass two: replay again, distribute per-surfel gradients
                m_cur = 0
                group_n = 0
                z_max_end = 0.0
                stopped = False
                for p in range(pa, pz):
                    r = pair_rec[p]
                    if ix < rect[r, 0] or ix >= rect[r, 2] or iy < rect[r, 1] or iy >= rect[r, 3]:
                        continue
                    if stopped:
                        continue
                    if group_n > 0 and z_start[r] > z_max_end:
                        m_cur += 1
                        group_n = 0
                        z_max_end = 0.0
                        if m_cur >= k_max:
                            stopped = True
                            continue
                    k0 = x * t4[r, 0] - t1[r, 0]
                    k1 = x * t4[r, 1] - t1[r, 1]
                    k2 = x * t4[r, 2] - t1[r, 2]
                    l0 = y * t4[r, 0] - t2[r, 0]
                    l1 = y * t4[r, 1] - t2[r, 1]
                    l2 = y * t4[r, 2] - t2[r, 2]
                    den = k0 * l1 - k1 * l0
                    if np.abs(den) < DENOM_EPS:
                        continue
                    u = (k1 * l2 - k2 * l1) / den
                    v = (k2 * l0 - k0 * l2) / den
                    rho2 = sinv[r, 0] * u * u + 2.0 * sinv[r, 1] * u * v + sinv[r, 2] * v * v
                    if rho2 >= r_cut2:
                        continue
                    w = n_f[r] * np.exp(-0.5 * rho2)
                    z = view_z[r]
                    group_n += 1
                    if z_end[r] > z_max_end:
                        z_max_end = z_end[r]

                    g_w = (g_wtot[m_cur]
                           + g_craw[m_cur, 0] * colors[r, 0]
                           + g_craw[m_cur, 1] * colors[r, 1]
                           + g_craw[m_cur, 2] * colors[r, 2]
                           + g_zc[m_cur] * z + g_z2c[m_cur] * z * z)
                    pb[p, 13] += w * g_craw[m_cur, 0]
                    pb[p, 14] += w * g_craw[m_cur, 1]
                    pb[p, 15] += w * g_craw[m_cur, 2]
                    pb[p, 16] += w * (g_zc[m_cur] + 2.0 * z * g_z2c[m_cur])

                    g_rho2 = -0.5 * w * g_w
                    pb[p, 12] += np.exp(-0.5 * rho2) * g_w
                    pb[p, 9] += g_rho2 * u * u
                    pb[p, 10] += g_rho2 * 2.0 * u * v
                    pb[p, 11] += g_rho2 * v * v
                    g_u = g_rho2 * 2.0 * (sinv[r, 0] * u + sinv[r, 1] * v)
                    g_v = g_rho2 * 2.0 * (sinv[r, 1] * u + sinv[r, 2] * v)

                    gp0 = g_u / den
                    gp1 = g_v / den
                    gp2 = -(g_u * u + g_v * v) / den
                    gk0 = l1 * gp2 - l2 * gp1
                    gk1 = l2 * gp0 - l0 * gp2
                    gk2 = l0 * gp1 - l1 * gp0
                    gl0 = gp1 * k2 - gp2 * k1
                    gl1 = gp2 * k0 - gp0 * k2
                    gl2 = gp0 * k1 - gp1 * k0
                    pb[p, 0] -= gk0
                    pb[p, 1] -= gk1
                    pb[p, 2] -= gk2
                    pb[p, 3] -= gl0
                    pb[p, 4] -= gl1
                    pb[p, 5] -= gl2
                    pb[p, 6] += x * gk0 + y * gl0
                    pb[p, 7] += x * gk1 + y * gl1
                    pb[p, 8] += x * gk2 + y * gl2

                    # translation gradient of the splat in ndc, per pixel;
                    # norms are summed so opposite pulls cannot cancel
                    gsx = -gk2 * t4[r, 2]
                    gsy = -gl2 * t4[r, 2]
                    ss[p] += np.sqrt(gsx * gsx + gsy * gsy)
                    touch[p] += 1
        cons_out[t] = cons_local


def backward_image(cloud: SurfelCloud, result: RenderResult,
                   g_rgb=None, g_alpha=None, cons_scale=0.0) -> BackwardResult:
    """Gradients of a scalar loss w.r.t. all surfel parameters (and the
    environment when the render was lit by one), given upstream per-pixel
    gradients on the color and coverage images.

    cons_scale > 0 additionally applies the depth-consolidation penalty
    (pairwise layer-weight overlap plus per-layer depth variance, both on
    composite weights) and returns its value."""
    opt = result.options
    if opt.depth_mode != "interval":
        raise ValueError("backward requires depth_mode='interval'")
    proj = result.proj
    cam = result.camera
    dtype = np.dtype(opt.dtype).type
    h, w = cam.height, cam.width
    n_cloud = len(cloud)

    if g_rgb is None:
        g_rgb = np.zeros((h, w, 3))
    if g_alpha is None:
        g_alpha = np.zeros((h, w))
    g_rgb = np.ascontiguousarray(g_rgb, dtype=np.float64)
    g_alpha = np.ascontiguousarray(g_alpha, dtype=np.float64)

    tile_offsets, pair_rec = result.tile_offsets, result.pair_rec
    ntx = (w + opt.tile - 1) // opt.tile
    ntiles = len(tile_offsets) - 1
    npairs = len(pair_rec)

    xs = ((np.arange(w) + 0.5) * (2.0 / w) - 1.0).astype(dtype)
    ys = (1.0 - (np.arange(h) + 0.5) * (2.0 / h)).astype(dtype)
    bg = np.asarray(opt.background, dtype=dtype)
    colors_kept = np.ascontiguousarray(result.colors[proj.source_index], dtype=dtype)

    pb = np.zeros((npairs, 17), dtype=np.float64)
    ss = np.zeros(npairs, dtype=np.float64)
    touch = np.zeros(npairs, dtype=np.int64)
    cons_out = np.zeros(ntiles, dtype=np.float64)

    workers = _resolve_workers(opt.workers)
    prev = get_num_threads()
    set_num_threads(workers)
    try:
        _backward_kernel(w, h, opt.tile, ntx, ntiles,
                         tile_offsets, pair_rec,
                         proj.t1, proj.t2, proj.t4, proj.sinv, proj.n_f,
                         proj.view_z, proj.eps_z,
                         proj.z_start.astype(dtype), proj.z_end.astype(dtype),
                         proj.rect, colors_kept, xs, ys, bg,
                         dtype(opt.r_cut * opt.r_cut), dtype(opt.gamma / (2.0 * np.pi)),
                         opt.k_max,
                         g_rgb, g_alpha, float(cons_scale),
                         pb, ss, touch, cons_out)
    finally:
        set_num_threads(prev)
    cons_loss = float(np.sum(cons_out))

    # serial fixed-order reduction: pair buffers -> per-record gradients
    nrec = len(proj)
    merged = np.empty((nrec, 17), dtype=np.float64)
    for c in range(17):
        merged[:, c] = np.bincount(pair_rec, weights=pb[:, c], minlength=nrec)
    ss_rec = np.bincount(pair_rec, weights=ss, minlength=nrec)
    touch_rec = np.bincount(pair_rec, weights=touch.astype(np.float64), minlength=nrec)

    g_t1 = merged[:, 0:3]
    g_t2 = merged[:, 3:6]
    g_t4 = merged[:, 6:9]
    g_sinv = merged[:, 9:12]
    g_nf = merged[:, 12]
    g_col_rec = merged[:, 13:16]
    g_z = merged[:, 16]

    t1 = proj.t1.astype(np.float64)
    t2 = proj.t2.astype(np.float64)
    t4 = proj.t4.astype(np.float64)

    if opt.mip_enabled and nrec > 0:
        _mip_chain_backward(proj, cam, t1, t2, t4, g_sinv, g_nf, g_t1, g_t2, g_t4)

    # T rows back to camera-space tangents and center
    pm = cam.proj.astype(np.float64)
    g_tu = (g_t1[:, 0:1] * pm[0, :3] + g_t2[:, 0:1] * pm[1, :3] + g_t4[:, 0:1] * pm[3, :3])
    g_tv = (g_t1[:, 1:2] * pm[0, :3] + g_t2[:, 1:2] * pm[1, :3] + g_t4[:, 1:2] * pm[3, :3])
    g_cc = (g_t1[:, 2:3] * pm[0, :3] + g_t2[:, 2:3] * pm[1, :3] + g_t4[:, 2:3] * pm[3, :3])
    g_cc[:, 2] -= g_z  # view depth is -z in camera space

    # camera space back to world
    rv = cam.view[:3, :3].astype(np.float64)
    g_centers_rec = g_cc @ rv
    g_tuw = g_tu @ rv
    g_tvw = g_tv @ rv

    src = proj.source_index
    quats64 = cloud.quats.astype(np.float64)
    u_hat, v_hat, _ = quat_to_frame(quats64)
    scales = np.exp(cloud.log_scales.astype(np.float64))

    g_su = np.sum(g_tuw * u_hat[src], axis=1)
    g_sv = np.sum(g_tvw * v_hat[src], axis=1)

    g_centers = np.zeros((n_cloud, 3))
    g_log_scales = np.zeros((n_cloud, 2))
    g_u_hat = np.zeros((n_cloud, 3))
    g_v_hat = np.zeros((n_cloud, 3))
    g_colors = np.zeros((n_cloud, 3))
    ss_grad = np.zeros(n_cloud)
    touched = np.zeros(n_cloud, dtype=bool)

    g_centers[src] = g_centers_rec
    g_log_scales[src, 0] = g_su * scales[src, 0]
    g_log_scales[src, 1] = g_sv * scales[src, 1]
    g_u_hat[src] = scales[src, 0:1] * g_tuw
    g_v_hat[src] = scales[src, 1:2] * g_tvw
    g_colors[src] = g_col_rec
    ss_grad[src] = ss_rec
    touched[src] = touch_rec > 0

    g_n_hat = np.zeros((n_cloud, 3))
    g_albedo_raw = np.zeros((n_cloud, 3))
    g_metallic_raw = np.zeros(n_cloud)
    g_roughness_raw = np.zeros(n_cloud)
    g_env = None
    if result.color_source == "ibl":
        from .shading import shade_backward
        sh = shade_backward(result.shading_ctx, g_colors)
        g_albedo_raw = sh.albedo_raw
        g_metallic_raw = sh.metallic_raw
        g_roughness_raw = sh.roughness_raw
        g_n_hat = sh.normals
        g_centers += sh.centers
        g_env = sh.env_base_log
    elif result.color_source == "albedo":
        alb = cloud.albedo.astype(np.float64)
        g_albedo_raw = g_colors * alb * (1.0 - alb)

    g_quats = quat_frame_backward(quats64, g_u_hat, g_v_hat, g_n_hat)

    g_background = np.einsum("ijc,ij->c", g_rgb, 1.0 - result.alpha.astype(np.float64))

    return BackwardResult(centers=g_centers, quats=g_quats,
                          log_scales=g_log_scales,
                          albedo_raw=g_albedo_raw, metallic_raw=g_metallic_raw,
                          roughness_raw=g_roughness_raw, colors=g_colors,
                          env_base_log=g_env, background=g_background,
                          ss_grad=ss_grad, touched=touched, cons_loss=cons_loss)


def _mip_chain_backward(proj, cam, t1, t2, t4, g_sinv, g_nf, g_t1, g_t2, g_t4):
    """Chain filter-parameter gradients through the inverse covariance, the
    normalization, and the probe-differenced Jacobian back onto the T rows.
    Mutates g_t1, g_t2, g_t4 in place."""
    sigma = float(proj.options.mip_sigma)
    jac = proj.jac.astype(np.float64)
    ok = proj.jac_ok

    j00, j01 = jac[:, 0, 0], jac[:, 0, 1]
    j10, j11 = jac[:, 1, 0], jac[:, 1, 1]
    s00 = 1.0 + sigma * (j00 * j00 + j01 * j01)
    s01 = sigma * (j00 * j10 + j01 * j11)
    s11 = 1.0 + sigma * (j10 * j10 + j11 * j11)
    det = s00 * s11 - s01 * s01
    b00 = s11 / det
    b01 = -s01 / det
    b11 = s00 / det
    nf = 1.0 / np.sqrt(det)

    # gradient w.r.t. the filtered covariance (symmetric full-matrix form)
    g00 = g_sinv[:, 0]
    g01 = 0.5 * g_sinv[:, 1]
    g11 = g_sinv[:, 2]
    bg00 = b00 * g00 + b01 * g01
    bg01 = b00 * g01 + b01 * g11
    bg10 = b01 * g00 + b11 * g01
    bg11 = b01 * g01 + b11 * g11
    ga00 = -(bg00 * b00 + bg01 * b01) - 0.5 * g_nf * nf * b00
    ga01 = -(bg00 * b01 + bg01 * b11) - 0.5 * g_nf * nf * b01
    ga11 = -(bg10 * b01 + bg11 * b11) - 0.5 * g_nf * nf * b11

    two_s = 2.0 * sigma
    gj00 = two_s * (ga00 * j00 + ga01 * j10)
    gj01 = two_s * (ga00 * j01 + ga01 * j11)
    gj10 = two_s * (ga01 * j00 + ga11 * j10)
    gj11 = two_s * (ga01 * j01 + ga11 * j11)
    live = ok.astype(np.float64)
    gj00 *= live
    gj01 *= live
    gj10 *= live
    gj11 *= live

    # probe positions around the projected center
    d4 = t4[:, 2]
    cx = t1[:, 2] / d4
    cy = t2[:, 2] / d4
    dx = 1.0 / cam.width
    dy = 1.0 / cam.height
    gcx = np.zeros_like(cx)
    gcy = np.zeros_like(cy)
    probes = ((cx + dx, cy, gj00, gj10), (cx - dx, cy, -gj00, -gj10),
              (cx, cy + dy, gj01, gj11), (cx, cy - dy, -gj01, -gj11))
    for px, py, g_u, g_v in probes:
        k = px[:, None] * t4 - t1
        l = py[:, None] * t4 - t2
        p = np.cross(k, l)
        den = p[:, 2]
        hit = np.abs(den) >= DENOM_EPS
        safe = np.where(hit, den, 1.0)
        u = p[:, 0] / safe
        v = p[:, 1] / safe
        g_u = np.where(hit & ok, g_u, 0.0)
        g_v = np.where(hit & ok, g_v, 0.0)
        gp = np.stack([g_u / safe, g_v / safe, -(g_u * u + g_v * v) / safe], axis=1)
        gk = np.cross(l, gp)
        gl = np.cross(gp, k)
        g_t1 -= gk
        g_t2 -= gl
        g_t4 += px[:, None] * gk + py[:, None] * gl
        gcx += np.sum(gk * t4, axis=1)
        gcy += np.sum(gl * t4, axis=1)

    g_t1[:, 2] += gcx / d4
    g_t4[:, 2] -= gcx * cx / d4
    g_t2[:, 2] += gcy / d4
    g_t4[:, 2] -= gcy * cy / d4
