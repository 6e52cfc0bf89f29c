"""Tiled, compiled rasterization.

The image is split into tiles; each surfel record lands in every tile its
pixel rectangle touches, and each tile's list is sorted by interval start
(ties by record index). One thread owns one tile, so the forward pass writes
each pixel exactly once and is bit-identical for any worker count. Per-pixel
semantics match reference.render_reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange, set_num_threads, get_num_threads

from .preprocess import PreprocessOptions, ProjectedSurfels, preprocess, DENOM_EPS
from .reference import GAMMA, K_MAX, depth_mode_code
from .surfels import SurfelCloud

TILE = 16

WORKERS_ENV_VAR = "SURFSPLAT_WORKERS"


def workers_from_env(default=1):
    """Worker count from the environment, clamped to what numba can host."""
    try:
        n = int(os.environ.get(WORKERS_ENV_VAR, default))
    except ValueError:
        n = default
    return max(1, min(n, int(os.environ.get("NUMBA_NUM_THREADS", n) or n)))


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    depth_mode: str = "interval"     # interval | ternary | ternary-alpha
    gamma: float = GAMMA
    k_max: int = K_MAX
    tile: int = TILE
    workers: int | None = None       # None: WORKERS_ENV_VAR, default 1
    mip_enabled: bool = True
    mip_sigma: float = 0.1
    r_cut: float = 3.0
    dtype: type = np.float32
    shade: str = "ibl"               # ibl | albedo (when no colors are passed)
    collect_stacks: bool = False
    with_cover_counts: bool = False

    def preprocess_options(self):
        return PreprocessOptions(r_cut=self.r_cut, mip_enabled=self.mip_enabled,
                                 mip_sigma=self.mip_sigma, dtype=self.dtype)


@dataclass
class RenderResult:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    nlayers: np.ndarray
    stats: dict
    proj: ProjectedSurfels
    colors: np.ndarray
    tile_offsets: np.ndarray
    pair_rec: np.ndarray
    options: RenderOptions
    camera: object
    shading_ctx: object = None       # populated when shading ran, used by backward
    color_source: str = "explicit"   # explicit | ibl | albedo
    cover_counts: np.ndarray | None = None   # per input-cloud surfel
    stacks: dict | None = None


@njit(cache=True)
def _fill_pairs(rect, tile, ntx, offsets, pair_tile, pair_rec):
    for i in range(rect.shape[0]):
        tx0 = rect[i, 0] // tile
        ty0 = rect[i, 1] // tile
        tx1 = (rect[i, 2] - 1) // tile
        ty1 = (rect[i, 3] - 1) // tile
        pos = offsets[i]
        for ty in range(ty0, ty1 + 1):
            base = ty * ntx
            for tx in range(tx0, tx1 + 1):
                pair_tile[pos] = base + tx
                pair_rec[pos] = i
                pos += 1


def bin_and_sort(proj: ProjectedSurfels, tile=TILE):
    """Assign records to tiles and sort each tile's list by (z_start, index).

    Returns (tile_offsets (T+1,) int64, pair_rec (P,) int32, ntx, nty)."""
    ntx = (proj.width + tile - 1) // tile
    nty = (proj.height + tile - 1) // tile
    ntiles = ntx * nty
    rect = proj.rect
    if len(proj) == 0:
        return np.zeros(ntiles + 1, dtype=np.int64), np.empty(0, dtype=np.int32), ntx, nty
    spans_x = (rect[:, 2] - 1) // tile - rect[:, 0] // tile + 1
    spans_y = (rect[:, 3] - 1) // tile - rect[:, 1] // tile + 1
    counts = (spans_x * spans_y).astype(np.int64)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    pair_tile = np.empty(total, dtype=np.int64)
    pair_rec = np.empty(total, dtype=np.int32)
    _fill_pairs(rect, tile, ntx, offsets[:-1], pair_tile, pair_rec)
    order = np.lexsort((pair_rec, proj.z_start[pair_rec], pair_tile))
    pair_tile = pair_tile[order]
    pair_rec = pair_rec[order]
    tile_offsets = np.zeros(ntiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair_tile, minlength=ntiles), out=tile_offsets[1:])
    return tile_offsets, pair_rec, ntx, nty


@njit(cache=True, parallel=True)
def _forward_kernel(width, height, tile, ntx, ntiles,
                    tile_offsets, pair_rec,
                    t1, t2, t4, sinv, n_f, view_z, eps_z, z_start, z_end,
                    rect, colors, xs, ys, bg,
                    r_cut2, alpha_rate, k_max, depth_mode,
                    rgb, alpha, depth, nlayers,
                    count_cover, cover_counts,
                    collect_stacks, st_w, st_c, st_z, st_z2, st_n,
                    tile_discarded):
    for t in prange(ntiles):
        p0 = tile_offsets[t]
        p1 = tile_offsets[t + 1]
        if p0 == p1:
            continue
        tx = t % ntx
        ty = t // ntx
        x_lo = tx * tile
        y_lo = ty * tile
        x_hi = min(x_lo + tile, width)
        y_hi = min(y_lo + tile, height)
        for iy in range(y_lo, y_hi):
            y = ys[iy]
            for ix in range(x_lo, x_hi):
                x = xs[ix]
                if depth_mode == 0:
                    # depth-interval grouping with streaming front-to-back compositing
                    w_g = 0.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    z_g = 0.0
                    z2_g = 0.0
                    z_max_end = 0.0
                    layers = 0
                    trans = 1.0
                    out0 = 0.0
                    out1 = 0.0
                    out2 = 0.0
                    d_num = 0.0
                    d_den = 0.0
                    stopped = False
                    for p in range(p0, p1):
                        r = pair_rec[p]
                        if ix < rect[r, 0] or ix >= rect[r, 2] or iy < rect[r, 1] or iy >= rect[r, 3]:
                            continue
                        if stopped:
                            tile_discarded[t] += 1
                            continue
                        if w_g > 0.0 and z_start[r] > z_max_end:
                            # close the current layer
                            a_k = 1.0 - np.exp(-w_g * alpha_rate)
                            inv_w = 1.0 / w_g
                            out0 += trans * a_k * c0 * inv_w
                            out1 += trans * a_k * c1 * inv_w
                            out2 += trans * a_k * c2 * inv_w
                            d_num += trans * a_k * z_g * inv_w
                            d_den += trans * a_k
                            trans *= 1.0 - a_k
                            if collect_stacks != 0:
                                st_w[iy, ix, layers] = w_g
                                st_c[iy, ix, layers, 0] = c0
                                st_c[iy, ix, layers, 1] = c1
                                st_c[iy, ix, layers, 2] = c2
                                st_z[iy, ix, layers] = z_g
                                st_z2[iy, ix, layers] = z2_g
                            layers += 1
                            w_g = 0.0
                            c0 = 0.0
                            c1 = 0.0
                            c2 = 0.0
                            z_g = 0.0
                            z2_g = 0.0
                            z_max_end = 0.0
                            if layers >= k_max:
                                stopped = True
                                tile_discarded[t] += 1
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
                        if count_cover != 0:
                            cover_counts[p] += 1
                        w = n_f[r] * np.exp(-0.5 * rho2)
                        z = view_z[r]
                        w_g += w
                        c0 += w * colors[r, 0]
                        c1 += w * colors[r, 1]
                        c2 += w * colors[r, 2]
                        z_g += w * z
                        z2_g += w * z * z
                        if collect_stacks != 0 and layers < k_max:
                            st_n[iy, ix, layers] += 1
                        if z_end[r] > z_max_end:
                            z_max_end = z_end[r]
                    if w_g > 0.0:
                        a_k = 1.0 - np.exp(-w_g * alpha_rate)
                        inv_w = 1.0 / w_g
                        out0 += trans * a_k * c0 * inv_w
                        out1 += trans * a_k * c1 * inv_w
                        out2 += trans * a_k * c2 * inv_w
                        d_num += trans * a_k * z_g * inv_w
                        d_den += trans * a_k
                        trans *= 1.0 - a_k
                        if collect_stacks != 0:
                            st_w[iy, ix, layers] = w_g
                            st_c[iy, ix, layers, 0] = c0
                            st_c[iy, ix, layers, 1] = c1
                            st_c[iy, ix, layers, 2] = c2
                            st_z[iy, ix, layers] = z_g
                            st_z2[iy, ix, layers] = z2_g
                        layers += 1
                    if layers > 0:
                        rgb[iy, ix, 0] = out0 + trans * bg[0]
                        rgb[iy, ix, 1] = out1 + trans * bg[1]
                        rgb[iy, ix, 2] = out2 + trans * bg[2]
                        alpha[iy, ix] = 1.0 - trans
                        if d_den > 0.0:
                            depth[iy, ix] = d_num / d_den
                        nlayers[iy, ix] = layers
                else:
                    # ternary extended depth test, single layer
                    w_g = 0.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    z_g = 0.0
                    z_ref = 0.0
                    eps_ref = 0.0
                    for p in range(p0, p1):
                        r = pair_rec[p]
                        if ix < rect[r, 0] or ix >= rect[r, 2] or iy < rect[r, 1] or iy >= rect[r, 3]:
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
                        if count_cover != 0:
                            cover_counts[p] += 1
                        w = n_f[r] * np.exp(-0.5 * rho2)
                        z = view_z[r]
                        if w_g == 0.0:
                            w_g = w
                            c0 = w * colors[r, 0]
                            c1 = w * colors[r, 1]
                            c2 = w * colors[r, 2]
                            z_g = w * z
                            z_ref = z
                            eps_ref = eps_z[r]
                        else:
                            band = eps_z[r] + eps_ref
                            if z < z_ref - band:
                                w_g = w
                                c0 = w * colors[r, 0]
                                c1 = w * colors[r, 1]
                                c2 = w * colors[r, 2]
                                z_g = w * z
                                z_ref = z
                                eps_ref = eps_z[r]
                            elif z <= z_ref + band:
                                w_g += w
                                c0 += w * colors[r, 0]
                                c1 += w * colors[r, 1]
                                c2 += w * colors[r, 2]
                                z_g += w * z
                                if z < z_ref:
                                    z_ref = z
                                    eps_ref = eps_z[r]
                    if w_g > 0.0:
                        inv_w = 1.0 / w_g
                        if depth_mode == 2:
                            a_k = 1.0 - np.exp(-w_g * alpha_rate)
                        else:
                            a_k = 1.0
                        rgb[iy, ix, 0] = a_k * c0 * inv_w + (1.0 - a_k) * bg[0]
                        rgb[iy, ix, 1] = a_k * c1 * inv_w + (1.0 - a_k) * bg[1]
                        rgb[iy, ix, 2] = a_k * c2 * inv_w + (1.0 - a_k) * bg[2]
                        alpha[iy, ix] = a_k
                        depth[iy, ix] = z_g * inv_w
                        nlayers[iy, ix] = 1


def _resolve_workers(workers):
    if workers is None:
        workers = workers_from_env()
    cap = int(os.environ.get("NUMBA_NUM_THREADS", "1"))
    if workers > cap:
        raise ValueError(f"workers={workers} exceeds NUMBA_NUM_THREADS={cap}")
    return workers


def render(cloud: SurfelCloud, camera, options: RenderOptions | None = None,
           env=None, colors=None, proj: ProjectedSurfels | None = None) -> RenderResult:
    """Render a surfel cloud. Colors come from, in order of precedence: the
    explicit per-surfel colors argument, environment shading when env is
    given, or the activated albedo."""
    opt = options or RenderOptions()
    dtype = np.dtype(opt.dtype).type
    if proj is None:
        proj = preprocess(cloud, camera, opt.preprocess_options())

    shading_ctx = None
    color_source = "explicit"
    if colors is None:
        if env is not None and opt.shade == "ibl":
            from .shading import shade_surfels
            colors, shading_ctx = shade_surfels(cloud, env, camera, dtype=dtype)
            color_source = "ibl"
        else:
            colors = cloud.albedo.astype(dtype)
            color_source = "albedo"
    colors = np.ascontiguousarray(colors, dtype=dtype)
    if not np.isfinite(colors).all():
        raise ValueError("non-finite surfel colors")
    colors_kept = colors[proj.source_index]

    tile_offsets, pair_rec, ntx, nty = bin_and_sort(proj, opt.tile)
    ntiles = ntx * nty
    h, w = camera.height, camera.width
    bg = np.asarray(opt.background, dtype=dtype)
    rgb = np.empty((h, w, 3), dtype=dtype)
    rgb[:] = bg
    alpha = np.zeros((h, w), dtype=dtype)
    depth = np.zeros((h, w), dtype=dtype)
    nlayers = np.zeros((h, w), dtype=np.int32)

    xs = ((np.arange(w) + 0.5) * (2.0 / w) - 1.0).astype(dtype)
    ys = (1.0 - (np.arange(h) + 0.5) * (2.0 / h)).astype(dtype)

    if opt.collect_stacks:
        st_w = np.zeros((h, w, opt.k_max), dtype=dtype)
        st_c = np.zeros((h, w, opt.k_max, 3), dtype=dtype)
        st_z = np.zeros((h, w, opt.k_max), dtype=dtype)
        st_z2 = np.zeros((h, w, opt.k_max), dtype=dtype)
        st_n = np.zeros((h, w, opt.k_max), dtype=np.int32)
    else:
        st_w = np.zeros((1, 1, 1), dtype=dtype)
        st_c = np.zeros((1, 1, 1, 3), dtype=dtype)
        st_z = np.zeros((1, 1, 1), dtype=dtype)
        st_z2 = np.zeros((1, 1, 1), dtype=dtype)
        st_n = np.zeros((1, 1, 1), dtype=np.int32)
    pair_cover = np.zeros(len(pair_rec) if opt.with_cover_counts else 1, dtype=np.int64)
    tile_discarded = np.zeros(ntiles, dtype=np.int64)

    workers = _resolve_workers(opt.workers)
    prev = get_num_threads()
    set_num_threads(workers)
    try:
        _forward_kernel(w, h, opt.tile, ntx, ntiles,
                        tile_offsets, pair_rec,
                        proj.t1, proj.t2, proj.t4, proj.sinv, proj.n_f,
                        proj.view_z, proj.eps_z,
                        proj.z_start.astype(dtype), proj.z_end.astype(dtype),
                        proj.rect, colors_kept, xs, ys, bg,
                        dtype(opt.r_cut * opt.r_cut), dtype(opt.gamma / (2.0 * np.pi)),
                        opt.k_max, depth_mode_code(opt.depth_mode),
                        rgb, alpha, depth, nlayers,
                        1 if opt.with_cover_counts else 0, pair_cover,
                        1 if opt.collect_stacks else 0, st_w, st_c, st_z, st_z2, st_n,
                        tile_discarded)
    finally:
        set_num_threads(prev)

    cover_counts = None
    if opt.with_cover_counts:
        rec_counts = np.zeros(len(proj), dtype=np.int64)
        np.add.at(rec_counts, pair_rec, pair_cover)
        cover_counts = np.zeros(len(proj.cull_code), dtype=np.int64)
        cover_counts[proj.source_index] = rec_counts

    codes = np.bincount(proj.cull_code, minlength=5)
    stats = {
        "surfels_in": int(len(proj.cull_code)),
        "surfels_rasterized": int(len(proj)),
        "culled_nonfinite": int(codes[1]),
        "culled_behind": int(codes[2]),
        "culled_near_plane": int(codes[3]),
        "culled_offscreen": int(codes[4]),
        "pairs": int(len(pair_rec)),
        "discarded_overflow": int(tile_discarded.sum()),
        "workers": workers,
    }
    stacks = None
    if opt.collect_stacks:
        stacks = {"weight_sum": st_w, "color_sum": st_c, "depth_sum": st_z,
                  "depth_sq_sum": st_z2, "member_count": st_n}
    return RenderResult(rgb=rgb, alpha=alpha, depth=depth, nlayers=nlayers,
                        stats=stats, proj=proj, colors=colors,
                        tile_offsets=tile_offsets, pair_rec=pair_rec,
                        options=opt, camera=camera, shading_ctx=shading_ctx,
                        color_source=color_source,
                        cover_counts=cover_counts, stacks=stacks)
