"""Single-threaded reference rasterization path.

Defines the per-pixel semantics the compiled kernels must reproduce: sorted
front-to-back traversal, depth-interval layer grouping, Shepard-normalized
layer colors, coverage alpha, and front-to-back compositing. Slow by design;
used by the tests and for golden comparisons on small images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import ProjectedSurfels, intersect_ray

K_MAX = 16           # composited layers per pixel; later groups are discarded
GAMMA = 2.0 * np.pi  # coverage rate: alpha = 1 - exp(-gamma * W / (2 pi))

DEPTH_INTERVAL = 0
DEPTH_TERNARY = 1
DEPTH_TERNARY_ALPHA = 2

_DEPTH_MODES = {"interval": DEPTH_INTERVAL, "ternary": DEPTH_TERNARY, "ternary-alpha": DEPTH_TERNARY_ALPHA}


def depth_mode_code(mode):
    if isinstance(mode, str):
        try:
            return _DEPTH_MODES[mode]
        except KeyError:
            raise ValueError(f"unknown depth mode {mode!r}, expected one of {sorted(_DEPTH_MODES)}")
    return int(mode)


def assign_layers(z_start, z_end, k_max=K_MAX):
    """Layer index per covering record of one pixel, front to back.

    Input intervals must already be sorted by start (ties by record index).
    A record opens a new layer when its start lies beyond the furthest end
    accepted into the current layer. Compositing stops once k_max layers are
    finalized; the record that would open the next layer, and everything after
    it, gets index -1. Returns (layer_ids, n_layers)."""
    z_start = np.asarray(z_start, dtype=np.float64)
    z_end = np.asarray(z_end, dtype=np.float64)
    ids = np.full(len(z_start), -1, dtype=np.int64)
    layer = 0
    in_group = False
    z_max_end = -np.inf
    for i in range(len(z_start)):
        if in_group and z_start[i] > z_max_end:
            layer += 1
            if layer >= k_max:
                break
            in_group = False
            z_max_end = -np.inf
        ids[i] = layer
        in_group = True
        z_max_end = max(z_max_end, z_end[i])
    n_layers = int(ids.max()) + 1 if (ids >= 0).any() else 0
    return ids, n_layers


def coverage_alpha(weight_sum, gamma=GAMMA):
    """Opacity of a layer with accumulated kernel weight W.

    alpha saturates exponentially: a fully covered layer (W ~ 2 pi) lands at
    about 0.998, a half-covered one (W = ln 2 at the default rate) at 0.5."""
    return 1.0 - np.exp(-np.asarray(weight_sum) * (gamma / (2.0 * np.pi)))


@dataclass
class PixelLayerStack:
    """Raw per-layer accumulators for one pixel, front to back."""

    weight_sum: np.ndarray    # (K,)
    color_sum: np.ndarray     # (K, 3)
    depth_sum: np.ndarray     # (K,)
    depth_sq_sum: np.ndarray  # (K,)
    member_count: np.ndarray  # (K,) int
    discarded: int = 0        # surfels in groups beyond K_MAX

    def __len__(self):
        return len(self.weight_sum)

    def colors(self):
        """Shepard-normalized layer colors."""
        return self.color_sum / self.weight_sum[:, None]

    def alphas(self, gamma=GAMMA):
        return coverage_alpha(self.weight_sum, gamma)

    def depth_mean(self):
        return self.depth_sum / self.weight_sum

    def depth_var(self):
        zbar = self.depth_mean()
        return np.maximum(self.depth_sq_sum / self.weight_sum - zbar * zbar, 0.0)

    def composite_weights(self, gamma=GAMMA):
        """Per-layer compositing weight T_k * alpha_k."""
        alphas = self.alphas(gamma)
        trans = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[:-1]]))
        return trans * alphas


def composite_layers(alphas, colors, background):
    """Front-to-back over compositing of finalized layers onto a background.

    Returns (rgb, alpha). alpha is total coverage 1 - prod(1 - alpha_k)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    trans = 1.0
    rgb = np.zeros(3)
    for a, c in zip(alphas, colors):
        rgb += trans * a * c
        trans *= 1.0 - a
    rgb += trans * background
    return rgb, 1.0 - trans


def _pixel_weights(proj: ProjectedSurfels, idx, ndc_x, ndc_y, r_cut2):
    """Kernel weights of the given records at one pixel; returns (idx, w, z)."""
    u, v, hit = intersect_ray(proj.t1[idx], proj.t2[idx], proj.t4[idx], ndc_x, ndc_y)
    s = proj.sinv[idx]
    rho2 = s[:, 0] * u * u + 2.0 * s[:, 1] * u * v + s[:, 2] * v * v
    cover = hit & (rho2 < r_cut2)
    w = proj.n_f[idx] * np.exp(-0.5 * rho2)
    return cover, w


def rasterize_pixel(proj: ProjectedSurfels, order, colors, ndc_x, ndc_y,
                    r_cut=None, k_max=K_MAX):
    """Group one pixel's covering surfels into depth layers.

    order must list record indices sorted by interval start (ties by index).
    A new layer opens whenever a surfel's interval starts beyond the furthest
    end seen in the current group. Returns a PixelLayerStack."""
    r_cut = proj.options.r_cut if r_cut is None else r_cut
    order = np.asarray(order, dtype=np.int64)
    cover, w_all = _pixel_weights(proj, order, ndc_x, ndc_y, r_cut * r_cut)

    weight, color, dsum, dsq, count = [], [], [], [], []
    w_g = 0.0
    c_g = np.zeros(3)
    z_g = 0.0
    z2_g = 0.0
    n_g = 0
    z_max_end = 0.0
    discarded = 0
    z_start = proj.z_start
    z_end = proj.z_end
    for pos, i in enumerate(order):
        if not cover[pos]:
            continue
        if w_g > 0.0 and z_start[i] > z_max_end:
            weight.append(w_g); color.append(c_g); dsum.append(z_g); dsq.append(z2_g); count.append(n_g)
            w_g, c_g, z_g, z2_g, n_g = 0.0, np.zeros(3), 0.0, 0.0, 0
            z_max_end = 0.0
            if len(weight) >= k_max:
                # compositing stops entirely: everything deeper is discarded
                discarded += sum(1 for p2 in range(pos, len(order)) if cover[p2])
                break
        w = float(w_all[pos])
        z = float(proj.view_z[i])
        w_g += w
        c_g = c_g + w * np.asarray(colors[i], dtype=np.float64)
        z_g += w * z
        z2_g += w * z * z
        n_g += 1
        z_max_end = max(z_max_end, float(z_end[i]))
    if w_g > 0.0:
        weight.append(w_g); color.append(c_g); dsum.append(z_g); dsq.append(z2_g); count.append(n_g)
    return PixelLayerStack(
        weight_sum=np.asarray(weight, dtype=np.float64),
        color_sum=np.asarray(color, dtype=np.float64).reshape(-1, 3),
        depth_sum=np.asarray(dsum, dtype=np.float64),
        depth_sq_sum=np.asarray(dsq, dtype=np.float64),
        member_count=np.asarray(count, dtype=np.int64),
        discarded=discarded,
    )


def _rasterize_pixel_ternary(proj, order, colors, ndc_x, ndc_y, r_cut):
    """Single-layer extended depth test: closer fragments replace the layer,
    fragments within the combined depth band blend, deeper ones are dropped."""
    order = np.asarray(order, dtype=np.int64)
    cover, w_all = _pixel_weights(proj, order, ndc_x, ndc_y, r_cut * r_cut)
    w_g = 0.0
    c_g = np.zeros(3)
    z_g = 0.0
    z_ref = 0.0
    eps_ref = 0.0
    for pos, i in enumerate(order):
        if not cover[pos]:
            continue
        w = float(w_all[pos])
        z = float(proj.view_z[i])
        eps = float(proj.eps_z[i])
        if w_g == 0.0:
            w_g, c_g, z_g = w, w * np.asarray(colors[i], dtype=np.float64), w * z
            z_ref, eps_ref = z, eps
            continue
        band = eps + eps_ref
        if z < z_ref - band:
            w_g, c_g, z_g = w, w * np.asarray(colors[i], dtype=np.float64), w * z
            z_ref, eps_ref = z, eps
        elif z <= z_ref + band:
            w_g += w
            c_g = c_g + w * np.asarray(colors[i], dtype=np.float64)
            z_g += w * z
            if z < z_ref:
                z_ref, eps_ref = z, eps
        # else: ternary reject
    return w_g, c_g, z_g


def render_reference(proj: ProjectedSurfels, colors, background=(0.0, 0.0, 0.0),
                     gamma=GAMMA, depth_mode="interval", k_max=K_MAX,
                     collect_stacks=False):
    """Render by looping pixels. Returns dict with rgb, alpha, depth, nlayers
    (and stacks when collect_stacks)."""
    mode = depth_mode_code(depth_mode)
    h, w = proj.height, proj.width
    order_all = np.lexsort((proj.source_index, proj.z_start))
    rgb = np.zeros((h, w, 3))
    rgb[:] = np.asarray(background, dtype=np.float64)
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    nlayers = np.zeros((h, w), dtype=np.int32)
    stacks = [[None] * w for _ in range(h)] if collect_stacks else None
    colors = np.asarray(colors, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)

    xs = (np.arange(w) + 0.5) * (2.0 / w) - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) * (2.0 / h)
    rect = proj.rect
    for iy in range(h):
        for ix in range(w):
            inside = (rect[:, 0] <= ix) & (ix < rect[:, 2]) & (rect[:, 1] <= iy) & (iy < rect[:, 3])
            order = order_all[inside[order_all]]
            if len(order) == 0:
                continue
            if mode == DEPTH_INTERVAL:
                stack = rasterize_pixel(proj, order, colors, xs[ix], ys[iy], k_max=k_max)
                if collect_stacks:
                    stacks[iy][ix] = stack
                if len(stack) == 0:
                    continue
                alphas = stack.alphas(gamma)
                rgb[iy, ix], alpha[iy, ix] = composite_layers(alphas, stack.colors(), background)
                cw = stack.composite_weights(gamma)
                denom = cw.sum()
                if denom > 0:
                    depth[iy, ix] = (cw * stack.depth_mean()).sum() / denom
                nlayers[iy, ix] = len(stack)
            else:
                w_g, c_g, z_g = _rasterize_pixel_ternary(
                    proj, order, colors, xs[ix], ys[iy], proj.options.r_cut)
                if w_g <= 0.0:
                    continue
                chat = c_g / w_g
                a = float(coverage_alpha(w_g, gamma)) if mode == DEPTH_TERNARY_ALPHA else 1.0
                rgb[iy, ix] = a * chat + (1.0 - a) * background
                alpha[iy, ix] = a
                depth[iy, ix] = z_g / w_g
                nlayers[iy, ix] = 1
    out = {"rgb": rgb, "alpha": alpha, "depth": depth, "nlayers": nlayers}
    if collect_stacks:
        out["stacks"] = stacks
    return out
