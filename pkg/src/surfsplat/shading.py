"""Split-sum image-based shading.

Per-surfel outgoing radiance:

    c = k_d * albedo * L_d(n) + L_s(reflect(w_o, n), r) * (F0 * b1 + b2)

with F0 = 0.04 * (1 - m) + albedo * m and k_d = (1 - F0) * (1 - m). L_d is a
clamped-cosine prefiltered irradiance map, L_s a chain of GGX-prefiltered
lat-long grids indexed by roughness, and (b1, b2) the preintegrated BRDF
lookup table over (cos theta_v, roughness).

The microfacet model everything integrates is GGX with alpha = roughness^2,
Schlick Fresnel, and Smith Schlick-GGX visibility with k = alpha / 2. The
prefilters are fixed row-normalized linear operators (deterministic Hammersley
sampling), so environment gradients are exact transposed-operator products.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .surfels import SurfelCloud, quat_to_frame

SRGB_LIN_BOUND = 0.0031308
DEFAULT_ENV_SHAPE = (16, 32)
DEFAULT_LEVELS = 6
DEFAULT_LUT_RES = 64
DEFAULT_LUT_SAMPLES = 128
DEFAULT_SPEC_SAMPLES = 128
LUT_VERSION = 1


# ---------------------------------------------------------------------------
# tone mapping

def srgb_encode(t):
    t = np.asarray(t)
    lin = t * 12.92
    # powers of negative inputs are avoided by clamping inside the branch
    pow_part = 1.055 * np.power(np.maximum(t, SRGB_LIN_BOUND), 1.0 / 2.4) - 0.055
    return np.where(t <= SRGB_LIN_BOUND, lin, pow_part)


def srgb_encode_grad(t):
    t = np.asarray(t)
    pow_grad = (1.055 / 2.4) * np.power(np.maximum(t, SRGB_LIN_BOUND), 1.0 / 2.4 - 1.0)
    return np.where(t <= SRGB_LIN_BOUND, 12.92, pow_grad)


def tone_map(img, mode="ldr"):
    """Map linear radiance to display or loss space.

    ldr: clamp to [0, 1] then the exact piecewise sRGB transfer.
    hdr-loss: sRGB of log(1 + x), a range-compressing transform for losses on
    unbounded radiance (no clamp)."""
    img = np.asarray(img)
    if mode == "ldr":
        return srgb_encode(np.clip(img, 0.0, 1.0))
    if mode == "hdr-loss":
        return srgb_encode(np.log1p(np.maximum(img, 0.0)))
    raise ValueError(f"unknown tone map mode {mode!r}")


def tone_map_backward(img, mode, g_out):
    """d(tone_map)/d(img) applied to an upstream gradient."""
    img = np.asarray(img)
    g_out = np.asarray(g_out)
    if mode == "ldr":
        inside = (img > 0.0) & (img < 1.0)
        return np.where(inside, g_out * srgb_encode_grad(np.clip(img, 0.0, 1.0)), 0.0)
    if mode == "hdr-loss":
        pos = img > 0.0
        x = np.maximum(img, 0.0)
        return np.where(pos, g_out * srgb_encode_grad(np.log1p(x)) / (1.0 + x), 0.0)
    raise ValueError(f"unknown tone map mode {mode!r}")


# ---------------------------------------------------------------------------
# sampling helpers and the microfacet model

def radical_inverse_base2(i):
    i = np.asarray(i, dtype=np.uint32)
    i = (i << np.uint32(16)) | (i >> np.uint32(16))
    i = ((i & np.uint32(0x55555555)) << np.uint32(1)) | ((i & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    i = ((i & np.uint32(0x33333333)) << np.uint32(2)) | ((i & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    i = ((i & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((i & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    i = ((i & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((i & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return i.astype(np.float64) * 2.3283064365386963e-10  # / 2^32


def hammersley(count):
    i = np.arange(count)
    return np.stack([(i + 0.5) / count, radical_inverse_base2(i)], axis=1)


def ggx_d(nh, alpha):
    a2 = alpha * alpha
    d = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * d * d)


def smith_g1(cos_x, k):
    return cos_x / (cos_x * (1.0 - k) + k)


def ggx_sample_h(xi, alpha):
    """GGX half vectors in tangent space (z up) from 2D sample points."""
    phi = 2.0 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)


def brdf_lut(res=DEFAULT_LUT_RES, samples=DEFAULT_LUT_SAMPLES, cache_dir=None):
    """Preintegrated (b1, b2) over (cos theta_v, roughness), (res, res, 2).

    Row j is roughness (j + 0.5) / res, column i is cos theta (i + 0.5) / res.
    Cached to a versioned sidecar file."""
    cache_dir = Path(cache_dir or os.environ.get(
        "SURFSPLAT_CACHE_DIR", Path.home() / ".cache" / "surfsplat"))
    cache_path = cache_dir / f"brdf_lut_v{LUT_VERSION}_r{res}_s{samples}.npz"
    if cache_path.exists():
        with np.load(cache_path) as f:
            if int(f["version"]) == LUT_VERSION:
                return f["lut"]
    xi = hammersley(samples)
    cos_v = (np.arange(res) + 0.5) / res
    rough = (np.arange(res) + 0.5) / res
    lut = np.zeros((res, res, 2))
    view = np.stack([np.sqrt(1.0 - cos_v**2), np.zeros(res), cos_v], axis=1)  # (res, 3)
    for j, r in enumerate(rough):
        alpha = r * r
        h = ggx_sample_h(xi, alpha)                        # (S, 3)
        vh = view @ h.T                                    # (res, S)
        l = 2.0 * vh[..., None] * h[None] - view[:, None]  # (res, S, 3)
        nl = l[..., 2]
        nh = h[:, 2][None]
        nv = cos_v[:, None]
        good = (nl > 0.0) & (vh > 0.0)
        k = alpha / 2.0
        g = smith_g1(nv, k) * smith_g1(np.maximum(nl, 1e-8), k)
        g_vis = np.where(good, g * vh / np.maximum(nh * nv, 1e-8), 0.0)
        fc = np.power(1.0 - np.clip(vh, 0.0, 1.0), 5.0)
        lut[j, :, 0] = np.mean(g_vis * (1.0 - fc), axis=1)
        lut[j, :, 1] = np.mean(g_vis * fc, axis=1)
    lut = lut.astype(np.float32)
    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
        np.savez(cache_path, lut=lut, version=np.int64(LUT_VERSION))
    except OSError:
        pass  # cache is best-effort
    return lut


# ---------------------------------------------------------------------------
# lat-long parameterization

def latlong_texel_dirs(height, width):
    """Directions and solid angles of all texel centers, row-major flattened."""
    theta = (np.arange(height) + 0.5) * (np.pi / height)
    phi = (np.arange(width) + 0.5) * (2.0 * np.pi / width) - np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
    solid = np.sin(tt) * (np.pi / height) * (2.0 * np.pi / width)
    return dirs.reshape(-1, 3), solid.reshape(-1)


def dirs_to_coords(dirs, height, width):
    """Continuous texel coordinates (fu, fv) of unit directions; fu wraps."""
    dirs = np.asarray(dirs)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    fu = (phi + np.pi) * (width / (2.0 * np.pi)) - 0.5
    fv = theta * (height / np.pi) - 0.5
    return fu, fv


def coord_grad_to_dir(dirs, height, width, g_fu, g_fv):
    """Chain (fu, fv) gradients back to the unit direction."""
    dirs = np.asarray(dirs, dtype=np.float64)
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    rxy2 = dx * dx + dy * dy
    safe = rxy2 > 1e-12
    inv_rxy2 = np.where(safe, 1.0 / np.maximum(rxy2, 1e-12), 0.0)
    # phi = atan2(dy, dx), theta = arccos(dz)
    g_phi = g_fu * (width / (2.0 * np.pi))
    g_theta = g_fv * (height / np.pi)
    sin_theta = np.sqrt(np.maximum(1.0 - dz * dz, 1e-12))
    g = np.zeros_like(dirs)
    g[..., 0] = g_phi * (-dy) * inv_rxy2
    g[..., 1] = g_phi * dx * inv_rxy2
    g[..., 2] = np.where(safe, -g_theta / sin_theta, 0.0)
    return g


def _bilinear_prepare(shape_hw, fu, fv, wrap_x):
    """Corner indices, fractions and in-range flags for a bilinear lookup."""
    h, w = shape_hw
    fv_c = np.clip(fv, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(fv_c), h - 2).astype(np.int64)
    tv = fv_c - j0
    dv_ok = (fv > 0.0) & (fv < h - 1.0)
    if wrap_x:
        i0f = np.floor(fu)
        tu = fu - i0f
        i0 = np.mod(i0f.astype(np.int64), w)
        i1 = np.mod(i0 + 1, w)
        du_ok = np.ones_like(dv_ok)
    else:
        fu_c = np.clip(fu, 0.0, w - 1.0)
        i0 = np.minimum(np.floor(fu_c), w - 2).astype(np.int64)
        tu = fu_c - i0
        i1 = i0 + 1
        du_ok = (fu > 0.0) & (fu < w - 1.0)
    return i0, i1, j0, j0 + 1, tu, tv, du_ok, dv_ok


def bilinear_lookup(tex, fu, fv, wrap_x=True):
    i0, i1, j0, j1, tu, tv, _, _ = _bilinear_prepare(tex.shape[:2], fu, fv, wrap_x)
    a = tex[j0, i0]
    b = tex[j0, i1]
    c = tex[j1, i0]
    d = tex[j1, i1]
    tu = tu[..., None] if tex.ndim == 3 else tu
    tv = tv[..., None] if tex.ndim == 3 else tv
    return (1 - tu) * (1 - tv) * a + tu * (1 - tv) * b + (1 - tu) * tv * c + tu * tv * d


def bilinear_coord_grads(tex, fu, fv, wrap_x=True):
    """(dval/dfu, dval/dfv), zero where a clamped axis is out of range."""
    i0, i1, j0, j1, tu, tv, du_ok, dv_ok = _bilinear_prepare(tex.shape[:2], fu, fv, wrap_x)
    a = tex[j0, i0]
    b = tex[j0, i1]
    c = tex[j1, i0]
    d = tex[j1, i1]
    if tex.ndim == 3:
        tu, tv = tu[..., None], tv[..., None]
        du_ok, dv_ok = du_ok[..., None], dv_ok[..., None]
    gu = (1 - tv) * (b - a) + tv * (d - c)
    gv = (1 - tu) * (c - a) + tu * (d - b)
    return np.where(du_ok, gu, 0.0), np.where(dv_ok, gv, 0.0)


def bilinear_scatter(shape, fu, fv, grad, wrap_x=True):
    """Adjoint of bilinear_lookup w.r.t. the texture: scatter grad (N, C)."""
    h, w = shape[:2]
    i0, i1, j0, j1, tu, tv, _, _ = _bilinear_prepare((h, w), fu, fv, wrap_x)
    out = np.zeros(shape, dtype=np.float64).reshape(h * w, -1)
    grad = np.asarray(grad, dtype=np.float64).reshape(len(fu), -1)
    tu = tu[:, None]
    tv = tv[:, None]
    np.add.at(out, j0 * w + i0, grad * (1 - tu) * (1 - tv))
    np.add.at(out, j0 * w + i1, grad * tu * (1 - tv))
    np.add.at(out, j1 * w + i0, grad * (1 - tu) * tv)
    np.add.at(out, j1 * w + i1, grad * tu * tv)
    return out.reshape(shape)


def bilinear_cells(shape_hw, fu, fv, wrap_x=True):
    """Integer branch signature of a lookup: cell indices and range flags."""
    i0, _, j0, _, _, _, du_ok, dv_ok = _bilinear_prepare(shape_hw, fu, fv, wrap_x)
    return np.stack([i0, j0, du_ok.astype(np.int64), dv_ok.astype(np.int64)], axis=-1)


# ---------------------------------------------------------------------------
# prefilter operators

_OP_CACHE = {}


def build_diffuse_operator(height, width):
    """Row-normalized clamped-cosine quadrature over the full sphere grid."""
    key = ("diffuse", height, width)
    if key not in _OP_CACHE:
        dirs, solid = latlong_texel_dirs(height, width)
        cos = np.maximum(dirs @ dirs.T, 0.0) * solid[None, :]
        _OP_CACHE[key] = (cos / cos.sum(axis=1, keepdims=True)).astype(np.float64)
    return _OP_CACHE[key]


def build_specular_operator(height, width, roughness, samples=DEFAULT_SPEC_SAMPLES):
    """Row-normalized GGX prefilter (N = V = R convention). Identity at r = 0."""
    if roughness <= 0.0:
        return None
    key = ("spec", height, width, round(float(roughness), 6), samples)
    if key in _OP_CACHE:
        return _OP_CACHE[key]
    dirs, _ = latlong_texel_dirs(height, width)
    t = dirs.shape[0]
    alpha = roughness * roughness
    xi = hammersley(samples)
    h_tan = ggx_sample_h(xi, alpha)  # (S, 3) around +z

    # orthonormal frames around each output direction
    up = np.where(np.abs(dirs[:, 2:3]) < 0.999, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    tx = np.cross(up, dirs)
    tx /= np.linalg.norm(tx, axis=1, keepdims=True)
    ty = np.cross(dirs, tx)

    op = np.zeros((t, t))
    wsum = np.zeros(t)
    for s in range(samples):
        hv = h_tan[s, 0] * tx + h_tan[s, 1] * ty + h_tan[s, 2] * dirs  # (T, 3)
        vh = np.sum(dirs * hv, axis=1)
        l = 2.0 * vh[:, None] * hv - dirs
        nl = np.sum(dirs * l, axis=1)
        wgt = np.maximum(nl, 0.0)
        active = wgt > 0
        if not np.any(active):
            continue
        fu, fv = dirs_to_coords(l[active], height, width)
        i0, i1, j0, j1, tu, tv, _, _ = _bilinear_prepare((height, width), fu, fv, True)
        rows = np.flatnonzero(active)
        wa = wgt[active]
        np.add.at(op, (rows, j0 * width + i0), wa * (1 - tu) * (1 - tv))
        np.add.at(op, (rows, j0 * width + i1), wa * tu * (1 - tv))
        np.add.at(op, (rows, j1 * width + i0), wa * (1 - tu) * tv)
        np.add.at(op, (rows, j1 * width + i1), wa * tu * tv)
        wsum[rows] += wa
    empty = wsum <= 0
    if np.any(empty):  # pathological row: fall back to a pass-through
        op[empty] = 0.0
        op[empty, np.flatnonzero(empty)] = 1.0
        wsum[empty] = 1.0
    op /= wsum[:, None]
    _OP_CACHE[key] = op
    return op


@dataclass
class EnvironmentLight:
    """Learnable lat-long environment. The parameter is log radiance; derived
    maps (irradiance, roughness chain) refresh from fixed linear operators."""

    base_log: np.ndarray            # (He, We, 3)
    levels: int = DEFAULT_LEVELS
    lut_res: int = DEFAULT_LUT_RES
    lut_samples: int = DEFAULT_LUT_SAMPLES
    spec_samples: int = DEFAULT_SPEC_SAMPLES

    def __post_init__(self):
        self.base_log = np.asarray(self.base_log, dtype=np.float64)
        if self.base_log.ndim != 3 or self.base_log.shape[2] != 3 or min(self.base_log.shape[:2]) < 2:
            raise ValueError("base_log must be (He >= 2, We >= 2, 3)")
        if self.levels < 1:
            raise ValueError("at least one roughness level")
        self._lut = None
        self.refresh()

    @property
    def shape(self):
        return self.base_log.shape[:2]

    @property
    def lut(self):
        if self._lut is None:
            self._lut = brdf_lut(self.lut_res, self.lut_samples).astype(np.float64)
        return self._lut

    def level_roughness(self):
        if self.levels == 1:
            return np.zeros(1)
        return np.arange(self.levels) / (self.levels - 1.0)

    def refresh(self):
        """Recompute derived maps after base_log changed."""
        h, w = self.shape
        self.base = np.exp(self.base_log)
        flat = self.base.reshape(-1, 3)
        self.diffuse = (build_diffuse_operator(h, w) @ flat).reshape(h, w, 3)
        spec = np.empty((self.levels, h, w, 3))
        for lv, r in enumerate(self.level_roughness()):
            op = build_specular_operator(h, w, r, self.spec_samples)
            spec[lv] = self.base if op is None else (op @ flat).reshape(h, w, 3)
        self.specular = spec

    def env_gradient(self, d_diffuse, d_specular):
        """Pull derived-map gradients back to the base radiance map (and to
        the log parameter)."""
        h, w = self.shape
        flat = np.zeros((h * w, 3))
        if d_diffuse is not None:
            flat += build_diffuse_operator(h, w).T @ d_diffuse.reshape(-1, 3)
        if d_specular is not None:
            for lv, r in enumerate(self.level_roughness()):
                op = build_specular_operator(h, w, r, self.spec_samples)
                g = d_specular[lv].reshape(-1, 3)
                flat += g if op is None else op.T @ g
        d_base = flat.reshape(h, w, 3)
        return d_base, d_base * self.base

    @staticmethod
    def uniform(value=0.5, shape=DEFAULT_ENV_SHAPE, levels=DEFAULT_LEVELS, dtype=np.float64):
        base = np.full(shape + (3,), float(value), dtype=dtype)
        return EnvironmentLight(np.log(base), levels=levels)

    @staticmethod
    def from_base(base, levels=DEFAULT_LEVELS):
        base = np.asarray(base, dtype=np.float64)
        return EnvironmentLight(np.log(np.maximum(base, 1e-8)), levels=levels)

    def copy(self):
        e = EnvironmentLight(self.base_log.copy(), self.levels, self.lut_res,
                             self.lut_samples, self.spec_samples)
        return e


def env_background(env: EnvironmentLight, camera, dtype=np.float32):
    """Base radiance along each pixel ray (environment-as-background)."""
    _, dirs = camera.pixel_rays()
    fu, fv = dirs_to_coords(dirs.reshape(-1, 3), *env.shape)
    vals = bilinear_lookup(env.base, fu, fv, wrap_x=True)
    return vals.reshape(camera.height, camera.width, 3).astype(dtype)


# ---------------------------------------------------------------------------
# per-surfel shading

@dataclass
class ShadingCtx:
    """Everything the shading backward needs, plus branch-signature cells."""
    env: EnvironmentLight
    cam_pos: np.ndarray
    albedo: np.ndarray
    metallic: np.ndarray
    roughness: np.ndarray
    normals: np.ndarray
    wo: np.ndarray
    inv_dist: np.ndarray
    ndv_raw: np.ndarray
    refl: np.ndarray
    l_d: np.ndarray
    l_s: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    f0: np.ndarray
    k_d: np.ndarray
    lvl0: np.ndarray
    lvl_frac: np.ndarray
    cells: np.ndarray


def shade_surfels(cloud: SurfelCloud, env: EnvironmentLight, camera, dtype=np.float32):
    """IBL shading of every surfel for one camera. Returns (colors (N, 3),
    ctx). Colors are linear radiance; view dependence enters through the
    reflection lookup and the LUT column."""
    he, we = env.shape
    albedo = cloud.albedo.astype(np.float64)
    metallic = cloud.metallic.astype(np.float64)
    roughness = cloud.roughness.astype(np.float64)
    _, _, n = quat_to_frame(cloud.quats.astype(np.float64))

    cam_pos = camera.position
    to_cam = cam_pos[None, :] - cloud.centers.astype(np.float64)
    dist = np.linalg.norm(to_cam, axis=1)
    inv_dist = 1.0 / np.maximum(dist, 1e-12)
    wo = to_cam * inv_dist[:, None]

    ndv_raw = np.sum(n * wo, axis=1)
    ndv = np.clip(ndv_raw, 0.0, 1.0)
    refl = 2.0 * ndv_raw[:, None] * n - wo

    fu_d, fv_d = dirs_to_coords(n, he, we)
    l_d = bilinear_lookup(env.diffuse, fu_d, fv_d, wrap_x=True)

    nlev = env.levels
    lvl = np.clip(roughness, 0.0, 1.0) * (nlev - 1)
    lvl0 = np.minimum(np.floor(lvl), max(nlev - 2, 0)).astype(np.int64)
    frac = lvl - lvl0 if nlev > 1 else np.zeros_like(lvl)
    fu_s, fv_s = dirs_to_coords(refl, he, we)
    spec_lo = _spec_lookup(env.specular, lvl0, fu_s, fv_s)
    spec_hi = _spec_lookup(env.specular, np.minimum(lvl0 + 1, nlev - 1), fu_s, fv_s)
    l_s = (1.0 - frac[:, None]) * spec_lo + frac[:, None] * spec_hi

    lut = env.lut
    res = lut.shape[0]
    fx = ndv * (res - 1)
    fy = roughness * (res - 1)
    b = bilinear_lookup(lut, fx, fy, wrap_x=False)
    b1, b2 = b[:, 0], b[:, 1]

    f0 = 0.04 * (1.0 - metallic[:, None]) + albedo * metallic[:, None]
    k_d = (1.0 - f0) * (1.0 - metallic[:, None])
    colors = k_d * albedo * l_d + l_s * (f0 * b1[:, None] + b2[:, None])

    cells = np.concatenate([
        bilinear_cells((he, we), fu_d, fv_d, wrap_x=True),
        bilinear_cells((he, we), fu_s, fv_s, wrap_x=True),
        lvl0[:, None],
        bilinear_cells((res, res), fx, fy, wrap_x=False),
        (ndv_raw > 0.0).astype(np.int64)[:, None],
        (ndv_raw < 1.0).astype(np.int64)[:, None],
    ], axis=1)

    ctx = ShadingCtx(env=env, cam_pos=cam_pos, albedo=albedo, metallic=metallic,
                     roughness=roughness, normals=n, wo=wo, inv_dist=inv_dist,
                     ndv_raw=ndv_raw, refl=refl, l_d=l_d, l_s=l_s, b1=b1, b2=b2,
                     f0=f0, k_d=k_d, lvl0=lvl0, lvl_frac=frac, cells=cells)
    return colors.astype(dtype), ctx


def _spec_lookup(spec_chain, lvl_idx, fu, fv):
    out = np.empty((len(fu), 3))
    for lv in np.unique(lvl_idx):
        m = lvl_idx == lv
        out[m] = bilinear_lookup(spec_chain[lv], fu[m], fv[m], wrap_x=True)
    return out


@dataclass
class ShadingGrads:
    albedo_raw: np.ndarray
    metallic_raw: np.ndarray
    roughness_raw: np.ndarray
    normals: np.ndarray    # upstream for the quaternion chain
    centers: np.ndarray    # through the view direction
    env_base: np.ndarray
    env_base_log: np.ndarray


def shade_backward(ctx: ShadingCtx, g_colors) -> ShadingGrads:
    """Adjoint of shade_surfels for per-surfel color gradients."""
    env = ctx.env
    he, we = env.shape
    g = np.asarray(g_colors, dtype=np.float64)
    albedo, metallic, roughness = ctx.albedo, ctx.metallic, ctx.roughness
    n, wo = ctx.normals, ctx.wo
    b1, b2 = ctx.b1, ctx.b2
    f0, k_d, l_d, l_s = ctx.f0, ctx.k_d, ctx.l_d, ctx.l_s

    # c = k_d * albedo * l_d + l_s * (f0 b1 + b2)
    g_kd = g * albedo * l_d
    g_albedo = g * k_d * l_d
    g_ld = g * k_d * albedo
    g_ls = g * (f0 * b1[:, None] + b2[:, None])
    g_f0 = g * l_s * b1[:, None]
    g_b1 = np.sum(g * l_s * f0, axis=1)
    g_b2 = np.sum(g * l_s, axis=1)

    # k_d = (1 - f0)(1 - m); f0 = 0.04 (1 - m) + albedo m
    g_f0 += g_kd * (-(1.0 - metallic[:, None]))
    g_metallic = np.sum(g_kd * (-(1.0 - f0)), axis=1)
    g_metallic += np.sum(g_f0 * (albedo - 0.04), axis=1)
    g_albedo += g_f0 * metallic[:, None]

    # LUT lookup: b(fx, fy), fx = ndv (res-1), fy = roughness (res-1)
    lut = env.lut
    res = lut.shape[0]
    ndv = np.clip(ctx.ndv_raw, 0.0, 1.0)
    fx = ndv * (res - 1)
    fy = roughness * (res - 1)
    dlut_dfx, dlut_dfy = bilinear_coord_grads(lut, fx, fy, wrap_x=False)
    g_ndv = (g_b1 * dlut_dfx[:, 0] + g_b2 * dlut_dfx[:, 1]) * (res - 1)
    g_rough = (g_b1 * dlut_dfy[:, 0] + g_b2 * dlut_dfy[:, 1]) * (res - 1)
    ndv_active = (ctx.ndv_raw > 0.0) & (ctx.ndv_raw < 1.0)
    g_ndv = np.where(ndv_active, g_ndv, 0.0)

    # specular chain: trilinear in (refl, level)
    nlev = env.levels
    lvl0 = ctx.lvl0
    frac = ctx.lvl_frac
    fu_s, fv_s = dirs_to_coords(ctx.refl, he, we)
    lvl1 = np.minimum(lvl0 + 1, nlev - 1)
    spec_lo = _spec_lookup(env.specular, lvl0, fu_s, fv_s)
    spec_hi = _spec_lookup(env.specular, lvl1, fu_s, fv_s)
    if nlev > 1:
        g_rough += np.sum(g_ls * (spec_hi - spec_lo), axis=1) * (nlev - 1)
    g_refl = np.zeros_like(ctx.refl)
    d_spec = np.zeros((nlev, he, we, 3))
    for lv in np.unique(np.concatenate([lvl0, lvl1])):
        m_lo = lvl0 == lv
        m_hi = lvl1 == lv
        gu, gv = bilinear_coord_grads(env.specular[lv], fu_s, fv_s, wrap_x=True)
        if np.any(m_lo):
            g_here = g_ls[m_lo] * (1.0 - frac[m_lo])[:, None]
            g_fu = np.sum(g_here * gu[m_lo], axis=1)
            g_fv = np.sum(g_here * gv[m_lo], axis=1)
            g_refl[m_lo] += coord_grad_to_dir(ctx.refl[m_lo], he, we, g_fu, g_fv)
            d_spec[lv] += bilinear_scatter((he, we, 3), fu_s[m_lo], fv_s[m_lo], g_here, wrap_x=True)
        if np.any(m_hi):
            g_here = g_ls[m_hi] * frac[m_hi][:, None]
            g_fu = np.sum(g_here * gu[m_hi], axis=1)
            g_fv = np.sum(g_here * gv[m_hi], axis=1)
            g_refl[m_hi] += coord_grad_to_dir(ctx.refl[m_hi], he, we, g_fu, g_fv)
            d_spec[lv] += bilinear_scatter((he, we, 3), fu_s[m_hi], fv_s[m_hi], g_here, wrap_x=True)

    # diffuse lookup at the normal
    fu_d, fv_d = dirs_to_coords(n, he, we)
    gu, gv = bilinear_coord_grads(env.diffuse, fu_d, fv_d, wrap_x=True)
    g_fu = np.sum(g_ld * gu, axis=1)
    g_fv = np.sum(g_ld * gv, axis=1)
    g_n = coord_grad_to_dir(n, he, we, g_fu, g_fv)
    d_diffuse = bilinear_scatter((he, we, 3), fu_d, fv_d, g_ld, wrap_x=True)

    # refl = 2 (n . wo) n - wo
    s = ctx.ndv_raw
    gr_dot_n = np.sum(g_refl * n, axis=1)
    g_n += 2.0 * gr_dot_n[:, None] * wo + 2.0 * s[:, None] * g_refl
    g_wo = 2.0 * gr_dot_n[:, None] * n - g_refl
    # ndv clamp branch
    g_n += np.where(ndv_active, g_ndv, 0.0)[:, None] * wo
    g_wo += np.where(ndv_active, g_ndv, 0.0)[:, None] * n

    # wo = (cam - c) / |cam - c|: d wo / d c = -(I - wo wo^T) / dist
    radial = np.sum(g_wo * wo, axis=1)
    g_centers = -(g_wo - radial[:, None] * wo) * ctx.inv_dist[:, None]

    # activations
    g_albedo_raw = g_albedo * albedo * (1.0 - albedo)
    g_metallic_raw = g_metallic * metallic * (1.0 - metallic)
    g_roughness_raw = g_rough * roughness * (1.0 - roughness)

    env_base, env_base_log = env.env_gradient(d_diffuse, d_spec)
    return ShadingGrads(albedo_raw=g_albedo_raw, metallic_raw=g_metallic_raw,
                        roughness_raw=g_roughness_raw, normals=g_n,
                        centers=g_centers, env_base=env_base,
                        env_base_log=env_base_log)
