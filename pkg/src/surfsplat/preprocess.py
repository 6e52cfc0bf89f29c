"""Per-surfel view preprocessing.

Each surfel's planar kernel is carried to clip space by T = P @ S, where the
columns of S are the camera-space tangent vectors (direction scaled by the
activated scale), a zero column, and the camera-space center. Only rows x, y, w
of T act on the local kernel coordinates (u, v, 1); they are stored as three
3-vectors (a_i, b_i, d_i). Everything downstream (bounding, per-pixel ray
intersection, the low-pass filter Jacobian) is arithmetic on those rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .surfels import SurfelCloud, quat_to_frame

R_CUT = 3.0          # kernel truncation radius in tangent units
DENOM_EPS = 1e-9     # homogeneous intersection denominator cutoff
VIEW_Z_EPS = 1e-4    # minimum view depth of a surfel center

CULL_NONE = 0
CULL_NONFINITE = 1
CULL_BEHIND = 2
CULL_NEAR_PLANE = 3
CULL_OFFSCREEN = 4


@dataclass
class PreprocessOptions:
    r_cut: float = R_CUT
    mip_enabled: bool = True
    mip_sigma: float = 0.1      # screen prefilter variance, px^2
    dtype: type = np.float32


def build_tmatrix(cloud: SurfelCloud, camera, dtype=np.float64):
    """T rows and camera-space geometry for every surfel, no culling.

    Returns (t1, t2, t4, aux) where each t row is (N, 3) = (a, b, d) acting on
    (u, v, 1), and aux holds camera-space tangents/centers and view depths.
    """
    view = camera.view.astype(dtype)
    proj = camera.proj.astype(dtype)
    centers = cloud.centers.astype(dtype)
    u_hat, v_hat, _ = quat_to_frame(cloud.quats.astype(dtype))
    scales = np.exp(cloud.log_scales.astype(dtype))

    rv = view[:3, :3]
    c_cam = centers @ rv.T + view[:3, 3]
    tu_cam = (scales[:, 0:1] * u_hat) @ rv.T
    tv_cam = (scales[:, 1:2] * v_hat) @ rv.T
    view_z = -c_cam[:, 2]

    rows = []
    for ir in (0, 1, 3):
        a = tu_cam @ proj[ir, :3]
        b = tv_cam @ proj[ir, :3]
        d = c_cam @ proj[ir, :3] + proj[ir, 3]
        rows.append(np.stack([a, b, d], axis=1))
    t1, t2, t4 = rows
    aux = {"c_cam": c_cam, "tu_cam": tu_cam, "tv_cam": tv_cam, "view_z": view_z}
    return t1, t2, t4, aux


def depth_extent(tu_cam, tv_cam, r_cut=R_CUT):
    """Half-extent of the surfel's view-depth interval.

    Largest depth deviation from the center over the truncated kernel support:
    r_cut * sqrt(tu_z^2 + tv_z^2)."""
    tu_cam = np.asarray(tu_cam)
    tv_cam = np.asarray(tv_cam)
    return r_cut * np.sqrt(tu_cam[..., 2] ** 2 + tv_cam[..., 2] ** 2)


def _tangency_dot(ti, tj, r):
    # Minkowski-style row product: d_i d_j - r^2 (a_i a_j + b_i b_j)
    return ti[..., 2] * tj[..., 2] - (r * r) * (ti[..., 0] * tj[..., 0] + ti[..., 1] * tj[..., 1])


def bounding_rect(t1, t2, t4, r=R_CUT):
    """NDC bounding box of the projected kernel support, by tangent lines.

    The support {rho <= r} projects to a conic region; its axis-aligned extent
    solves f44 x^2 - 2 f14 x + f11 = 0 with f_ij the tangency dot products.
    Returns (center (N, 2), half (N, 2), valid). valid is False where f44 <= 0,
    i.e. the depth interval touches the camera plane and the projection is
    unbounded."""
    t1 = np.atleast_2d(np.asarray(t1))
    t2 = np.atleast_2d(np.asarray(t2))
    t4 = np.atleast_2d(np.asarray(t4))
    r = np.broadcast_to(np.asarray(r, dtype=t1.dtype), t1.shape[:-1])
    f44 = _tangency_dot(t4, t4, r)
    valid = f44 > 0
    f44_safe = np.where(valid, f44, 1.0)
    center = np.empty(t1.shape[:-1] + (2,), dtype=t1.dtype)
    half = np.empty_like(center)
    for axis, trow in ((0, t1), (1, t2)):
        fi4 = _tangency_dot(trow, t4, r)
        fii = _tangency_dot(trow, trow, r)
        disc = np.maximum(fi4 * fi4 - f44 * fii, 0.0)
        center[..., axis] = fi4 / f44_safe
        half[..., axis] = np.sqrt(disc) / f44_safe
    return center, half, valid


def intersect_ray(t1, t2, t4, ndc_x, ndc_y):
    """Local kernel coordinates where the pixel ray meets the surfel plane.

    k = x*T4 - T1 and l = y*T4 - T2 are two planes containing the ray; their
    intersection in homogeneous (u, v, 1) is the cross product. Returns
    (u, v, hit); rays parallel to the surfel plane miss."""
    k = np.asarray(ndc_x)[..., None] * t4 - t1
    l = np.asarray(ndc_y)[..., None] * t4 - t2
    p = np.cross(k, l)
    denom = p[..., 2]
    hit = np.abs(denom) >= DENOM_EPS
    safe = np.where(hit, denom, 1.0)
    return p[..., 0] / safe, p[..., 1] / safe, hit


def center_jacobian(t1, t2, t4, width, height):
    """Screen-to-tangent Jacobian d(u, v)/d(pixel) at the projected center.

    Central finite differences of the exact intersection map, probes half a
    pixel away from the center on each side. Any probe missing the plane
    flags the surfel and zeroes its Jacobian. Returns (J (N, 2, 2), ok)."""
    t1 = np.atleast_2d(t1)
    t2 = np.atleast_2d(t2)
    t4 = np.atleast_2d(t4)
    cx = t1[..., 2] / t4[..., 2]
    cy = t2[..., 2] / t4[..., 2]
    dx = 1.0 / width   # 0.5 px in ndc units
    dy = 1.0 / height
    u_px, v_px, ok0 = intersect_ray(t1, t2, t4, cx + dx, cy)
    u_mx, v_mx, ok1 = intersect_ray(t1, t2, t4, cx - dx, cy)
    u_py, v_py, ok2 = intersect_ray(t1, t2, t4, cx, cy + dy)
    u_my, v_my, ok3 = intersect_ray(t1, t2, t4, cx, cy - dy)
    ok = ok0 & ok1 & ok2 & ok3
    jac = np.empty(t1.shape[:-1] + (2, 2), dtype=t1.dtype)
    jac[..., 0, 0] = u_px - u_mx
    jac[..., 0, 1] = u_py - u_my
    jac[..., 1, 0] = v_px - v_mx
    jac[..., 1, 1] = v_py - v_my
    jac[~ok] = 0.0
    return jac, ok


def mip_precompute(jac, sigma):
    """Filtered kernel parameters from the screen-space Jacobian.

    Sigma_mip = I + sigma * J J^T widens the kernel to at least sigma px^2 of
    screen footprint; the normalization n_f = det(Sigma_mip)^(-1/2) keeps the
    kernel integral at 2*pi. Returns (sinv (N, 3) as (m00, m01, m11), n_f,
    det)."""
    jac = np.asarray(jac)
    jjt00 = jac[..., 0, 0] ** 2 + jac[..., 0, 1] ** 2
    jjt01 = jac[..., 0, 0] * jac[..., 1, 0] + jac[..., 0, 1] * jac[..., 1, 1]
    jjt11 = jac[..., 1, 0] ** 2 + jac[..., 1, 1] ** 2
    s00 = 1.0 + sigma * jjt00
    s01 = sigma * jjt01
    s11 = 1.0 + sigma * jjt11
    det = s00 * s11 - s01 * s01
    inv_det = 1.0 / det
    sinv = np.stack([s11 * inv_det, -s01 * inv_det, s00 * inv_det], axis=-1)
    n_f = np.sqrt(inv_det)
    return sinv, n_f, det


def filter_whitening(jac, sigma):
    """Lower Cholesky factor (a, b, c) of Sigma_mip = I + sigma * J J^T.

    (u, v) = (a w1, b w1 + c w2) maps the unit disk in w onto the widened
    kernel's support ellipse, so bounding the disk through the remapped
    projection rows bounds the filtered kernel exactly. The isotropic
    alternative, inflating r_cut by the largest eigenvalue, wraps thin
    grazing ellipses in square boxes and wastes rasterizer work."""
    jac = np.asarray(jac)
    jjt00 = jac[..., 0, 0] ** 2 + jac[..., 0, 1] ** 2
    jjt01 = jac[..., 0, 0] * jac[..., 1, 0] + jac[..., 0, 1] * jac[..., 1, 1]
    jjt11 = jac[..., 1, 0] ** 2 + jac[..., 1, 1] ** 2
    a = np.sqrt(1.0 + sigma * jjt00)
    b = sigma * jjt01 / a
    c = np.sqrt(np.maximum(1.0 + sigma * jjt11 - b * b, np.finfo(a.dtype).tiny))
    return a, b, c


def _whiten_rows(row, a, b, c):
    # row acts on (u, v, 1); substitute u = a w1, v = b w1 + c w2
    return np.stack([a * row[:, 0] + b * row[:, 1], c * row[:, 1], row[:, 2]],
                    axis=1)


@dataclass
class ProjectedSurfels:
    """Culled, compacted per-view records consumed by the rasterizer."""

    t1: np.ndarray           # (K, 3)
    t2: np.ndarray
    t4: np.ndarray
    view_z: np.ndarray       # (K,)
    eps_z: np.ndarray        # (K,)
    sinv: np.ndarray         # (K, 3) inverse filtered covariance (m00, m01, m11)
    n_f: np.ndarray          # (K,)
    center_ndc: np.ndarray   # (K, 2)
    jac: np.ndarray          # (K, 2, 2)
    jac_ok: np.ndarray       # (K,) bool
    rect: np.ndarray         # (K, 4) int32 pixel box [x0, y0, x1, y1), exclusive ends
    source_index: np.ndarray  # (K,) int32 row in the input cloud
    c_cam: np.ndarray        # (K, 3) saved for the backward pass
    tu_cam: np.ndarray
    tv_cam: np.ndarray
    cull_code: np.ndarray    # (N_in,) int8
    width: int
    height: int
    options: PreprocessOptions

    def __len__(self):
        return len(self.view_z)

    @property
    def z_start(self):
        return self.view_z - self.eps_z

    @property
    def z_end(self):
        return self.view_z + self.eps_z


def preprocess(cloud: SurfelCloud, camera, options: PreprocessOptions | None = None) -> ProjectedSurfels:
    """Project a cloud into a camera: T rows, depth intervals, filter
    parameters and conservative pixel rectangles, with invalid surfels culled.
    """
    opt = options or PreprocessOptions()
    dtype = np.dtype(opt.dtype).type
    n = len(cloud)
    cull = np.zeros(n, dtype=np.int8)

    finite = cloud.finite_mask()
    cull[~finite] = CULL_NONFINITE

    t1, t2, t4, aux = build_tmatrix(cloud, camera, dtype=dtype)
    view_z = aux["view_z"]
    with np.errstate(invalid="ignore"):
        behind = finite & ~(view_z >= VIEW_Z_EPS)
    cull[behind] = CULL_BEHIND
    alive = cull == 0

    eps_z = depth_extent(aux["tu_cam"], aux["tv_cam"], opt.r_cut)

    # Filter parameters first: the bounding box must cover the widened kernel.
    d4 = t4[:, 2]
    safe_d4 = np.where(alive, d4, 1.0)
    center_ndc = np.stack([t1[:, 2] / safe_d4, t2[:, 2] / safe_d4], axis=1)
    if opt.mip_enabled:
        jac, jac_ok = center_jacobian(t1, t2, t4, camera.width, camera.height)
        jac = np.where((alive & jac_ok)[:, None, None], jac, 0.0)
        sinv, n_f, _ = mip_precompute(jac, dtype(opt.mip_sigma))
        la, lb, lc = filter_whitening(jac, dtype(opt.mip_sigma))
        t1b = _whiten_rows(t1, la, lb, lc)
        t2b = _whiten_rows(t2, la, lb, lc)
        t4b = _whiten_rows(t4, la, lb, lc)
    else:
        jac = np.zeros((n, 2, 2), dtype=dtype)
        jac_ok = np.zeros(n, dtype=bool)
        sinv = np.tile(np.array([1.0, 0.0, 1.0], dtype=dtype), (n, 1))
        n_f = np.ones(n, dtype=dtype)
        t1b, t2b, t4b = t1, t2, t4

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        rect_center, rect_half, bounded = bounding_rect(t1b, t2b, t4b, opt.r_cut)
    cull[alive & ~bounded] = CULL_NEAR_PLANE
    alive = cull == 0

    # NDC box to inclusive pixel index range, then exclusive ends. The small
    # pad absorbs float roundoff so the box stays a superset of the support.
    lo_x = rect_center[:, 0] - rect_half[:, 0]
    hi_x = rect_center[:, 0] + rect_half[:, 0]
    lo_y = rect_center[:, 1] - rect_half[:, 1]
    hi_y = rect_center[:, 1] + rect_half[:, 1]
    w, h = camera.width, camera.height
    with np.errstate(invalid="ignore"):
        x0 = np.ceil((lo_x + 1.0) * 0.5 * w - 0.5 - 1e-4)
        x1 = np.floor((hi_x + 1.0) * 0.5 * w - 0.5 + 1e-4) + 1.0
        y0 = np.ceil((1.0 - hi_y) * 0.5 * h - 0.5 - 1e-4)
        y1 = np.floor((1.0 - lo_y) * 0.5 * h - 0.5 + 1e-4) + 1.0
        x0 = np.clip(x0, 0, w)
        x1 = np.clip(x1, 0, w)
        y0 = np.clip(y0, 0, h)
        y1 = np.clip(y1, 0, h)
    empty = alive & ((x0 >= x1) | (y0 >= y1))
    cull[empty] = CULL_OFFSCREEN
    alive = cull == 0

    keep = np.flatnonzero(alive).astype(np.int32)
    rect = np.stack([x0, y0, x1, y1], axis=1)[keep].astype(np.int32)
    return ProjectedSurfels(
        t1=t1[keep], t2=t2[keep], t4=t4[keep],
        view_z=view_z[keep].astype(dtype), eps_z=eps_z[keep].astype(dtype),
        sinv=sinv[keep].astype(dtype), n_f=n_f[keep].astype(dtype),
        center_ndc=center_ndc[keep].astype(dtype),
        jac=jac[keep].astype(dtype), jac_ok=jac_ok[keep],
        rect=rect, source_index=keep,
        c_cam=aux["c_cam"][keep].astype(dtype),
        tu_cam=aux["tu_cam"][keep].astype(dtype),
        tv_cam=aux["tv_cam"][keep].astype(dtype),
        cull_code=cull, width=w, height=h, options=opt,
    )
