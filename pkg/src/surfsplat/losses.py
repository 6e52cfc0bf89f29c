"""Loss terms and their input gradients.

Every function returns (value, gradient) where the gradient is taken with
respect to the first argument, so the caller chains it into the renderer
backward. The consolidation evaluator here works on collected per-pixel layer
stacks; during training the same penalty is differentiated inside the
compiled backward kernel, and this module doubles as its independent check.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .reference import GAMMA
from .surfels import SurfelCloud, quat_to_frame, quat_frame_backward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_filter(img, kernel):
    """Separable correlation over the two leading axes, zero boundary. Only
    the valid interior is consumed, so the boundary rule never shows; zero
    boundary makes the operator exactly self-adjoint for the adjoint below."""
    out = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _embed_valid(grad_valid, shape, margin):
    full = np.zeros(shape, dtype=np.float64)
    full[margin:shape[0] - margin, margin:shape[1] - margin] = grad_valid
    return full


def ssim_loss(img, target, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """1 - mean SSIM over valid (fully windowed) pixels, with the gradient
    w.r.t. img. Images (H, W) or (H, W, C); C averaged into the mean."""
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("image shape mismatch")
    h, w = x.shape[:2]
    m = window // 2
    if h < window or w < window:
        return 0.0, np.zeros_like(x)
    kern = _gauss_kernel(window, sigma)
    val = (slice(m, h - m), slice(m, w - m))

    mu_x = _window_filter(x, kern)
    mu_y = _window_filter(y, kern)
    x2 = _window_filter(x * x, kern)
    y2 = _window_filter(y * y, kern)
    xy = _window_filter(x * y, kern)
    var_x = x2 - mu_x * mu_x
    var_y = y2 - mu_y * mu_y
    cov = xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)

    n_valid = s[val].size
    loss = 1.0 - float(np.mean(s[val]))

    # upstream on the ssim map, nonzero only on the interior
    e = np.zeros_like(s)
    e[val] = -1.0 / n_valid

    ds_dmu_x = 2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s / b1
    ds_dvar_x = -s / b2
    ds_dcov = 2.0 * a1 / (b1 * b2)

    # chain through mu_x = Wx, var_x = W(x^2) - mu_x^2, cov = W(xy) - mu_x mu_y
    g_mu = e * (ds_dmu_x - 2.0 * mu_x * ds_dvar_x - mu_y * ds_dcov)
    g_x2 = e * ds_dvar_x
    g_xy = e * ds_dcov
    grad = (_window_filter(g_mu, kern)
            + 2.0 * x * _window_filter(g_x2, kern)
            + y * _window_filter(g_xy, kern))
    return loss, grad


def photometric_loss(img, target, lambda_ssim=0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM), with the gradient w.r.t. img."""
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("image shape mismatch")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    if lambda_ssim == 0.0:
        return l1, g_l1
    s_loss, g_s = ssim_loss(x, y)
    loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * s_loss
    grad = (1.0 - lambda_ssim) * g_l1 + lambda_ssim * g_s
    return loss, grad


def silhouette_loss(alpha, mask):
    """1 - soft IoU between a coverage image and a mask, with d/d(alpha)."""
    a = np.asarray(alpha, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if a.shape != m.shape:
        raise ValueError("image shape mismatch")
    inter = float(np.sum(a * m))
    union = float(np.sum(a + m - a * m))
    if union <= 0.0:
        return 0.0, np.zeros_like(a)
    loss = 1.0 - inter / union
    grad = (inter * (1.0 - m) - m * union) / (union * union)
    return loss, grad


def _stack_composites(stacks, gamma=GAMMA):
    """Composite weights and depth moments per (pixel, layer) from collected
    stacks. Empty layer slots carry zero weight and drop out of every sum."""
    w = np.asarray(stacks["weight_sum"], dtype=np.float64)
    z = np.asarray(stacks["depth_sum"], dtype=np.float64)
    z2 = np.asarray(stacks["depth_sq_sum"], dtype=np.float64)
    rate = gamma / (2.0 * np.pi)
    a = 1.0 - np.exp(-w * rate)
    one = 1.0 - a
    tbar = np.ones_like(a)
    tbar[..., 1:] = np.cumprod(one[..., :-1], axis=-1)
    cw = tbar * a
    live = w > 0.0
    inv_w = np.where(live, 1.0 / np.where(live, w, 1.0), 0.0)
    zbar = z * inv_w
    var_raw = z2 * inv_w - zbar * zbar
    var = np.maximum(var_raw, 0.0)
    return cw, zbar, var, var_raw, live


def consolidation_loss(stacks, gamma=GAMMA, scale=1.0):
    """Depth-consolidation penalty from per-pixel layer stacks.

    Sum over pixels of the pairwise inter-layer term w_i w_j |z_i - z_j| plus
    the intra-layer term w_i^2 sigma_i^2, on compositing weights and layer
    depth moments. Returns (value, grads) with grads holding d/d(weight),
    d/d(mean depth), d/d(variance) per (pixel, layer) slot."""
    cw, zbar, var, var_raw, live = _stack_composites(stacks, gamma)
    k = cw.shape[-1]
    g_w = 2.0 * cw * var
    g_z = np.zeros_like(cw)
    g_v = np.where(live, cw * cw, 0.0)
    total = float(np.sum(cw * cw * var))
    for i in range(k):
        for j in range(i + 1, k):
            dz = zbar[..., i] - zbar[..., j]
            adz = np.abs(dz)
            pair = cw[..., i] * cw[..., j]
            total += float(np.sum(pair * adz))
            g_w[..., i] += cw[..., j] * adz
            g_w[..., j] += cw[..., i] * adz
            sgn = np.sign(dz)
            g_z[..., i] += pair * sgn
            g_z[..., j] -= pair * sgn
    grads = {"weight": scale * g_w, "depth": scale * g_z, "variance": scale * g_v}
    return scale * total, grads


def weighted_interlayer_gap(stacks, gamma=GAMMA):
    """Mean inter-layer depth gap, weighted by compositing-weight products
    over all layer pairs and pixels. The consolidation progress metric."""
    cw, zbar, _, _, _ = _stack_composites(stacks, gamma)
    k = cw.shape[-1]
    num = 0.0
    den = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            pair = cw[..., i] * cw[..., j]
            num += float(np.sum(pair * np.abs(zbar[..., i] - zbar[..., j])))
            den += float(np.sum(pair))
    return num / den if den > 0.0 else 0.0


def normal_consistency_loss(cloud: SurfelCloud, index):
    """Weighted angular deviation between neighbor normals.

    L = mean over surfels and neighbors of w_ij (1 - n_i . n_j), with
    w_ij = exp(-|c_i - c_j|^2 / (2 sigma_i^2)) and sigma_i the index's frozen
    mean neighbor distance. The weights localize the penalty; gradients flow
    through the normals only, returned as quaternion gradients."""
    neighbors = index.neighbors
    sigma = index.mean_dist
    n_s, k = neighbors.shape
    if len(cloud) != n_s:
        raise ValueError("index built for a different cloud size")
    centers = cloud.centers.astype(np.float64)
    _, _, normals = quat_to_frame(cloud.quats.astype(np.float64))

    valid = neighbors >= 0
    nb = np.where(valid, neighbors, 0)
    diff = centers[:, None, :] - centers[nb]
    d2 = np.sum(diff * diff, axis=2)
    sig2 = np.maximum(sigma, 1e-12) ** 2
    w = np.where(valid, np.exp(-d2 / (2.0 * sig2[:, None])), 0.0)

    ndot = np.sum(normals[:, None, :] * normals[nb], axis=2)
    count = n_s * k
    loss = float(np.sum(w * (1.0 - ndot))) / count

    g_n = np.zeros_like(normals)
    wk = w / count
    g_n -= np.sum(wk[:, :, None] * normals[nb], axis=1)
    np.add.at(g_n, nb.ravel(), (-wk[:, :, None] * normals[:, None, :]).reshape(-1, 3))
    g_quats = quat_frame_backward(cloud.quats.astype(np.float64), None, None, g_n)
    return loss, g_quats
