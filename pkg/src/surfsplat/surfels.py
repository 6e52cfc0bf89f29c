"""Surfel data model.

A surfel is an oriented opaque surface sample: a center, a tangent frame given
by a unit quaternion, per-axis log scales, and raw (pre-activation) material
parameters. Scales activate with exp, materials with a sigmoid. The normal is
the third column of the rotation matrix, i.e. u_hat x v_hat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def normalize_quats(quats):
    """Return unit quaternions and their norms. Zero-norm input is rejected."""
    quats = np.asarray(quats)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm quaternion")
    return quats / norms, norms[..., 0]


def quat_to_frame(quats):
    """Tangent frame columns (u_hat, v_hat, n_hat) of R(q), each (N, 3).

    Quaternion layout is (w, x, y, z); inputs are normalized internally so
    gradients through a frame include the normalization Jacobian.
    """
    q, _ = normalize_quats(quats)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    u = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1)
    v = np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=-1)
    n = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return u, v, n


def quat_frame_backward(quats, g_u, g_v, g_n):
    """Adjoint of quat_to_frame: map frame-column gradients to raw quaternion
    gradients, including the normalization chain (so the result is tangent to
    the unit sphere scaled by 1/|q|)."""
    quats = np.asarray(quats, dtype=np.float64)
    qhat, norms = normalize_quats(quats)
    w, x, y, z = qhat[..., 0], qhat[..., 1], qhat[..., 2], qhat[..., 3]
    zero = np.zeros_like(w)

    def dot3(g, a0, a1, a2):
        return g[..., 0] * a0 + g[..., 1] * a1 + g[..., 2] * a2

    g_u = np.zeros_like(qhat[..., :3]) if g_u is None else np.asarray(g_u, dtype=np.float64)
    g_v = np.zeros_like(qhat[..., :3]) if g_v is None else np.asarray(g_v, dtype=np.float64)
    g_n = np.zeros_like(qhat[..., :3]) if g_n is None else np.asarray(g_n, dtype=np.float64)

    gw = dot3(g_u, zero, 2 * z, -2 * y) + dot3(g_v, -2 * z, zero, 2 * x) + dot3(g_n, 2 * y, -2 * x, zero)
    gx = dot3(g_u, zero, 2 * y, 2 * z) + dot3(g_v, 2 * y, -4 * x, 2 * w) + dot3(g_n, 2 * z, -2 * w, -4 * x)
    gy = dot3(g_u, -4 * y, 2 * x, -2 * w) + dot3(g_v, 2 * x, zero, 2 * z) + dot3(g_n, 2 * w, 2 * z, -4 * y)
    gz = dot3(g_u, -4 * z, 2 * w, 2 * x) + dot3(g_v, -2 * w, -4 * z, 2 * y) + dot3(g_n, 2 * x, 2 * y, zero)
    g_qhat = np.stack([gw, gx, gy, gz], axis=-1)

    radial = np.sum(g_qhat * qhat, axis=-1, keepdims=True)
    return (g_qhat - radial * qhat) / norms[..., None]


@dataclass
class SurfelCloud:
    """Struct-of-arrays surfel cloud. All arrays share leading dimension N."""

    centers: np.ndarray       # (N, 3) world positions
    quats: np.ndarray         # (N, 4) tangent frame, (w, x, y, z), unit up to renorm
    log_scales: np.ndarray    # (N, 2) log of tangent-axis standard deviations
    albedo_raw: np.ndarray    # (N, 3) pre-sigmoid
    metallic_raw: np.ndarray  # (N,) pre-sigmoid
    roughness_raw: np.ndarray  # (N,) pre-sigmoid

    def __post_init__(self):
        n = len(self.centers)
        for name in ("centers", "quats", "log_scales", "albedo_raw", "metallic_raw", "roughness_raw"):
            arr = np.asarray(getattr(self, name))
            # float64 is preserved so high-precision oracles can run end to end;
            # everything else becomes the float32 the pipeline runs in.
            dt = np.float64 if arr.dtype == np.float64 else np.float32
            arr = np.ascontiguousarray(arr, dtype=dt)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
            setattr(self, name, arr)
        if self.centers.shape[1:] != (3,) or self.quats.shape[1:] != (4,):
            raise ValueError("centers must be (N, 3) and quats (N, 4)")
        if self.log_scales.shape[1:] != (2,) or self.albedo_raw.shape[1:] != (3,):
            raise ValueError("log_scales must be (N, 2) and albedo_raw (N, 3)")

    def __len__(self):
        return len(self.centers)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def albedo(self):
        return sigmoid(self.albedo_raw)

    @property
    def metallic(self):
        return sigmoid(self.metallic_raw)

    @property
    def roughness(self):
        return sigmoid(self.roughness_raw)

    def frames(self):
        return quat_to_frame(self.quats)

    @property
    def normals(self):
        return self.frames()[2]

    def finite_mask(self):
        """Rows whose every field is finite. Non-finite rows are rejected by
        the renderer rather than propagated."""
        ok = np.isfinite(self.centers).all(axis=1)
        ok &= np.isfinite(self.quats).all(axis=1)
        ok &= np.isfinite(self.log_scales).all(axis=1)
        ok &= np.isfinite(self.albedo_raw).all(axis=1)
        ok &= np.isfinite(self.metallic_raw) & np.isfinite(self.roughness_raw)
        return ok

    def copy(self):
        return SurfelCloud(
            self.centers.copy(), self.quats.copy(), self.log_scales.copy(),
            self.albedo_raw.copy(), self.metallic_raw.copy(), self.roughness_raw.copy(),
        )

    def select(self, index):
        return SurfelCloud(
            self.centers[index], self.quats[index], self.log_scales[index],
            self.albedo_raw[index], self.metallic_raw[index], self.roughness_raw[index],
        )

    @staticmethod
    def concatenate(clouds):
        return SurfelCloud(
            np.concatenate([c.centers for c in clouds]),
            np.concatenate([c.quats for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.albedo_raw for c in clouds]),
            np.concatenate([c.metallic_raw for c in clouds]),
            np.concatenate([c.roughness_raw for c in clouds]),
        )

    @staticmethod
    def from_oriented_points(centers, normals, scales, albedo=0.5, metallic=0.04,
                             roughness=0.5, dtype=np.float32):
        """Build a cloud from points with outward normals. Tangents are an
        arbitrary smooth completion of the normal; scales may be scalar,
        per-surfel isotropic (N,) or per-axis (N, 2)."""
        centers = np.asarray(centers, dtype=np.float64)
        n = len(centers)
        quats = quats_from_normals(np.asarray(normals, dtype=np.float64))
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim == 0:
            scales = np.full((n, 2), float(scales))
        elif scales.ndim == 1:
            scales = np.stack([scales, scales], axis=1)
        albedo = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (n, 3))
        dt = np.dtype(dtype)
        return SurfelCloud(
            centers=centers.astype(dt),
            quats=quats.astype(dt),
            log_scales=np.log(scales).astype(dt),
            albedo_raw=logit(np.clip(albedo, 1e-5, 1 - 1e-5)).astype(dt),
            metallic_raw=np.full(n, logit(np.clip(metallic, 1e-5, 1 - 1e-5))).astype(dt),
            roughness_raw=np.full(n, logit(np.clip(roughness, 1e-5, 1 - 1e-5))).astype(dt),
        )


def quats_from_normals(normals):
    """Quaternions whose frame's third column equals the given unit normals.

    The in-plane tangent direction is chosen deterministically (shortest-arc
    rotation from +z to the normal)."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    quats = np.empty((len(n), 4))
    # shortest arc from e_z to n: q = (1 + n_z, -n_y, n_x, 0) normalized (w, x, y, z)
    w = 1.0 + n[:, 2]
    quats[:, 0] = w
    quats[:, 1] = -n[:, 1]
    quats[:, 2] = n[:, 0]
    quats[:, 3] = 0.0
    degenerate = w < 1e-8  # normal pointing straight down: rotate pi about x
    quats[degenerate] = (0.0, 1.0, 0.0, 0.0)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return quats
