"""Pinhole cameras.

Conventions: right-handed world, camera looks down its -z axis, +x right and
+y up in view space. NDC spans [-1, 1]^2 with +y up; pixel (ix, iy) has its
center at ndc ((ix + 0.5) * 2 / W - 1, 1 - (iy + 0.5) * 2 / H), so image row 0
is the top of the frame. The projection is GL-style, which makes the clip w of
a view-space point equal to its positive view depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def perspective_matrix(fov_y_rad, aspect, near=0.01, far=100.0):
    f = 1.0 / np.tan(0.5 * fov_y_rad)
    m = np.zeros((4, 4))
    m[0, 0] = f / aspect
    m[1, 1] = f
    m[2, 2] = (far + near) / (near - far)
    m[2, 3] = 2.0 * far * near / (near - far)
    m[3, 2] = -1.0
    return m


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-view matrix for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # up parallel to view direction, pick another up
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right /= nr
    true_up = np.cross(right, fwd)
    view = np.eye(4)
    view[0, :3] = right
    view[1, :3] = true_up
    view[2, :3] = -fwd
    view[:3, 3] = -view[:3, :3] @ eye
    return view


@dataclass
class Camera:
    view: np.ndarray   # (4, 4) world -> view
    proj: np.ndarray   # (4, 4) view -> clip
    width: int
    height: int

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64).reshape(4, 4)
        self.proj = np.asarray(self.proj, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    @staticmethod
    def perspective(width, height, fov_y_deg, eye, target, up=(0.0, 0.0, 1.0), near=0.01, far=100.0):
        proj = perspective_matrix(np.deg2rad(fov_y_deg), width / height, near, far)
        return Camera(look_at(eye, target, up), proj, width, height)

    @property
    def position(self):
        r = self.view[:3, :3]
        return -r.T @ self.view[:3, 3]

    def pixel_centers_ndc(self, dtype=np.float64):
        """NDC coordinates of all pixel centers: arrays x (W,), y (H,)."""
        xs = (np.arange(self.width, dtype=dtype) + dtype(0.5)) * dtype(2.0 / self.width) - dtype(1.0)
        ys = dtype(1.0) - (np.arange(self.height, dtype=dtype) + dtype(0.5)) * dtype(2.0 / self.height)
        return xs, ys

    def ndc_to_pixel(self, ndc_x, ndc_y):
        """Continuous pixel coordinates (column, row) of NDC points."""
        px = (np.asarray(ndc_x) + 1.0) * 0.5 * self.width - 0.5
        py = (1.0 - np.asarray(ndc_y)) * 0.5 * self.height - 0.5
        return px, py

    def pixel_rays(self, dtype=np.float64):
        """World-space origins (3,) and unit directions (H, W, 3) through every
        pixel center. Diagnostic helper; the renderer works in T-matrix space."""
        xs, ys = self.pixel_centers_ndc(dtype)
        xg, yg = np.meshgrid(xs, ys)
        inv_proj = np.linalg.inv(self.proj)
        clip = np.stack([xg, yg, np.full_like(xg, -1.0), np.ones_like(xg)], axis=-1)
        view_pt = clip @ inv_proj.T
        view_pt = view_pt[..., :3] / view_pt[..., 3:4]
        r = self.view[:3, :3]
        dirs = view_pt @ r  # R^T applied to each view-space direction
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        return self.position, dirs.astype(dtype)


def orbit_cameras(count, center, radius, elevation_deg, width, height, fov_y_deg=45.0,
                  up=(0.0, 0.0, 1.0), near=0.01, far=100.0, full_turns=1.0):
    """Equally spaced cameras on a circular orbit, all looking at center."""
    center = np.asarray(center, dtype=np.float64)
    elev = np.deg2rad(elevation_deg)
    cams = []
    for i in range(count):
        az = 2.0 * np.pi * full_turns * i / count
        eye = center + radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        cams.append(Camera.perspective(width, height, fov_y_deg, eye, center, up, near, far))
    return cams


def sphere_cameras(count, center, radius, width, height, fov_y_deg=45.0, seed=0,
                   min_elevation_deg=-60.0, max_elevation_deg=60.0, near=0.01, far=100.0):
    """Randomized but seeded viewpoints on a spherical shell around center."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for _ in range(count):
        az = rng.uniform(0.0, 2.0 * np.pi)
        elev = np.deg2rad(rng.uniform(min_elevation_deg, max_elevation_deg))
        eye = center + radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        cams.append(Camera.perspective(width, height, fov_y_deg, eye, center, near=near, far=far))
    return cams
