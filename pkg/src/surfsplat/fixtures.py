"""Reproducible scenes used by the test suite, the benchmark, and the CLI.

Every builder is seeded and pure, so two processes construct bit-identical
inputs. The registry at the bottom lists the determinism fixtures: scenes
small enough to run forward and backward under several worker counts.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import Camera, orbit_cameras
from .knn import NeighborIndex
from .meshsample import icosphere_mesh, sample_mesh, torus_mesh
from .rasterizer import RenderOptions, render
from .shading import EnvironmentLight
from .surfels import SurfelCloud


def make_grid_cloud(n: int = 48, spacing: float = 1.0, scale: float = 1.0,
                    albedo=0.75) -> SurfelCloud:
    """Regular planar grid of identical surfels in the z = 0 plane, normals
    +z. Unit spacing makes the interior kernel weight sum approach 2 pi."""
    ax = (np.arange(n) - (n - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(ax, ax)
    centers = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (n * n, 1))
    return SurfelCloud.from_oriented_points(centers, normals, scale, albedo=albedo)


def grid_camera(width: int = 64, height: int = 64, distance: float = 18.0) -> Camera:
    return Camera.perspective(width, height, 45.0, (0.0, 0.0, distance),
                              (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))


def make_checkerboard(n: int = 250_000, extent: float = 40.0, cell: float = 1.0,
                      seed: int = 0) -> SurfelCloud:
    """Random surfels on a checker-textured ground plane. The albedo flips
    between dark and light squares, a classic minification stress pattern."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, size=(n, 2))
    centers = np.concatenate([xy, np.zeros((n, 1))], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    parity = (np.floor(xy[:, 0] / cell) + np.floor(xy[:, 1] / cell)) % 2
    shade = np.where(parity > 0, 0.9, 0.1)
    albedo = np.stack([shade, shade, shade], axis=1)
    density = n / (2.0 * extent) ** 2
    iso = 1.5 * 0.5 / np.sqrt(density)  # Poisson mean nearest-neighbor distance
    return SurfelCloud.from_oriented_points(centers, normals, iso, albedo=albedo)


def checkerboard_camera(width: int = 800, height: int = 600,
                        extent: float = 40.0) -> Camera:
    """Grazing view across the plane; the upper image rows see it minified.
    The low eye height pushes the far rows well below one cell per pixel."""
    return Camera.perspective(width, height, 55.0, (0.0, -extent - 6.0, 2.0),
                              (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), far=300.0)


def make_sphere_cloud(center, radius: float = 1.0, subdivisions: int = 2,
                      albedo=0.7, seed: int = 0, samples_per_face: float = 5.0,
                      metallic: float = 0.04, roughness: float = 0.5) -> SurfelCloud:
    verts, faces = icosphere_mesh(subdivisions, radius, center)
    return sample_mesh(verts, faces, samples_per_face=samples_per_face, mode="iso",
                       seed=seed, albedo=albedo, metallic=metallic, roughness=roughness)


def make_two_spheres(seed: int = 0) -> SurfelCloud:
    """An occluder sphere in front of a larger one, for edge-profile tests."""
    front = make_sphere_cloud((0.0, 0.0, 0.0), 1.0, albedo=(0.85, 0.3, 0.25), seed=seed)
    back = make_sphere_cloud((1.2, 3.0, 0.0), 1.4, albedo=(0.25, 0.4, 0.85), seed=seed + 1)
    return SurfelCloud.concatenate([front, back])


def two_spheres_camera(width: int = 96, height: int = 96) -> Camera:
    return Camera.perspective(width, height, 35.0, (0.0, -6.0, 0.0), (0.0, 0.0, 0.0))


def make_blob(seed: int = 0, samples_per_face: float = 8.0) -> SurfelCloud:
    """Genus-one blob: a densely sampled torus with anisotropic surfels."""
    verts, faces = torus_mesh(1.0, 0.45, n_major=64, n_minor=32)
    return sample_mesh(verts, faces, samples_per_face=samples_per_face, mode="aniso",
                       seed=seed, albedo=(0.7, 0.55, 0.3))


def blob_camera(width: int = 96, height: int = 96) -> Camera:
    return Camera.perspective(width, height, 40.0, (0.0, -4.6, 2.2), (0.0, 0.0, 0.0))


def blob_interior_mask(camera: Camera, erode: int = 3) -> np.ndarray:
    """Silhouette interior of the blob's own mesh, rasterized independently
    of the splat renderer, then eroded to stay clear of edge pixels."""
    import cv2

    verts, faces = torus_mesh(1.0, 0.45, n_major=64, n_minor=32)
    hom = np.concatenate([verts, np.ones((len(verts), 1))], axis=1)
    clip = hom @ camera.view.T @ camera.proj.T
    ndc = clip[:, :2] / clip[:, 3:4]
    px, py = camera.ndc_to_pixel(ndc[:, 0], ndc[:, 1])
    pts = np.stack([px, py], axis=1)
    mask = np.zeros((camera.height, camera.width), dtype=np.uint8)
    in_front = -((hom @ camera.view.T)[:, 2]) > 0
    for f in faces:
        if not in_front[f].all():
            continue
        tri = np.round(pts[f]).astype(np.int32)
        cv2.fillConvexPoly(mask, tri, 1)
    if erode > 0:
        kernel = np.ones((2 * erode + 1, 2 * erode + 1), dtype=np.uint8)
        mask = cv2.erode(mask, kernel)
    return mask.astype(bool)


def make_two_shells(seed: int = 0) -> SurfelCloud:
    """Two concentric sphere shells a small gap apart, both facing outward."""
    inner = make_sphere_cloud((0.0, 0.0, 0.0), 1.0, albedo=(0.8, 0.5, 0.3), seed=seed)
    outer = make_sphere_cloud((0.0, 0.0, 0.0), 1.12, albedo=(0.3, 0.5, 0.8), seed=seed + 1)
    return SurfelCloud.concatenate([inner, outer])


def two_shells_cameras(count: int = 4, width: int = 72, height: int = 72):
    return orbit_cameras(count, (0.0, 0.0, 0.0), 5.0, 18.0, width, height)


def make_env(seed: int = 0, shape=(16, 32), contrast: float = 0.8) -> EnvironmentLight:
    """Smooth, seeded environment with a brighter upper hemisphere."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=shape + (3,))
    smooth = np.stack(
        [gaussian_filter(noise[..., c], sigma=2.0, mode=("nearest", "wrap"))
         for c in range(3)], axis=-1)
    smooth *= contrast / max(np.abs(smooth).max(), 1e-9)
    theta = (np.arange(shape[0]) + 0.5) * np.pi / shape[0]
    sky = 0.6 * np.cos(theta)[:, None, None]
    base_log = np.log(0.8) + smooth + sky
    return EnvironmentLight(base_log=base_log)


def make_diffuse_sphere_dataset(n_views: int = 20, size: int = 128, seed: int = 0,
                                albedo=(0.8, 0.45, 0.3)):
    """Ground-truth renders of a diffuse sphere under a fixed environment.

    Returns a dict with the ground-truth cloud, environment, cameras, HDR
    target images, coverage masks, and the scene extent.
    """
    cloud = make_sphere_cloud((0.0, 0.0, 0.0), 1.0, subdivisions=3, albedo=albedo,
                              seed=seed, metallic=1e-4, roughness=0.9)
    env = make_env(seed=seed + 7)
    cameras = orbit_cameras(n_views, (0.0, 0.0, 0.0), 4.2, 20.0, size, size,
                            fov_y_deg=40.0, full_turns=1.0)
    opts = RenderOptions(shade="ibl")
    images, masks = [], []
    for cam in cameras:
        res = render(cloud, cam, opts, env=env)
        images.append(res.rgb.astype(np.float32))
        masks.append((res.alpha > 0.5).astype(np.float32))
    return {
        "cloud": cloud,
        "env": env,
        "cameras": cameras,
        "images": images,
        "masks": masks,
        "extent": 1.0,
        "albedo": np.asarray(albedo, dtype=np.float64),
    }


def determinism_fixtures() -> dict:
    """Small fixture set for cross-worker bit-identity checks. Each entry is
    (cloud, camera, options, env); every scene runs forward and backward."""
    small_checker = make_checkerboard(n=5000, extent=10.0, cell=1.0, seed=3)
    fixtures = {
        "grid": (make_grid_cloud(16, 1.0, 1.0), grid_camera(48, 48, 9.0),
                 RenderOptions(collect_stacks=True), None),
        "checkerboard": (small_checker,
                         Camera.perspective(160, 120, 55.0, (0.0, -14.0, 4.0),
                                            (0.0, 0.0, 0.0), up=(0, 0, 1), far=100.0),
                         RenderOptions(), None),
        "two_spheres": (make_two_spheres(), two_spheres_camera(64, 64),
                        RenderOptions(), None),
        "blob": (make_blob(samples_per_face=4.0), blob_camera(64, 64),
                 RenderOptions(mip_enabled=True), None),
        "two_shells": (make_two_shells(), two_shells_cameras(1, 64, 64)[0],
                       RenderOptions(collect_stacks=True), None),
        "shaded_sphere": (make_sphere_cloud((0.0, 0.0, 0.0), 1.0, seed=5),
                          two_spheres_camera(64, 64),
                          RenderOptions(shade="ibl"), make_env(11)),
    }
    return fixtures
