"""Surfel initialization from triangle meshes.

Samples are spread across faces in proportion to area with a largest
remainder allocation, so every face count is within one of its exact quota.
Scales either isotropic from local point spacing or anisotropic from a
tangent-plane PCA of the neighborhood.
"""

from __future__ import annotations

import warnings

import numpy as np

from .knn import NeighborIndex
from .surfels import SurfelCloud, quats_from_normals

ISO_SCALE_FACTOR = 1.5


def icosphere_mesh(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron projected onto a sphere. Outward winding."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts * radius + np.asarray(center, dtype=np.float64), faces


def torus_mesh(major: float = 1.0, minor: float = 0.35, n_major: int = 48,
               n_minor: int = 24, center=(0.0, 0.0, 0.0)):
    """Axis-aligned torus around +z. Outward winding."""
    iu, iv = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    phi = 2.0 * np.pi * iu / n_major
    psi = 2.0 * np.pi * iv / n_minor
    ring = major + minor * np.cos(psi)
    verts = np.stack(
        [ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(psi)], axis=-1
    ).reshape(-1, 3) + np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return verts, np.asarray(faces, dtype=np.int64)


def face_geometry(vertices, faces):
    """Per-face areas and unit normals (right-hand winding)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    cross = np.cross(e1, e2)
    norm = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norm
    normals = cross / np.maximum(norm, 1e-30)[:, None]
    return areas, normals


def allocate_counts(areas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to areas, summing exactly to total, each
    within one of its real-valued quota (largest remainder rule)."""
    areas = np.asarray(areas, dtype=np.float64)
    quota = areas / areas.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def sample_mesh(vertices, faces, samples_per_face: float = 5.0, mode: str = "iso",
                seed: int = 0, k: int = 8, albedo=0.5, metallic: float = 0.04,
                roughness: float = 0.5, dtype=np.float32) -> SurfelCloud:
    """Surfel cloud covering a triangle mesh.

    mode "iso" sizes every surfel isotropically from its mean distance to
    orientation-compatible neighbors; "aniso" aligns the tangent frame with
    the principal directions of the projected neighborhood and sizes each
    axis from the spread along it.
    """
    if mode not in ("iso", "aniso"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    areas, face_normals = face_geometry(v, f)
    good = areas > 0.0
    n_bad = int((~good).sum())
    if n_bad:
        warnings.warn(f"skipped {n_bad} zero-area faces", RuntimeWarning,
                      stacklevel=2)
        f, areas, face_normals = f[good], areas[good], face_normals[good]
    if len(f) == 0:
        raise ValueError("mesh has no positive-area faces")
    total = max(int(round(samples_per_face * len(f))), 1)
    counts = allocate_counts(areas, total)

    rng = np.random.default_rng(seed)
    face_of = np.repeat(np.arange(len(f)), counts)
    r1 = rng.random(total)
    r2 = rng.random(total)
    su = np.sqrt(r1)
    b0 = 1.0 - su
    b1 = su * (1.0 - r2)
    b2 = su * r2
    tri = v[f[face_of]]
    points = b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    normals = face_normals[face_of]

    cloud = SurfelCloud.from_oriented_points(
        points, normals, np.ones(total), albedo=albedo, metallic=metallic,
        roughness=roughness, dtype=np.float64)
    index = NeighborIndex(cloud, k=min(k, max(total - 1, 1)))
    iso = ISO_SCALE_FACTOR * index.mean_dist

    if mode == "iso":
        cloud.log_scales = np.log(np.stack([iso, iso], axis=1))
    else:
        quats, scales = _pca_frames(points, normals, index, iso)
        cloud.quats = quats
        cloud.log_scales = np.log(scales)
    return SurfelCloud(
        centers=cloud.centers.astype(dtype),
        quats=cloud.quats.astype(dtype),
        log_scales=cloud.log_scales.astype(dtype),
        albedo_raw=cloud.albedo_raw.astype(dtype),
        metallic_raw=cloud.metallic_raw.astype(dtype),
        roughness_raw=cloud.roughness_raw.astype(dtype),
    )


def _pca_frames(points, normals, index: NeighborIndex, iso):
    """Tangent frames aligned with the neighborhood's principal directions.

    Neighbor offsets are projected into each point's tangent plane; the 2x2
    covariance eigensystem gives the major axis and per-axis spreads. Scales
    ride the spread ratio around the isotropic estimate, floored so thin
    neighborhoods cannot collapse an axis."""
    n = len(points)
    quats = quats_from_normals(normals)
    base_u, base_v, _ = _frame_cols(quats)
    scales = np.stack([iso, iso], axis=1)
    out_quats = quats.copy()
    for i in range(n):
        nb = index.neighbors[i]
        nb = nb[nb >= 0]
        if len(nb) < 3:
            continue
        off = points[nb] - points[i]
        pu = off @ base_u[i]
        pv = off @ base_v[i]
        cov = np.cov(np.stack([pu, pv]), bias=True)
        evals, evecs = np.linalg.eigh(cov)
        spread = np.sqrt(np.maximum(evals[::-1], 1e-20))
        # per-axis spread ratio around the isotropic size, geometric mean kept
        ratio = spread / max(np.sqrt(spread[0] * spread[1]), 1e-12)
        scales[i] = np.maximum(iso[i] * ratio, 0.25 * iso[i])
        major = evecs[:, 1]
        ang = np.arctan2(major[1], major[0])
        half = 0.5 * ang
        spin = np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
        out_quats[i] = _quat_mul(quats[i], spin)
    return out_quats, scales


def _frame_cols(quats):
    from .surfels import quat_to_frame

    return quat_to_frame(quats)


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
