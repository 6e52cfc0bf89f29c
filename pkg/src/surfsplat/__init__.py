"""CPU differentiable surface splatting renderer and inverse rendering toolkit."""

import os

# Worker counts are capped by NUMBA_NUM_THREADS at numba import time. Raise the
# cap before anything pulls numba in so render(workers=N) works for N > cpu count
# (threads beyond the core count just timeshare; results are unaffected because
# reductions are merged in a fixed order).
if "numba" not in globals() and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(8, os.cpu_count() or 1))

__version__ = "0.1.0"

from .surfels import SurfelCloud, quat_to_frame, sigmoid, logit
from .camera import Camera, look_at, perspective_matrix, orbit_cameras
from .preprocess import (
    PreprocessOptions,
    ProjectedSurfels,
    build_tmatrix,
    depth_extent,
    bounding_rect,
    intersect_ray,
    center_jacobian,
    mip_precompute,
    preprocess,
)
from .rasterizer import RenderOptions, RenderResult, render, workers_from_env
from .shading import EnvironmentLight, shade_surfels, tone_map, brdf_lut
from .backward import backward_image, BackwardResult
from .losses import photometric_loss, silhouette_loss, consolidation_loss, normal_consistency_loss
from .adam import Adam
from .knn import NeighborIndex
from .train import FitConfig, fit, init_sphere_cloud

__all__ = [
    "SurfelCloud",
    "quat_to_frame",
    "sigmoid",
    "logit",
    "Camera",
    "look_at",
    "perspective_matrix",
    "orbit_cameras",
    "PreprocessOptions",
    "ProjectedSurfels",
    "build_tmatrix",
    "depth_extent",
    "bounding_rect",
    "intersect_ray",
    "center_jacobian",
    "mip_precompute",
    "preprocess",
    "RenderOptions",
    "RenderResult",
    "render",
    "workers_from_env",
    "EnvironmentLight",
    "shade_surfels",
    "tone_map",
    "brdf_lut",
    "backward_image",
    "BackwardResult",
    "photometric_loss",
    "silhouette_loss",
    "consolidation_loss",
    "normal_consistency_loss",
    "Adam",
    "NeighborIndex",
    "FitConfig",
    "fit",
    "init_sphere_cloud",
]
