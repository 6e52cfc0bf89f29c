"""Frame-rate benchmark: warmup then timed renders along a camera orbit."""

from __future__ import annotations

import resource
import time

import numpy as np

from .camera import orbit_cameras
from .rasterizer import RenderOptions, render

DEFAULT_FRAMES = 600
DEFAULT_WARMUP = 200


def peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_benchmark(cloud, cameras=None, options: RenderOptions | None = None,
                  env=None, frames: int = DEFAULT_FRAMES,
                  warmup: int = DEFAULT_WARMUP, orbit_radius: float = 4.0,
                  width: int = 800, height: int = 600) -> dict:
    """Render `frames` timed frames after `warmup` untimed ones, cycling the
    cameras. Returns mean/std of per-frame time and rate plus peak memory."""
    opts = options or RenderOptions()
    if cameras is None:
        cameras = orbit_cameras(120, (0.0, 0.0, 0.0), orbit_radius, 15.0,
                                width, height)
    n_cams = len(cameras)
    for i in range(warmup):
        render(cloud, cameras[i % n_cams], opts, env=env)
    times = np.empty(frames)
    for i in range(frames):
        t0 = time.perf_counter()
        render(cloud, cameras[i % n_cams], opts, env=env)
        times[i] = time.perf_counter() - t0
    fps = 1.0 / times
    return {
        "frames": frames,
        "warmup": warmup,
        "surfels": len(cloud),
        "width": cameras[0].width,
        "height": cameras[0].height,
        "mode": "ibl" if env is not None else "albedo",
        "ms_mean": float(times.mean() * 1e3),
        "ms_std": float(times.std() * 1e3),
        "fps_mean": float(fps.mean()),
        "fps_std": float(fps.std()),
        "peak_rss_mb": peak_rss_mb(),
    }


def format_benchmark(stats: dict) -> str:
    return (f"{stats['mode']} {stats['surfels']} surfels "
            f"{stats['width']}x{stats['height']}: "
            f"{stats['fps_mean']:.2f} +- {stats['fps_std']:.2f} fps "
            f"({stats['ms_mean']:.2f} +- {stats['ms_std']:.2f} ms/frame), "
            f"peak rss {stats['peak_rss_mb']:.0f} MB "
            f"[{stats['frames']} frames, {stats['warmup']} warmup]")
