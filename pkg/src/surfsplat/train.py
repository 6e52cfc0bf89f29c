"""Inverse-rendering optimization loop.

Three phases over the step budget: a warmup on photometric and silhouette
terms, a main phase that adds the depth-consolidation and normal-consistency
regularizers and adapts the surfel count, and a refinement phase on frozen
topology. The view schedule is a pure function of the step index, so a run
resumed from a checkpoint replays the exact same sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .adam import Adam
from .backward import backward_image
from .densify import DensifyStats, mask_votes, refine_topology
from .knn import NeighborIndex
from .losses import normal_consistency_loss, photometric_loss, silhouette_loss
from .rasterizer import RenderOptions, render
from .sceneio import load_checkpoint, save_checkpoint
from .shading import EnvironmentLight, tone_map, tone_map_backward
from .surfels import SurfelCloud, normalize_quats

PARAM_NAMES = ("centers", "quats", "log_scales", "albedo_raw", "metallic_raw",
               "roughness_raw")
GEOMETRY_PARAMS = ("centers", "quats", "log_scales")


@dataclass
class FitConfig:
    steps: int = 1000
    seed: int = 0
    lr_position: float = 1.6e-4      # scaled by scene extent, decays
    lr_position_final: float = 0.01  # fraction of the initial rate at the end
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_material: float = 5e-3
    lr_env: float = 1e-2
    lambda_ssim: float = 0.2
    lambda_sil: float = 1.0
    lambda_cons: float = 100.0
    lambda_nc: float = 0.05
    warmup_frac: float = 0.1
    refine_frac: float = 0.3
    densify_interval: int = 500
    knn_interval: int = 100
    k_neighbors: int = 8
    max_surfels: int = 200_000
    init_surfels: int = 2000
    fixed_geometry: bool = False
    enable_sil: bool = True
    enable_cons: bool = True
    enable_nc: bool = True
    tone: str = "hdr-loss"
    holdout: tuple = ()
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 0
    workers: int | None = None
    k_max: int = 16

    def phase(self, step: int) -> int:
        """1 warmup, 2 main (densify), 3 refine."""
        if step < int(self.steps * self.warmup_frac):
            return 1
        if step < self.steps - int(self.steps * self.refine_frac):
            return 2
        return 3

    def position_lr(self, step: int, extent: float) -> float:
        t = min(step / max(self.steps - 1, 1), 1.0)
        return self.lr_position * extent * self.lr_position_final ** t


@dataclass
class FitResult:
    cloud: SurfelCloud
    env: EnvironmentLight
    metrics: list = field(default_factory=list)
    diverged: bool = False
    steps_run: int = 0
    checkpoints: list = field(default_factory=list)


def init_sphere_cloud(n: int, center=(0.0, 0.0, 0.0), radius: float = 1.0,
                      seed: int = 0, albedo: float = 0.5, metallic: float = 0.5,
                      roughness: float = 0.1) -> SurfelCloud:
    """Uniform random sphere shell, normals outward, isotropic scales from
    the mean distance to orientation-compatible neighbors."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = np.asarray(center, dtype=np.float64) + radius * dirs
    cloud = SurfelCloud.from_oriented_points(centers, dirs, np.ones(n),
                                             albedo=albedo, metallic=metallic,
                                             roughness=roughness)
    index = NeighborIndex(cloud, k=min(8, max(n - 1, 1)))
    iso = 1.5 * index.mean_dist
    cloud.log_scales = np.log(np.stack([iso, iso], axis=1)).astype(
        cloud.log_scales.dtype)
    return cloud


def view_for_step(step: int, n_views: int, train_views, seed: int) -> int:
    """Seeded per-epoch permutation, addressed purely by step index."""
    epoch, pos = divmod(step, len(train_views))
    perm = np.random.default_rng(seed + 1000003 * epoch).permutation(len(train_views))
    return int(train_views[perm[pos]])


def psnr(img, target) -> float:
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - target) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def evaluate_views(cloud, env, dataset, views, options, tone: str = "ldr"):
    """Mean PSNR over the given view indices, in tone-mapped space."""
    scores = []
    for vi in views:
        cam = dataset["cameras"][vi]
        res = render(cloud, cam, options, env=env)
        pred = tone_map(res.rgb.astype(np.float64), tone)
        ref = tone_map(np.asarray(dataset["images"][vi], dtype=np.float64), tone)
        scores.append(psnr(pred, ref))
    return float(np.mean(scores))


def _cloud_params(cloud: SurfelCloud) -> dict[str, np.ndarray]:
    return {name: getattr(cloud, name) for name in PARAM_NAMES}


def _grad_lookup(grads, env_grad_key: str = "env_base_log"):
    return {
        "centers": grads.centers, "quats": grads.quats,
        "log_scales": grads.log_scales, "albedo_raw": grads.albedo_raw,
        "metallic_raw": grads.metallic_raw, "roughness_raw": grads.roughness_raw,
        env_grad_key: grads.env_base_log,
    }


def _finite(*arrays) -> bool:
    return all(a is None or np.isfinite(a).all() for a in arrays)


def fit(dataset, config: FitConfig | None = None, cloud: SurfelCloud | None = None,
        env: EnvironmentLight | None = None, start_step: int = 0,
        optimizer: Adam | None = None, stats: DensifyStats | None = None,
        index: NeighborIndex | None = None) -> FitResult:
    """Optimize a surfel cloud and environment against a dataset.

    dataset is a dict with cameras, images (linear HDR), masks (or None
    entries), and extent. Pass cloud/env/optimizer/start_step to resume.
    """
    cfg = config or FitConfig()
    cameras = dataset["cameras"]
    images = dataset["images"]
    masks = dataset.get("masks") or [None] * len(cameras)
    extent = float(dataset.get("extent", 1.0))
    n_views = len(cameras)
    train_views = [i for i in range(n_views) if i not in set(cfg.holdout)]
    if not train_views:
        raise ValueError("no training views left after holdout")

    if cloud is None:
        cloud = init_sphere_cloud(cfg.init_surfels, radius=extent, seed=cfg.seed)
    cloud = cloud.copy()
    cloud.centers = cloud.centers.astype(np.float64)
    cloud.quats = cloud.quats.astype(np.float64)
    cloud.log_scales = cloud.log_scales.astype(np.float64)
    cloud.albedo_raw = cloud.albedo_raw.astype(np.float64)
    cloud.metallic_raw = cloud.metallic_raw.astype(np.float64)
    cloud.roughness_raw = cloud.roughness_raw.astype(np.float64)
    if env is None:
        env = EnvironmentLight.uniform(value=0.3)
    env = env.copy()

    opt = optimizer or Adam()
    stats = stats or DensifyStats.zeros(len(cloud))
    index = index or NeighborIndex(cloud, k=cfg.k_neighbors)
    options = RenderOptions(shade="ibl", workers=cfg.workers, k_max=cfg.k_max)
    npix = cameras[0].width * cameras[0].height

    result = FitResult(cloud=cloud, env=env)
    last_good = None

    for step in range(start_step, cfg.steps):
        phase = cfg.phase(step)
        vi = view_for_step(step, n_views, train_views, cfg.seed)
        cam = cameras[vi]
        target = np.asarray(images[vi], dtype=np.float64)
        mask = masks[vi]

        res = render(cloud, cam, options, env=env)
        rgb = res.rgb.astype(np.float64)
        mapped = tone_map(rgb, cfg.tone)
        mapped_target = tone_map(target, cfg.tone)
        photo, g_mapped = photometric_loss(mapped, mapped_target, cfg.lambda_ssim)
        g_rgb = tone_map_backward(rgb, cfg.tone, g_mapped)

        sil = 0.0
        g_alpha = None
        if cfg.enable_sil and phase == 1 and mask is not None:
            sil, g_alpha = silhouette_loss(res.alpha.astype(np.float64), mask)
            g_alpha = cfg.lambda_sil * g_alpha

        cons_scale = 0.0
        if cfg.enable_cons and phase >= 2:
            cons_scale = cfg.lambda_cons / (extent * npix)

        grads = backward_image(cloud, res, g_rgb=g_rgb, g_alpha=g_alpha,
                               cons_scale=cons_scale)

        nc = 0.0
        if cfg.enable_nc and phase >= 2:
            nc, g_nc_quats = normal_consistency_loss(cloud, index)
            grads.quats += cfg.lambda_nc * g_nc_quats

        loss = (photo + cfg.lambda_sil * sil + grads.cons_loss
                + cfg.lambda_nc * nc)
        grad_map = _grad_lookup(grads)
        if not (np.isfinite(loss) and _finite(*grad_map.values())):
            result.diverged = True
            if last_good is not None:
                cloud, env, opt, stats, index = last_good
                result.cloud = cloud
                result.env = env
            result.steps_run = step
            return result

        lrs = {
            "centers": cfg.position_lr(step, extent),
            "quats": cfg.lr_rotation,
            "log_scales": cfg.lr_scale,
            "albedo_raw": cfg.lr_material,
            "metallic_raw": cfg.lr_material,
            "roughness_raw": cfg.lr_material,
            "env_base_log": cfg.lr_env,
        }
        params = _cloud_params(cloud)
        for name in PARAM_NAMES:
            if cfg.fixed_geometry and name in GEOMETRY_PARAMS:
                continue
            opt.step(name, params[name], grad_map[name], lrs[name])
        cloud.quats = normalize_quats(cloud.quats)[0]
        opt.step("env_base_log", env.base_log, grads.env_base_log, lrs["env_base_log"])
        env.refresh()

        stats.accumulate(grads.ss_grad, grads.touched)

        result.metrics.append({
            "step": step, "view": vi, "phase": phase, "loss": float(loss),
            "photometric": float(photo), "silhouette": float(sil),
            "consolidation": float(grads.cons_loss), "normal_consistency": float(nc),
            "surfels": len(cloud),
        })

        next_step = step + 1
        if (phase == 2 and not cfg.fixed_geometry and cfg.densify_interval > 0
                and next_step % cfg.densify_interval == 0
                and cfg.phase(next_step) == 2):
            votes = (None, None)
            if any(m is not None for m in masks):
                have = [i for i in train_views if masks[i] is not None]
                votes = mask_votes(cloud, [cameras[i] for i in have],
                                   [masks[i] for i in have])
            cloud, index_map, reasons = refine_topology(
                cloud, stats, index.mean_dist, cfg.max_surfels,
                outside_mask_votes=votes[0], front_votes=votes[1])
            for name in PARAM_NAMES:
                opt.remap(name, index_map)
            stats = DensifyStats.zeros(len(cloud))
            index.rebuild(cloud)
            result.cloud = cloud
            result.metrics[-1]["topology"] = reasons
        elif cfg.knn_interval > 0 and next_step % cfg.knn_interval == 0:
            index.rebuild(cloud)

        if cfg.checkpoint_interval and next_step % cfg.checkpoint_interval == 0:
            last_good = (cloud.copy(), env.copy(), _copy_adam(opt),
                         DensifyStats(stats.grad_sum.copy(), stats.view_count.copy()),
                         index)
            if cfg.checkpoint_dir:
                os.makedirs(cfg.checkpoint_dir, exist_ok=True)
                path = os.path.join(cfg.checkpoint_dir, f"step_{next_step:06d}.npz")
                save_checkpoint(path, cloud, env, opt, next_step,
                                index.neighbors, index.mean_dist,
                                extra={"densify_grad_sum": stats.grad_sum,
                                       "densify_view_count": stats.view_count})
                result.checkpoints.append(path)

    result.cloud = cloud
    result.env = env
    result.steps_run = cfg.steps
    return result


def _copy_adam(opt: Adam) -> Adam:
    dup = Adam(opt.beta1, opt.beta2, opt.eps)
    dup.m = {k: v.copy() for k, v in opt.m.items()}
    dup.v = {k: v.copy() for k, v in opt.v.items()}
    dup.t = dict(opt.t)
    return dup


def resume(checkpoint_path, dataset, config: FitConfig) -> FitResult:
    """Continue a fit from a checkpoint file, replaying the view schedule."""
    cloud, env, opt_arrays, step, knn_nb, knn_d, extra = load_checkpoint(checkpoint_path)
    cloud.centers = cloud.centers.astype(np.float64)
    cloud.quats = cloud.quats.astype(np.float64)
    cloud.log_scales = cloud.log_scales.astype(np.float64)
    cloud.albedo_raw = cloud.albedo_raw.astype(np.float64)
    cloud.metallic_raw = cloud.metallic_raw.astype(np.float64)
    cloud.roughness_raw = cloud.roughness_raw.astype(np.float64)
    opt = Adam()
    opt.load_state_arrays(opt_arrays)
    index = NeighborIndex.__new__(NeighborIndex)
    index.k = config.k_neighbors
    index.neighbors = knn_nb
    index.mean_dist = knn_d
    index.size = len(cloud)
    stats = DensifyStats.zeros(len(cloud))
    if "densify_grad_sum" in extra:
        stats = DensifyStats(extra["densify_grad_sum"].astype(np.float64),
                             extra["densify_view_count"].astype(np.int64))
    return fit(dataset, config, cloud=cloud, env=env, start_step=step,
               optimizer=opt, stats=stats, index=index)
