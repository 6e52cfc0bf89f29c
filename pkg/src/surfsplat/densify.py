"""Adaptive refinement of the surfel cloud: splitting and pruning.

Splits replace one oversized, high-gradient surfel with two children placed
symmetrically along its longer tangent axis, so the children's midpoint is
the parent center exactly. Pruning removes surfels that stopped contributing,
lost all neighbors, or consistently project outside the target masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .preprocess import R_CUT
from .surfels import SurfelCloud, quat_to_frame

SPLIT_QUANTILE = 0.9
SPLIT_GRAD_FLOOR = 1e-8
SPLIT_SCALE_FACTOR = 0.7


@dataclass
class DensifyStats:
    """Screen-space gradient accumulator between topology updates."""

    grad_sum: np.ndarray
    view_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n, dtype=np.float64), np.zeros(n, dtype=np.int64))

    def accumulate(self, ss_grad: np.ndarray, touched: np.ndarray) -> None:
        self.grad_sum += ss_grad
        self.view_count += touched.astype(np.int64)

    def mean_grad(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.view_count, 1)


def select_split(
    cloud: SurfelCloud,
    mean_grad: np.ndarray,
    mean_neighbor_dist: np.ndarray,
    quantile: float = SPLIT_QUANTILE,
    grad_floor: float = SPLIT_GRAD_FLOOR,
) -> np.ndarray:
    """Surfels to split: screen gradient above the population quantile (and
    an absolute floor) while wider than the local point spacing."""
    active = mean_grad > 0.0
    if not np.any(active):
        return np.zeros(len(cloud), dtype=bool)
    thresh = max(float(np.quantile(mean_grad[active], quantile)), grad_floor)
    max_scale = cloud.scales.max(axis=1)
    return (mean_grad >= thresh) & (max_scale > mean_neighbor_dist)


def split_cloud(cloud: SurfelCloud, mask: np.ndarray) -> tuple[SurfelCloud, np.ndarray]:
    """Replace masked surfels with two children each.

    Children sit at +- (s_max / 2) along the longer tangent axis, the split
    axis scale shrinks by SPLIT_SCALE_FACTOR, the other axis and all other
    attributes are inherited. Returns the new cloud and an index map of new
    rows into old rows, -1 for freshly created children.
    """
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    split_idx = np.nonzero(mask)[0]
    kept = cloud.select(keep)
    index_map = list(np.nonzero(keep)[0])
    if split_idx.size == 0:
        return kept, np.asarray(index_map, dtype=np.int64)

    parents = cloud.select(mask)
    u, v, _ = quat_to_frame(parents.quats.astype(np.float64))
    scales = parents.scales.astype(np.float64)
    axis_is_u = scales[:, 0] >= scales[:, 1]
    t_max = np.where(axis_is_u[:, None], u, v)
    s_max = np.where(axis_is_u, scales[:, 0], scales[:, 1])
    offset = (s_max / 2.0)[:, None] * t_max

    child_scales = scales.copy()
    child_scales[axis_is_u, 0] *= SPLIT_SCALE_FACTOR
    child_scales[~axis_is_u, 1] *= SPLIT_SCALE_FACTOR
    child_logs = np.log(child_scales).astype(parents.log_scales.dtype)

    centers64 = parents.centers.astype(np.float64)
    children = []
    for sign in (1.0, -1.0):
        child = parents.copy()
        child.centers = (centers64 + sign * offset).astype(cloud.centers.dtype)
        child.log_scales = child_logs.copy()
        children.append(child)
    out = SurfelCloud.concatenate([kept, children[0], children[1]])
    index_map.extend([-1] * (2 * split_idx.size))
    return out, np.asarray(index_map, dtype=np.int64)


def prune_keep_mask(
    cloud: SurfelCloud,
    stats: DensifyStats,
    outside_mask_votes: np.ndarray | None = None,
    front_votes: np.ndarray | None = None,
) -> tuple[np.ndarray, dict[str, int]]:
    """Keep mask plus counts of removals by reason.

    Removes surfels whose accumulated screen gradient is zero over the whole
    interval (never contributed), whose nearest neighbor sits beyond their
    own kernel support radius (isolated), or which projected outside the
    target mask in every view that saw them (floater).
    """
    n = len(cloud)
    stale = stats.grad_sum <= 0.0

    isolated = np.zeros(n, dtype=bool)
    if n > 1:
        tree = cKDTree(cloud.centers.astype(np.float64))
        d, _ = tree.query(cloud.centers.astype(np.float64), k=2)
        support = R_CUT * cloud.scales.max(axis=1)
        isolated = d[:, 1] > support

    floater = np.zeros(n, dtype=bool)
    if outside_mask_votes is not None and front_votes is not None:
        seen = front_votes > 0
        floater = seen & (outside_mask_votes >= front_votes)

    remove = stale | isolated | floater
    reasons = {
        "stale": int(np.sum(stale)),
        "isolated": int(np.sum(isolated & ~stale)),
        "floater": int(np.sum(floater & ~stale & ~isolated)),
    }
    return ~remove, reasons


def mask_votes(cloud: SurfelCloud, cameras, masks) -> tuple[np.ndarray, np.ndarray]:
    """Per-surfel counts of views where the center lands outside the mask,
    and of views where it sits in front of the camera at all."""
    n = len(cloud)
    outside = np.zeros(n, dtype=np.int64)
    front = np.zeros(n, dtype=np.int64)
    centers_h = np.concatenate(
        [cloud.centers.astype(np.float64), np.ones((n, 1))], axis=1)
    for cam, mask in zip(cameras, masks):
        mask = np.asarray(mask)
        h, w = mask.shape[:2]
        cc = centers_h @ cam.view.T
        vis = -cc[:, 2] > 0.0
        front += vis.astype(np.int64)
        hom = cc @ cam.proj.T
        wclip = hom[:, 3]
        ok = vis & (np.abs(wclip) > 1e-12)
        ndc = np.zeros((n, 2))
        ndc[ok] = hom[ok, :2] / wclip[ok, None]
        fx, fy = cam.ndc_to_pixel(ndc[:, 0], ndc[:, 1])
        px = np.asarray(fx).round().astype(np.int64)
        py = np.asarray(fy).round().astype(np.int64)
        inside = ok & (px >= 0) & (px < w) & (py >= 0) & (py < h)
        hit = np.zeros(n, dtype=bool)
        sel = np.nonzero(inside)[0]
        hit[sel] = mask[py[sel], px[sel]] > 0
        outside += (vis & ~hit).astype(np.int64)
    return outside, front


def refine_topology(
    cloud: SurfelCloud,
    stats: DensifyStats,
    mean_neighbor_dist: np.ndarray,
    max_surfels: int,
    quantile: float = SPLIT_QUANTILE,
    grad_floor: float = SPLIT_GRAD_FLOOR,
    outside_mask_votes: np.ndarray | None = None,
    front_votes: np.ndarray | None = None,
) -> tuple[SurfelCloud, np.ndarray, dict[str, int]]:
    """One prune-then-split pass. Returns (cloud, index map into the input
    cloud with -1 for new rows, log counters)."""
    keep, reasons = prune_keep_mask(cloud, stats, outside_mask_votes, front_votes)
    kept_cloud = cloud.select(keep)
    kept_idx = np.nonzero(keep)[0]

    mean_grad = stats.mean_grad()[keep]
    split_sel = select_split(kept_cloud, mean_grad, mean_neighbor_dist[keep],
                             quantile, grad_floor)
    budget = max_surfels - len(kept_cloud)
    n_split = int(np.sum(split_sel))
    if n_split > budget:
        allowed = max(budget, 0)
        if allowed == 0:
            split_sel[:] = False
        else:
            order = np.argsort(-mean_grad[split_sel])
            chosen = np.nonzero(split_sel)[0][order[:allowed]]
            split_sel = np.zeros(len(kept_cloud), dtype=bool)
            split_sel[chosen] = True
        n_split = allowed
    new_cloud, sub_map = split_cloud(kept_cloud, split_sel)
    index_map = np.where(sub_map >= 0, kept_idx[np.maximum(sub_map, 0)], -1)
    reasons["split"] = n_split
    return new_cloud, index_map.astype(np.int64), reasons
