"""Losses: SSIM oracle, gradients, consolidation arithmetic, silhouette, NC."""

import numpy as np
import pytest

from surfsplat.knn import NeighborIndex
from surfsplat.losses import (
    SSIM_C1,
    SSIM_C2,
    consolidation_loss,
    normal_consistency_loss,
    photometric_loss,
    silhouette_loss,
    ssim_loss,
    weighted_interlayer_gap,
)
from surfsplat.surfels import SurfelCloud, quat_to_frame


def naive_ssim(img, target, window=11, sigma=1.5):
    """Direct per-pixel windowed statistics with explicit loops and
    zero-padded borders, averaged over the fully covered interior."""
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w, c = x.shape
    m = window // 2
    ax = np.arange(window) - m
    k1 = np.exp(-(ax**2) / (2 * sigma**2))
    k1 /= k1.sum()
    kern = np.outer(k1, k1)
    vals = []
    for iy in range(m, h - m):
        for ix in range(m, w - m):
            for ch in range(c):
                px = x[iy - m:iy + m + 1, ix - m:ix + m + 1, ch]
                py = y[iy - m:iy + m + 1, ix - m:ix + m + 1, ch]
                mx = np.sum(kern * px)
                my = np.sum(kern * py)
                vx = np.sum(kern * px * px) - mx * mx
                vy = np.sum(kern * py * py) - my * my
                cxy = np.sum(kern * px * py) - mx * my
                s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
                     / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
                vals.append(s)
    return 1.0 - float(np.mean(vals))


class TestSSIM:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (15, 17, 3))
        target = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
        loss, _ = ssim_loss(img, target)
        np.testing.assert_allclose(loss, naive_ssim(img, target), rtol=1e-10)

    def test_identical_images_score_zero(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (16, 16))
        loss, grad = ssim_loss(img, img)
        assert loss < 1e-9
        # at the optimum the gradient nearly vanishes
        assert np.abs(grad).max() < 1e-6

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0.2, 0.8, (13, 14))
        target = rng.uniform(0.2, 0.8, (13, 14))
        _, grad = ssim_loss(img, target)
        h = 1e-6
        for _ in range(12):
            iy, ix = rng.integers(0, 13), rng.integers(0, 14)
            p = img.copy(); p[iy, ix] += h
            q = img.copy(); q[iy, ix] -= h
            fd = (ssim_loss(p, target)[0] - ssim_loss(q, target)[0]) / (2 * h)
            np.testing.assert_allclose(grad[iy, ix], fd, rtol=1e-4, atol=1e-9)

    def test_small_images_opt_out(self):
        img = np.ones((8, 8))
        loss, grad = ssim_loss(img, np.zeros((8, 8)))
        assert loss == 0.0
        assert not grad.any()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ssim_loss(np.ones((12, 12)), np.ones((12, 13)))


class TestPhotometric:
    def test_blend_of_l1_and_ssim(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (14, 14, 3))
        target = rng.uniform(0, 1, (14, 14, 3))
        lam = 0.2
        loss, _ = photometric_loss(img, target, lam)
        l1 = np.mean(np.abs(img - target))
        s = ssim_loss(img, target)[0]
        np.testing.assert_allclose(loss, (1 - lam) * l1 + lam * s, rtol=1e-12)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0.1, 0.9, (13, 13))
        target = rng.uniform(0.1, 0.9, (13, 13))
        _, grad = photometric_loss(img, target)
        h = 1e-6
        for _ in range(8):
            iy, ix = rng.integers(0, 13), rng.integers(0, 13)
            p = img.copy(); p[iy, ix] += h
            q = img.copy(); q[iy, ix] -= h
            fd = (photometric_loss(p, target)[0]
                  - photometric_loss(q, target)[0]) / (2 * h)
            np.testing.assert_allclose(grad[iy, ix], fd, rtol=2e-4, atol=1e-9)

    def test_zero_lambda_is_pure_l1(self):
        img = np.full((4, 4), 0.75)
        target = np.full((4, 4), 0.25)
        loss, grad = photometric_loss(img, target, lambda_ssim=0.0)
        np.testing.assert_allclose(loss, 0.5)
        np.testing.assert_allclose(grad, 1.0 / 16)

    def test_small_image_falls_back_to_l1_term(self):
        img = np.full((6, 6), 1.0)
        target = np.zeros((6, 6))
        loss, _ = photometric_loss(img, target, lambda_ssim=0.2)
        np.testing.assert_allclose(loss, 0.8 * 1.0)


class TestSilhouette:
    def test_perfect_overlap_is_zero(self):
        mask = np.zeros((10, 10))
        mask[3:7, 3:7] = 1.0
        loss, _ = silhouette_loss(mask, mask)
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)

    def test_disjoint_is_one(self):
        a = np.zeros((10, 10)); a[0:3] = 1.0
        m = np.zeros((10, 10)); m[7:10] = 1.0
        loss, _ = silhouette_loss(a, m)
        np.testing.assert_allclose(loss, 1.0)

    def test_empty_everything_is_zero_not_nan(self):
        loss, grad = silhouette_loss(np.zeros((5, 5)), np.zeros((5, 5)))
        assert loss == 0.0
        assert not grad.any()

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(6)
        alpha = rng.uniform(0.1, 0.9, (9, 9))
        mask = (rng.uniform(size=(9, 9)) > 0.5).astype(np.float64)
        _, grad = silhouette_loss(alpha, mask)
        h = 1e-7
        for _ in range(8):
            iy, ix = rng.integers(0, 9), rng.integers(0, 9)
            p = alpha.copy(); p[iy, ix] += h
            q = alpha.copy(); q[iy, ix] -= h
            fd = (silhouette_loss(p, mask)[0] - silhouette_loss(q, mask)[0]) / (2 * h)
            np.testing.assert_allclose(grad[iy, ix], fd, rtol=1e-5, atol=1e-10)


def tiny_stacks(w, z):
    """Stacks dict for a single pixel with given per-layer weights and raw
    depth sums (depth_sq chosen for zero variance)."""
    w = np.asarray(w, dtype=np.float64)[None, None]
    z = np.asarray(z, dtype=np.float64)[None, None]
    return {
        "weight_sum": w,
        "color_sum": np.zeros(w.shape + (3,)),
        "depth_sum": w * z,
        "depth_sq_sum": w * z * z,
        "member_count": (w > 0).astype(np.int64),
    }


class TestConsolidation:
    def test_two_layer_hand_computation(self):
        w = [1.0, 2.0]
        z = [3.0, 5.0]
        stacks = tiny_stacks(w, z)
        a = 1.0 - np.exp(-np.asarray(w))
        cw = np.array([a[0], (1 - a[0]) * a[1]])
        expect = cw[0] * cw[1] * abs(z[0] - z[1])  # zero variance by design
        val, grads = consolidation_loss(stacks)
        np.testing.assert_allclose(val, expect, rtol=1e-12)
        # d|z0 - z1|/dz0 = sign(z0 - z1) = -1 for the closer layer
        np.testing.assert_allclose(grads["depth"][0, 0],
                                   [-cw[0] * cw[1], cw[0] * cw[1]], rtol=1e-12)
        np.testing.assert_allclose(grads["weight"][0, 0],
                                   [cw[1] * 2.0, cw[0] * 2.0], rtol=1e-12)

    def test_variance_term(self):
        w = np.array([2.0])
        stacks = tiny_stacks(w, [4.0])
        stacks["depth_sq_sum"] = np.array([[[2.0 * 16.0 + 0.5]]])  # var = 0.25
        val, grads = consolidation_loss(stacks)
        a = 1.0 - np.exp(-2.0)
        np.testing.assert_allclose(val, a * a * 0.25, rtol=1e-12)
        np.testing.assert_allclose(grads["variance"][0, 0], [a * a], rtol=1e-12)

    def test_empty_slots_do_not_contribute(self):
        full = tiny_stacks([1.0, 2.0], [3.0, 5.0])
        padded = tiny_stacks([1.0, 2.0, 0.0, 0.0], [3.0, 5.0, 0.0, 0.0])
        v1, _ = consolidation_loss(full)
        v2, _ = consolidation_loss(padded)
        np.testing.assert_allclose(v1, v2, rtol=1e-12)

    def test_scale_is_linear(self):
        stacks = tiny_stacks([1.0, 2.0], [3.0, 5.0])
        v1, g1 = consolidation_loss(stacks, scale=1.0)
        v3, g3 = consolidation_loss(stacks, scale=3.0)
        np.testing.assert_allclose(v3, 3 * v1, rtol=1e-12)
        np.testing.assert_allclose(g3["weight"], 3 * g1["weight"], rtol=1e-12)

    def test_single_layer_zero_variance_is_zero(self):
        val, _ = consolidation_loss(tiny_stacks([2.0], [4.0]))
        np.testing.assert_allclose(val, 0.0, atol=1e-12)


class TestInterlayerGap:
    def test_hand_computation(self):
        stacks = tiny_stacks([1.0, 2.0], [3.0, 5.0])
        a = 1.0 - np.exp(-np.array([1.0, 2.0]))
        cw = np.array([a[0], (1 - a[0]) * a[1]])
        expect = (cw[0] * cw[1] * 2.0) / (cw[0] * cw[1])
        np.testing.assert_allclose(weighted_interlayer_gap(stacks), expect,
                                   rtol=1e-12)

    def test_single_layer_gives_zero(self):
        assert weighted_interlayer_gap(tiny_stacks([2.0], [4.0])) == 0.0

    def test_gap_shrinks_when_layers_merge(self):
        far = tiny_stacks([1.0, 1.0], [3.0, 6.0])
        near = tiny_stacks([1.0, 1.0], [3.0, 3.5])
        assert weighted_interlayer_gap(near) < weighted_interlayer_gap(far)


def oriented_cloud(centers, normals):
    return SurfelCloud.from_oriented_points(
        np.asarray(centers, dtype=np.float64),
        np.asarray(normals, dtype=np.float64), 0.1, dtype=np.float64)


class TestNormalConsistency:
    def test_aligned_normals_score_zero(self):
        rng = np.random.default_rng(7)
        centers = rng.uniform(-1, 1, (20, 3))
        cloud = oriented_cloud(centers, np.tile([0.0, 0.0, 1.0], (20, 1)))
        index = NeighborIndex(cloud, k=4)
        loss, g = normal_consistency_loss(cloud, index)
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)
        # 1 - n.n is a minimum there: quaternion gradient vanishes
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_two_surfel_hand_computation(self):
        """Mutually visible pair, 45 degrees apart; the orientation filter
        admits them (positive dot) and each side weighs by its own sigma."""
        centers = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]
        normals = [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]
        cloud = oriented_cloud(centers, normals)
        index = NeighborIndex(cloud, k=1)
        loss, _ = normal_consistency_loss(cloud, index)
        ndot = 1.0 / np.sqrt(2.0)
        w = np.exp(-0.25 / (2 * index.mean_dist**2))
        expect = float(np.sum(w * (1 - ndot))) / 2.0
        np.testing.assert_allclose(loss, expect, rtol=1e-9)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(8)
        centers = rng.uniform(-0.5, 0.5, (12, 3))
        normals = rng.normal(size=(12, 3))
        normals[:, 2] = np.abs(normals[:, 2]) + 0.5
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        cloud = oriented_cloud(centers, normals)
        index = NeighborIndex(cloud, k=4)
        _, g = normal_consistency_loss(cloud, index)
        h = 1e-6
        for _ in range(8):
            i, j = rng.integers(0, 12), rng.integers(0, 4)
            cp = cloud.copy(); cp.quats[i, j] += h
            cm = cloud.copy(); cm.quats[i, j] -= h
            fd = (normal_consistency_loss(cp, index)[0]
                  - normal_consistency_loss(cm, index)[0]) / (2 * h)
            np.testing.assert_allclose(g[i, j], fd, rtol=2e-4, atol=1e-10)

    def test_stale_index_size_rejected(self):
        rng = np.random.default_rng(9)
        centers = rng.uniform(-0.5, 0.5, (10, 3))
        cloud = oriented_cloud(centers, np.tile([0.0, 0.0, 1.0], (10, 1)))
        index = NeighborIndex(cloud, k=3)
        shrunk = cloud.select(np.arange(6))
        with pytest.raises(ValueError):
            normal_consistency_loss(shrunk, index)
