"""Compiled tile rasterizer against the per-pixel reference renderer."""

import numpy as np
import pytest

from surfsplat.camera import Camera
from surfsplat.preprocess import PreprocessOptions, preprocess
from surfsplat.rasterizer import RenderOptions, render
from surfsplat.reference import composite_layers, render_reference
from surfsplat.surfels import SurfelCloud

from conftest import random_camera, random_cloud


def scene(seed, n=40, width=40, height=36, dtype=np.float64):
    cloud = random_cloud(n, seed=seed, dtype=dtype)
    cam = random_camera(seed + 1, width=width, height=height)
    colors = np.random.default_rng(seed + 2).uniform(0, 1, (n, 3))
    return cloud, cam, colors


def reference_for(cloud, cam, colors, options):
    proj = preprocess(cloud, cam, options.preprocess_options())
    ref = render_reference(
        proj, np.asarray(colors, dtype=np.float64)[proj.source_index],
        background=options.background, depth_mode=options.depth_mode,
        k_max=options.k_max, collect_stacks=True)
    return proj, ref


class TestAgainstReference:
    @pytest.mark.parametrize("depth_mode", ["interval", "ternary", "ternary-alpha"])
    @pytest.mark.parametrize("seed", [100, 200])
    def test_images_match(self, depth_mode, seed):
        cloud, cam, colors = scene(seed)
        opt = RenderOptions(depth_mode=depth_mode, dtype=np.float64,
                            background=(0.15, 0.05, 0.25))
        res = render(cloud, cam, opt, colors=colors)
        _, ref = reference_for(cloud, cam, colors, opt)
        np.testing.assert_allclose(res.rgb, ref["rgb"], atol=1e-9)
        np.testing.assert_allclose(res.alpha, ref["alpha"], atol=1e-9)
        np.testing.assert_allclose(res.depth, ref["depth"], atol=1e-9)
        if depth_mode == "interval":
            np.testing.assert_array_equal(res.nlayers, ref["nlayers"])

    def test_images_match_float32(self):
        cloud, cam, colors = scene(300)
        opt = RenderOptions(dtype=np.float32)
        res = render(cloud, cam, opt, colors=colors)
        ref_opt = RenderOptions(dtype=np.float32)
        _, ref = reference_for(cloud, cam, colors, ref_opt)
        np.testing.assert_allclose(res.rgb, ref["rgb"], atol=2e-5)
        np.testing.assert_allclose(res.alpha, ref["alpha"], atol=2e-5)

    def test_mip_off_matches_reference(self):
        cloud, cam, colors = scene(400)
        opt = RenderOptions(dtype=np.float64, mip_enabled=False)
        res = render(cloud, cam, opt, colors=colors)
        _, ref = reference_for(cloud, cam, colors, opt)
        np.testing.assert_allclose(res.rgb, ref["rgb"], atol=1e-9)

    def test_layer_membership_matches_reference(self):
        """Bridge from the stream-level layer test to the compiled kernel:
        per-pixel member counts and layer sums agree with the reference."""
        cloud, cam, colors = scene(500, n=60)
        opt = RenderOptions(dtype=np.float64, collect_stacks=True)
        res = render(cloud, cam, opt, colors=colors)
        _, ref = reference_for(cloud, cam, colors, opt)
        for iy in range(cam.height):
            for ix in range(cam.width):
                stack = ref["stacks"][iy][ix]
                nk = 0 if stack is None else len(stack)
                counts = res.stacks["member_count"][iy, ix]
                weights = res.stacks["weight_sum"][iy, ix]
                assert (counts[nk:] == 0).all()
                if nk == 0:
                    continue
                np.testing.assert_array_equal(counts[:nk], stack.member_count)
                np.testing.assert_allclose(weights[:nk], stack.weight_sum,
                                           rtol=1e-10)
                np.testing.assert_allclose(
                    res.stacks["depth_sum"][iy, ix, :nk], stack.depth_sum,
                    rtol=1e-10)


class TestDeterminism:
    @pytest.mark.parametrize("workers", [2, 8])
    def test_worker_count_does_not_change_bits(self, workers):
        cloud, cam, colors = scene(600, n=80, dtype=np.float32)
        base = render(cloud, cam, RenderOptions(workers=1), colors=colors)
        other = render(cloud, cam, RenderOptions(workers=workers), colors=colors)
        np.testing.assert_array_equal(base.rgb, other.rgb)
        np.testing.assert_array_equal(base.alpha, other.alpha)
        np.testing.assert_array_equal(base.depth, other.depth)
        np.testing.assert_array_equal(base.nlayers, other.nlayers)

    @pytest.mark.parametrize("tile", [8, 32])
    def test_tile_size_does_not_change_bits(self, tile):
        cloud, cam, colors = scene(700, n=80, dtype=np.float32)
        base = render(cloud, cam, RenderOptions(), colors=colors)
        other = render(cloud, cam, RenderOptions(tile=tile), colors=colors)
        np.testing.assert_array_equal(base.rgb, other.rgb)
        np.testing.assert_array_equal(base.alpha, other.alpha)

    def test_repeat_render_is_identical(self):
        cloud, cam, colors = scene(800)
        a = render(cloud, cam, RenderOptions(), colors=colors)
        b = render(cloud, cam, RenderOptions(), colors=colors)
        np.testing.assert_array_equal(a.rgb, b.rgb)


class TestStacks:
    def test_recomposite_reproduces_image(self):
        """Collected per-layer sums must recompose to the rendered image."""
        cloud, cam, colors = scene(900, n=50)
        opt = RenderOptions(dtype=np.float64, collect_stacks=True,
                            background=(0.3, 0.2, 0.1))
        res = render(cloud, cam, opt, colors=colors)
        w = res.stacks["weight_sum"]
        c = res.stacks["color_sum"]
        for iy in range(0, cam.height, 3):
            for ix in range(0, cam.width, 3):
                live = w[iy, ix] > 0
                alphas = 1.0 - np.exp(-w[iy, ix][live])
                cols = c[iy, ix][live] / w[iy, ix][live][:, None]
                rgb, a = composite_layers(alphas, cols, opt.background)
                np.testing.assert_allclose(res.rgb[iy, ix], rgb, atol=1e-9)
                np.testing.assert_allclose(res.alpha[iy, ix], a, atol=1e-9)

    def test_empty_slots_have_zero_weight(self):
        cloud, cam, colors = scene(1000)
        res = render(cloud, cam, RenderOptions(collect_stacks=True), colors=colors)
        w = res.stacks["weight_sum"]
        n = res.nlayers
        k = np.arange(w.shape[2])
        occupied = k[None, None, :] < n[:, :, None]
        assert (w[~occupied] == 0).all()
        assert (w[occupied] > 0).all()


class TestColorSources:
    def test_albedo_fallback(self):
        cloud, cam, _ = scene(1100)
        res = render(cloud, cam, RenderOptions(dtype=np.float64))
        assert res.color_source == "albedo"
        ref = render(cloud, cam, RenderOptions(dtype=np.float64),
                     colors=cloud.albedo)
        np.testing.assert_allclose(res.rgb, ref.rgb, atol=1e-12)

    def test_explicit_colors_win(self):
        cloud, cam, colors = scene(1200)
        from surfsplat.shading import EnvironmentLight
        env = EnvironmentLight.uniform(0.5)
        res = render(cloud, cam, RenderOptions(), env=env, colors=colors)
        assert res.color_source == "explicit"

    def test_ibl_shading_source(self):
        cloud, cam, _ = scene(1300)
        from surfsplat.shading import EnvironmentLight
        env = EnvironmentLight.uniform(0.5)
        res = render(cloud, cam, RenderOptions(), env=env)
        assert res.color_source == "ibl"
        assert res.shading_ctx is not None

    def test_nonfinite_colors_rejected(self):
        cloud, cam, colors = scene(1400)
        colors[3, 1] = np.nan
        with pytest.raises(ValueError):
            render(cloud, cam, RenderOptions(), colors=colors)


class TestEdges:
    def test_all_culled_gives_background(self):
        cloud = SurfelCloud.from_oriented_points(
            np.array([[0.0, -10.0, 0.0]]), np.array([[0.0, -1.0, 0.0]]), 0.3)
        cam = Camera.perspective(16, 16, 45.0, (0.0, -3.0, 0.0), (0.0, 0.0, 0.0))
        opt = RenderOptions(background=(0.4, 0.5, 0.6))
        res = render(cloud, cam, opt)
        assert (res.alpha == 0).all()
        assert (res.nlayers == 0).all()
        np.testing.assert_allclose(
            res.rgb, np.broadcast_to(np.float32(opt.background), res.rgb.shape))

    def test_k_max_stop_matches_reference(self):
        """More stacked groups than k_max on one ray: both renderers must cut
        off at the same layer."""
        n = 24
        centers = np.zeros((n, 3))
        centers[:, 1] = np.arange(n) * 0.8
        normals = np.tile([0.0, -1.0, 0.0], (n, 1))
        cloud = SurfelCloud.from_oriented_points(centers, normals, 0.5)
        cam = Camera.perspective(33, 33, 45.0, (0.0, -5.0, 0.0), (0.0, 0.0, 0.0))
        colors = np.random.default_rng(5).uniform(0, 1, (n, 3))
        opt = RenderOptions(dtype=np.float64)
        res = render(cloud, cam, opt, colors=colors)
        _, ref = reference_for(cloud, cam, colors, opt)
        assert res.nlayers[16, 16] == opt.k_max
        np.testing.assert_array_equal(res.nlayers, ref["nlayers"])
        np.testing.assert_allclose(res.rgb, ref["rgb"], atol=1e-9)

    def test_cover_counts(self):
        """Optional per-record pixel tallies match a manual count of pixels
        where the record's kernel is inside the cutoff."""
        cloud, cam, colors = scene(1500, n=12, width=24, height=24)
        opt = RenderOptions(dtype=np.float64, with_cover_counts=True)
        res = render(cloud, cam, opt, colors=colors)
        proj = res.proj
        xs = (np.arange(cam.width) + 0.5) * 2.0 / cam.width - 1.0
        ys = 1.0 - (np.arange(cam.height) + 0.5) * 2.0 / cam.height
        gx, gy = np.meshgrid(xs, ys)
        r = proj.rect
        for k in range(len(proj)):
            kvec = gx.ravel()[:, None] * proj.t4[k] - proj.t1[k]
            lvec = gy.ravel()[:, None] * proj.t4[k] - proj.t2[k]
            p = np.cross(kvec, lvec)
            hit = np.abs(p[:, 2]) >= 1e-9
            u = p[:, 0] / np.where(hit, p[:, 2], 1.0)
            v = p[:, 1] / np.where(hit, p[:, 2], 1.0)
            s = proj.sinv[k]
            rho2 = s[0] * u * u + 2.0 * s[1] * u * v + s[2] * v * v
            px, py = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
            in_rect = ((r[k, 0] <= px.ravel()) & (px.ravel() < r[k, 2])
                       & (r[k, 1] <= py.ravel()) & (py.ravel() < r[k, 3]))
            manual = int(np.sum(hit & in_rect & (rho2 < proj.options.r_cut ** 2)))
            assert res.cover_counts[proj.source_index[k]] == manual, k
