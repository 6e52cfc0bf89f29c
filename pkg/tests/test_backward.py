"""Backward pass: shapes, linearity, determinism, finite-difference spots."""

import numpy as np
import pytest

from surfsplat.backward import backward_image
from surfsplat.fixtures import determinism_fixtures
from surfsplat.rasterizer import RenderOptions, render
from surfsplat.shading import EnvironmentLight

from conftest import random_camera, random_cloud


def small_scene(seed=50, n=30, size=28, shaded=False):
    cloud = random_cloud(n, seed=seed, dtype=np.float64)
    cam = random_camera(seed + 1, width=size, height=size)
    opt = RenderOptions(dtype=np.float64)
    env = EnvironmentLight.uniform(0.6) if shaded else None
    colors = None if shaded else np.random.default_rng(seed + 2).uniform(0, 1, (n, 3))
    res = render(cloud, cam, opt, env=env, colors=colors)
    rng = np.random.default_rng(seed + 3)
    g_rgb = rng.normal(size=res.rgb.shape)
    g_alpha = rng.normal(size=res.alpha.shape)
    return cloud, res, g_rgb, g_alpha


class TestShapes:
    def test_all_parameter_grads_present(self):
        cloud, res, g_rgb, g_alpha = small_scene(shaded=True)
        back = backward_image(cloud, res, g_rgb, g_alpha)
        n = len(cloud)
        assert back.centers.shape == (n, 3)
        assert back.quats.shape == (n, 4)
        assert back.log_scales.shape == (n, 2)
        assert back.albedo_raw.shape == (n, 3)
        assert back.metallic_raw.shape == (n,)
        assert back.roughness_raw.shape == (n,)
        assert back.env_base_log is not None
        assert back.ss_grad.shape == (n,)
        for arr in (back.centers, back.quats, back.log_scales, back.albedo_raw):
            assert arr.dtype == np.float64
            assert np.isfinite(arr).all()

    def test_no_env_means_no_env_grad(self):
        cloud, res, g_rgb, g_alpha = small_scene(shaded=False)
        back = backward_image(cloud, res, g_rgb, g_alpha)
        assert back.env_base_log is None

    def test_ternary_mode_rejected(self):
        cloud = random_cloud(10, seed=60, dtype=np.float64)
        cam = random_camera(61)
        res = render(cloud, cam, RenderOptions(depth_mode="ternary", dtype=np.float64))
        with pytest.raises(ValueError):
            backward_image(cloud, res, np.zeros(res.rgb.shape), None)


class TestLinearity:
    def test_zero_upstream_gives_zero_grads(self):
        cloud, res, _, _ = small_scene(shaded=True)
        back = backward_image(cloud, res)
        assert not back.centers.any()
        assert not back.quats.any()
        assert not back.albedo_raw.any()
        assert not back.env_base_log.any()

    def test_adjoint_is_linear_in_upstream(self):
        cloud, res, g_rgb, g_alpha = small_scene(shaded=True)
        one = backward_image(cloud, res, g_rgb, g_alpha)
        two = backward_image(cloud, res, 2.0 * g_rgb, 2.0 * g_alpha)
        np.testing.assert_allclose(two.centers, 2.0 * one.centers, rtol=1e-12)
        np.testing.assert_allclose(two.quats, 2.0 * one.quats, rtol=1e-12)
        np.testing.assert_allclose(two.env_base_log, 2.0 * one.env_base_log,
                                   rtol=1e-12)

    def test_consolidation_does_not_touch_color_grads(self):
        """The overlap penalty acts on weights and depths only, so switching
        it on must leave material/color gradients of the image loss alone."""
        cloud, res, g_rgb, g_alpha = small_scene(shaded=False)
        off = backward_image(cloud, res, g_rgb, g_alpha, cons_scale=0.0)
        on = backward_image(cloud, res, g_rgb, g_alpha, cons_scale=0.5)
        assert on.cons_loss > 0.0
        np.testing.assert_allclose(on.albedo_raw, off.albedo_raw, atol=1e-14)
        np.testing.assert_allclose(on.colors, off.colors, atol=1e-14)
        assert not np.allclose(on.centers, off.centers)

    def test_cons_loss_scales_linearly(self):
        cloud, res, _, _ = small_scene(shaded=False)
        a = backward_image(cloud, res, cons_scale=1.0)
        b = backward_image(cloud, res, cons_scale=2.0)
        np.testing.assert_allclose(b.cons_loss, 2.0 * a.cons_loss, rtol=1e-12)
        np.testing.assert_allclose(b.centers, 2.0 * a.centers, rtol=1e-10)


class TestExplicitColors:
    def test_color_grad_is_exact_for_explicit_path(self):
        """d rgb / d colors is linear; compare against a finite difference
        that is exact up to rounding."""
        cloud, res, g_rgb, _ = small_scene(seed=70, shaded=False)
        back = backward_image(cloud, res, g_rgb, None)
        cam = res.camera
        colors = res.colors.copy()
        i = int(np.flatnonzero(back.touched)[0])
        h = 0.25
        for ch in range(3):
            cp = colors.copy()
            cp[i, ch] += h
            rp = render(cloud, cam, res.options, colors=cp)
            cm = colors.copy()
            cm[i, ch] -= h
            rm = render(cloud, cam, res.options, colors=cm)
            fd = np.sum((rp.rgb - rm.rgb) / (2 * h) * g_rgb)
            np.testing.assert_allclose(back.colors[i, ch], fd, rtol=1e-7,
                                       atol=1e-10)


class TestDeterminism:
    @pytest.mark.parametrize("name", ["grid", "two_spheres", "shaded_sphere"])
    def test_workers_do_not_change_backward_bits(self, name):
        import dataclasses

        cloud, cam, options, env = determinism_fixtures()[name]
        g_rgb = np.random.default_rng(17).standard_normal(
            (cam.height, cam.width, 3))
        outs = []
        for workers in (1, 3):
            opt = dataclasses.replace(options, workers=workers)
            res = render(cloud, cam, opt, env=env)
            back = backward_image(cloud, res, g_rgb, None, cons_scale=0.1)
            outs.append((res, back))
        res1, back1 = outs[0]
        res2, back2 = outs[1]
        np.testing.assert_array_equal(res1.rgb, res2.rgb)
        np.testing.assert_array_equal(back1.centers, back2.centers)
        np.testing.assert_array_equal(back1.quats, back2.quats)
        np.testing.assert_array_equal(back1.log_scales, back2.log_scales)
        np.testing.assert_array_equal(back1.ss_grad, back2.ss_grad)
        np.testing.assert_array_equal(back1.albedo_raw, back2.albedo_raw)
        if back1.env_base_log is not None:
            np.testing.assert_array_equal(back1.env_base_log, back2.env_base_log)
        assert back1.cons_loss == back2.cons_loss


class TestFiniteDifferenceSpots:
    def test_center_gradient_spot_check(self):
        """One scalar probe per axis on one surfel; the full sweep lives in
        the gradient checker."""
        cloud, res, g_rgb, g_alpha = small_scene(seed=80, n=20, shaded=False)
        back = backward_image(cloud, res, g_rgb, g_alpha)
        cam = res.camera
        i = int(np.argmax(np.abs(back.centers).sum(axis=1)))
        for ax in range(3):
            h = 1e-5
            analytic = back.centers[i, ax]

            def loss_at(delta):
                c2 = cloud.copy()
                c2.centers[i, ax] += delta
                r = render(c2, cam, res.options, colors=res.colors)
                return float(np.sum(r.rgb * g_rgb) + np.sum(r.alpha * g_alpha))

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            np.testing.assert_allclose(analytic, fd, rtol=2e-4, atol=1e-6)
