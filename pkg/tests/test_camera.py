"""Camera conventions: view/projection structure and pixel mapping."""

import numpy as np

from surfsplat.camera import Camera, look_at, orbit_cameras, perspective_matrix

from conftest import random_camera


class TestLookAt:
    def test_eye_maps_to_origin(self, rng):
        for _ in range(16):
            eye = rng.uniform(-5, 5, 3)
            target = rng.uniform(-2, 2, 3)
            if np.linalg.norm(target - eye) < 0.1:
                continue
            view = look_at(eye, target)
            mapped = view @ np.append(eye, 1.0)
            np.testing.assert_allclose(mapped[:3], 0.0, atol=1e-12)

    def test_target_lies_on_negative_z(self, rng):
        eye = np.array([2.0, -3.0, 1.5])
        target = np.array([0.0, 0.5, 0.0])
        view = look_at(eye, target)
        mapped = view @ np.append(target, 1.0)
        assert mapped[2] < 0
        np.testing.assert_allclose(mapped[:2], 0.0, atol=1e-12)

    def test_rotation_is_orthonormal(self):
        view = look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        r = view[:3, :3]
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)

    def test_degenerate_up_recovers(self):
        view = look_at([0.0, 0.0, 5.0], [0.0, 0.0, 0.0], up=(0.0, 0.0, 1.0))
        assert np.isfinite(view).all()


class TestProjection:
    def test_clip_w_equals_view_depth(self, rng):
        proj = perspective_matrix(np.deg2rad(50.0), 1.25)
        pts = rng.uniform(-1, 1, size=(32, 3))
        pts[:, 2] = -rng.uniform(0.5, 20.0, size=32)  # in front of the camera
        hom = np.concatenate([pts, np.ones((32, 1))], axis=1)
        clip = hom @ proj.T
        np.testing.assert_allclose(clip[:, 3], -pts[:, 2], atol=1e-12)

    def test_center_of_view_projects_to_ndc_origin(self):
        cam = random_camera(3)
        clip = cam.proj @ np.array([0.0, 0.0, -2.0, 1.0])
        np.testing.assert_allclose(clip[:2] / clip[3], 0.0, atol=1e-12)


class TestPixelMapping:
    def test_ndc_to_pixel_inverts_pixel_centers(self):
        cam = Camera.perspective(17, 11, 45.0, (0, -4, 0), (0, 0, 0))
        xs, ys = cam.pixel_centers_ndc()
        px, py = cam.ndc_to_pixel(xs, ys[0] * np.ones_like(xs))
        np.testing.assert_allclose(px, np.arange(17), atol=1e-12)
        np.testing.assert_allclose(py, 0.0, atol=1e-12)

    def test_row_zero_is_top(self):
        cam = Camera.perspective(8, 8, 45.0, (0, -4, 0), (0, 0, 0))
        _, ys = cam.pixel_centers_ndc()
        assert ys[0] > ys[-1]

    def test_pixel_rays_pass_through_target(self):
        cam = Camera.perspective(33, 33, 45.0, (0.0, -5.0, 0.0), (0.0, 0.0, 0.0))
        origin, dirs = cam.pixel_rays()
        center_dir = dirs[16, 16]
        expected = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(center_dir, expected, atol=1e-9)
        np.testing.assert_allclose(origin, [0.0, -5.0, 0.0], atol=1e-12)


class TestOrbit:
    def test_orbit_cameras_look_at_center(self):
        center = np.array([0.5, -0.25, 1.0])
        cams = orbit_cameras(8, center, 4.0, 20.0, 32, 32)
        assert len(cams) == 8
        for cam in cams:
            mapped = cam.view @ np.append(center, 1.0)
            np.testing.assert_allclose(mapped[:2], 0.0, atol=1e-9)
            np.testing.assert_allclose(np.linalg.norm(cam.position - center), 4.0)
