"""Tests for the finite-difference gradient checker, including a negative
control: a deliberately corrupted backward pass must be flagged."""

import json

import numpy as np

import surfsplat.gradcheck as gradcheck
from surfsplat.gradcheck import format_report, make_scene, run_gradcheck


class TestMakeScene:
    def test_scenes_are_seeded(self):
        a = make_scene(3, 32, 32)
        b = make_scene(3, 32, 32)
        np.testing.assert_array_equal(a[0].centers, b[0].centers)
        np.testing.assert_array_equal(a[4], b[4])

    def test_scene_parity_alternates_shading(self):
        assert make_scene(0, 16, 16)[2] is not None
        assert make_scene(1, 16, 16)[2] is None

    def test_mip_toggles_across_scenes(self):
        flags = {make_scene(i, 16, 16)[3].mip_enabled for i in range(3)}
        assert flags == {True, False}


class TestRunGradcheck:
    def test_small_sweep_passes(self, tmp_path):
        path = tmp_path / "report.json"
        report = run_gradcheck(n_scenes=2, seed=0, width=32, height=32,
                               json_path=path)
        assert report["ok"]
        assert report["failed"] == 0
        assert report["checked"] > 20
        assert report["unstable_frac"] <= report["max_unstable_frac"]
        assert set(report["per_class"]) >= {"centers", "quats", "albedo_raw"}
        on_disk = json.loads(path.read_text())
        assert on_disk["checked"] == report["checked"]
        text = format_report(report)
        assert text.endswith("OK")
        assert "centers" in text

    def test_corrupted_backward_is_flagged(self, monkeypatch):
        real = gradcheck.backward_image

        def corrupted(*args, **kwargs):
            grads = real(*args, **kwargs)
            grads.centers = grads.centers + 0.5
            grads.albedo_raw = grads.albedo_raw * 1.05
            return grads

        monkeypatch.setattr(gradcheck, "backward_image", corrupted)
        report = run_gradcheck(n_scenes=1, seed=0, width=32, height=32)
        assert not report["ok"]
        assert report["failed"] > 0
        assert any(rec["param"] == "centers" for rec in report["failures"])
        assert format_report(report).endswith("FAILED")
