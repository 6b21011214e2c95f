import numpy as np
import pytest

from anchorsplat.datasets import (
    DatasetError,
    load_dataset,
    read_float_map,
    read_png,
    read_ppm,
    train_test_split,
    write_dataset,
    write_float_map,
    write_png,
    write_ppm,
)
from anchorsplat.scenes import SCENES, canonical_rig, raytrace_views, scene_sdf


class TestFloatMap:
    def test_round_trip_2d(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((7, 5)).astype(np.float32)
        p = tmp_path / "m.f32"
        write_float_map(p, arr)
        back = read_float_map(p)
        np.testing.assert_array_equal(back, arr)

    def test_round_trip_3ch(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.standard_normal((4, 6, 3)).astype(np.float32)
        p = tmp_path / "m.f32"
        write_float_map(p, arr)
        np.testing.assert_array_equal(read_float_map(p), arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.f32"
        p.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(DatasetError, match="magic"):
            read_float_map(p)

    def test_truncation_detected_with_offset(self, tmp_path):
        rng = np.random.default_rng(2)
        p = tmp_path / "m.f32"
        write_float_map(p, rng.standard_normal((8, 8)).astype(np.float32))
        data = p.read_bytes()
        p.write_bytes(data[:-7])
        with pytest.raises(DatasetError, match="offset"):
            read_float_map(p)


class TestImages:
    def test_png_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(3)
        img = rng.random((9, 11, 3))
        p = tmp_path / "i.png"
        write_png(p, img)
        back = read_png(p)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = np.round(rng.random((5, 7, 3)) * 255) / 255
        p = tmp_path / "i.ppm"
        write_ppm(p, img)
        np.testing.assert_allclose(read_ppm(p), img, atol=1e-9)

    def test_ppm_truncated(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n4 4\n255\n\x00\x01")
        with pytest.raises(DatasetError):
            read_ppm(p)


class TestDatasetRoundTrip:
    def test_write_load(self, tmp_path):
        scene = SCENES["sphere"]()
        views = canonical_rig("sphere", 4, 32, 32)
        raytrace_views(scene, views)
        out = write_dataset(tmp_path / "ds", scene, views, scene_name="sphere")
        scene2, views2, manifest = load_dataset(out)
        assert manifest["scene_name"] == "sphere"
        assert len(views2) == 4
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, (50, 3))
        np.testing.assert_allclose(scene_sdf(scene2, pts), scene_sdf(scene, pts))
        v0, v0b = views[0], views2[0]
        np.testing.assert_allclose(v0b.R, v0.R)
        np.testing.assert_allclose(v0b.gt_depth, v0.gt_depth, atol=1e-6)
        np.testing.assert_allclose(v0b.gt_normal, v0.gt_normal, atol=1e-6)
        assert np.max(np.abs(v0b.gt_color - v0.gt_color)) <= 0.5 / 255 + 1e-9

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_split(self):
        train, test = train_test_split(24)
        assert test == [0, 8, 16]
        assert len(train) == 21
        assert set(train) | set(test) == set(range(24))
