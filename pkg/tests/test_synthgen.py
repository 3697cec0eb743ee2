import hashlib
import json
import math

import numpy as np
import pytest

from icsinet.errors import ConfigError
from icsinet.metrics import polygon_to_mask
from icsinet.synthgen import SceneConfig, generate_dataset, generate_scene, sample_geometry, scene_rng, split_of


@pytest.fixture(scope="module")
def cfg():
    return SceneConfig(image_size=128, seed=7)


def geometry(cfg, index):
    return sample_geometry(cfg, scene_rng(cfg.seed, index))


def file_hashes(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


class TestScene:
    def test_deterministic(self, cfg):
        a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.masks, b.masks)
        np.testing.assert_array_equal(a.tip, b.tip)
        assert a.id == b.id == "000003"

    def test_indices_and_seeds_differ(self, cfg):
        assert not np.array_equal(generate_scene(cfg, 0).image, generate_scene(cfg, 1).image)
        other = SceneConfig(image_size=128, seed=8)
        assert not np.array_equal(generate_scene(cfg, 0).image, generate_scene(other, 0).image)

    def test_sample_invariants(self, cfg):
        for i in range(10):
            s = generate_scene(cfg, i)
            assert s.image.shape == (128, 128) and s.image.dtype == np.uint8
            assert s.masks.shape == (2, 128, 128)
            assert set(np.unique(s.masks)) <= {0, 1}
            assert 0 <= s.tip[0] <= 127 and 0 <= s.tip[1] <= 127

    @pytest.mark.parametrize("index", range(20))
    def test_oolemma_area_matches_ellipse(self, cfg, index):
        geo = geometry(cfg, index)
        _, _, a, b, _ = geo.ellipse
        area = generate_scene(cfg, index).masks[0].sum()
        assert math.pi * a * b * 0.95 <= area <= math.pi * a * b * 1.05

    @pytest.mark.parametrize("index", range(20))
    def test_tip_pixel_touches_needle(self, cfg, index):
        geo = geometry(cfg, index)
        s = generate_scene(cfg, index)
        tx, ty = geo.needle_tip
        # pixel holding the tip, in plane units (pixel-center tip + 0.5)
        j, i = int(math.floor(s.tip[0] + 0.5)), int(math.floor(s.tip[1] + 0.5))
        px, py = j + 0.5, i + 0.5
        d = math.hypot(px - max(px, tx), py - ty)  # distance to the capsule axis
        assert d - geo.needle_radius < 0.5  # rendered with nonzero coverage
        assert tx >= 128 / 3 - 1e-9

    def test_needle_darkens_image(self, cfg):
        # the needle is the darkest structure; its shaft row is darker than the same row elsewhere
        darker = 0
        for i in range(20):
            s = generate_scene(cfg, i)
            row = int(round(s.tip[1]))
            x0 = int(math.ceil(s.tip[0])) + 2
            shaft = s.image[row, x0:].astype(float)
            if shaft.size < 3:
                continue
            darker += shaft.mean() < s.image.astype(float).mean()
        assert darker >= 15

    def test_tip_inside_and_outside_both_occur(self, cfg):
        inside = [geometry(cfg, i).tip_inside for i in range(40)]
        assert 5 < sum(inside) < 35

    def test_coverage_over_100_samples(self, cfg):
        for i in range(100):
            m = generate_scene(cfg, i).masks.reshape(2, -1).mean(axis=1)
            assert 0.15 <= m[0] <= 0.50, (i, m)
            assert 0.03 <= m[1] <= 0.15, (i, m)

    def test_pipette_enters_from_left_and_touches_ellipse(self, cfg):
        for i in range(10):
            s = generate_scene(cfg, i)
            pip, ool = s.masks[1].astype(bool), s.masks[0].astype(bool)
            assert pip[:, 0].any()
            grown = pip.copy()
            grown[:, 1:] |= pip[:, :-1]
            assert (grown & ool).any() or (pip & ool).any()

    def test_masks_are_polygon_rasters(self, cfg):
        s = generate_scene(cfg, 5)
        for k, name in enumerate(("oolemma", "pipette")):
            np.testing.assert_array_equal(s.masks[k], polygon_to_mask(s.polygons[name], 128))

    def test_clahe_flag(self):
        a = generate_scene(SceneConfig(image_size=64, seed=1), 0)
        b = generate_scene(SceneConfig(image_size=64, seed=1, clahe=True), 0)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert not np.array_equal(a.image, b.image)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            SceneConfig(image_size=8).validate()
        with pytest.raises(ConfigError):
            SceneConfig(background=(100, 50)).validate()


class TestDataset:
    def test_empty(self, tmp_path):
        m = generate_dataset(SceneConfig(image_size=32), 0, tmp_path)
        assert m["count"] == 0 and m["samples"] == []
        assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]

    def test_ten(self, tmp_path):
        m = generate_dataset(SceneConfig(image_size=32, seed=3), 10, tmp_path)
        assert len(list(tmp_path.glob("*.png"))) == 10
        assert len([p for p in tmp_path.glob("*.json") if p.name != "manifest.json"]) == 10
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk["count"] == 10 == m["count"]
        ann = json.loads((tmp_path / "000004.json").read_text())
        assert set(ann) >= {"id", "polygons", "needle_tip"}
        assert set(ann["polygons"]) == {"oolemma", "pipette"}

    def test_regeneration_byte_identical(self, tmp_path):
        cfg = SceneConfig(image_size=32, seed=5)
        generate_dataset(cfg, 6, tmp_path / "a")
        generate_dataset(cfg, 6, tmp_path / "b")
        assert file_hashes(tmp_path / "a") == file_hashes(tmp_path / "b")

    def test_split_proportions(self):
        splits = [split_of(0, i) for i in range(4000)]
        frac = {k: splits.count(k) / len(splits) for k in ("train", "val", "test")}
        assert frac["train"] == pytest.approx(0.80, abs=0.03)
        assert frac["val"] == pytest.approx(0.05, abs=0.015)
        assert frac["test"] == pytest.approx(0.15, abs=0.025)
        assert split_of(0, 17) == split_of(0, 17)
