import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssattn import raingen as R
from ssattn.errors import ConfigError, ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


def disc_pixel_count(h, w, cx, cy, radius):
    n = 0
    for i in range(h):
        for j in range(w):
            if (j - cx) ** 2 + (i - cy) ** 2 <= radius ** 2:
                n += 1
    return n


class TestConfig:
    def test_mode_normalized_and_validated(self):
        assert R.GenConfig(mode="rs").mode == "RS"
        with pytest.raises(ConfigError):
            R.GenConfig(mode="snow")

    def test_empty_range_rejected(self):
        with pytest.raises(ConfigError):
            R.GenConfig(streak_count=(5, 2))
        with pytest.raises(ConfigError):
            R.GenConfig(noise_amplitude=0.2)

    def test_dict_roundtrip(self):
        cfg = R.GenConfig(mode="RD", size=(32, 40), seed=5)
        assert R.GenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestBackground:
    def test_deterministic_and_in_range(self):
        cfg = R.GenConfig(size=(32, 32))
        a, b = R.gen_background(cfg, rng(3)), R.gen_background(cfg, rng(3))
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_pure_gradient_is_monotone_along_its_axis(self):
        cfg = R.GenConfig(size=(24, 24), shape_count=(0, 0), noise_amplitude=0.0)
        g = rng(4)
        b = R.gen_background(cfg, g)
        # replay the draws to recover the gradient direction
        g = rng(4)
        theta = g.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:24, 0:24]
        order = np.argsort((xx * math.cos(theta) + yy * math.sin(theta)).reshape(-1), kind="stable")
        for c in range(3):
            vals = b[c].reshape(-1)[order]
            d = np.diff(vals)
            assert np.all(d >= -1e-12) or np.all(d <= 1e-12)


class TestStreaks:
    def test_zero_count_gives_zero_map(self):
        s = R.gen_streaks(R.GenConfig(size=(16, 16), streak_count=(0, 0)), rng())
        np.testing.assert_array_equal(s, 0.0)

    @pytest.mark.parametrize("row", [3, 8, 14])
    def test_horizontal_streak_stays_within_one_row(self, row):
        canvas = np.zeros((20, 30))
        R.draw_streak(canvas, 4.0, float(row), 0.0, 15.0, 0.5)
        blurred = R.directional_box_blur(canvas, 0.0, 3)
        rows = np.nonzero(blurred.sum(axis=1))[0]
        assert rows.min() >= row - 1 and rows.max() <= row + 1

    def test_nonnegative_and_deterministic(self):
        cfg = R.GenConfig(size=(32, 32))
        a, b = R.gen_streaks(cfg, rng(5)), R.gen_streaks(cfg, rng(5))
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() > 0.0


class TestDrops:
    def test_zero_count(self):
        cfg = R.GenConfig(size=(16, 16), drop_count=(0, 0))
        m, d = R.gen_drops(cfg, np.full((3, 16, 16), 0.5), rng())
        np.testing.assert_array_equal(m, 0.0)
        np.testing.assert_array_equal(d, 0.0)

    @pytest.mark.parametrize("radius", [2.0, 3.5, 6.0])
    def test_disc_pixel_count(self, radius):
        mask = np.zeros((21, 21))
        R.stamp_ellipse(mask, 10.0, 10.0, radius, radius)
        expected = disc_pixel_count(21, 21, 10.0, 10.0, radius)
        assert mask.sum() == expected
        assert abs(mask.sum() - math.pi * radius ** 2) <= radius + 1e-9 or radius < 3

    def test_layer_zero_off_mask(self):
        cfg = R.GenConfig(size=(32, 32))
        b = R.gen_background(cfg, rng(6))
        m, d = R.gen_drops(cfg, b, rng(7))
        assert set(np.unique(m)) <= {0.0, 1.0} and m.sum() > 0
        assert np.all(d[:, m[0] == 0] == 0.0)


class TestCompose:
    def test_no_rain_returns_background(self):
        b = rng(8).uniform(size=(3, 4, 4))
        z = np.zeros_like(b)
        np.testing.assert_array_equal(R.compose(b, z, np.zeros((1, 4, 4)), z, 0.0).degraded, b)

    def test_full_mask_returns_drop_layer(self):
        b, d = rng(9).uniform(size=(2, 3, 4, 4))
        s = np.full_like(b, 0.3)
        np.testing.assert_array_equal(R.compose(b, s, np.ones((1, 4, 4)), d, 0.7).degraded, 0.7 * d)

    def test_hand_case(self):
        b = np.array([[[0.2, 0.4], [0.6, 0.8]]] * 3)
        s = np.array([[[0.1, 0.0], [0.3, 0.0]]] * 3)
        m = np.array([[[0.0, 1.0], [0.0, 1.0]]])
        d = np.array([[[0.0, 0.9], [0.0, 0.5]]] * 3)
        r = R.compose(b, s, m, d, 0.5).degraded
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    want = (1 - m[0, i, j]) * (b[c, i, j] + s[c, i, j]) + 0.5 * d[c, i, j]
                    assert r[c, i, j] == want

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            R.compose(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), np.zeros((1, 4, 4)), np.zeros((3, 4, 4)), 0.5)


class TestScenes:
    @given(st.integers(0, 10_000), st.sampled_from(R.MODES))
    @settings(max_examples=15, deadline=None)
    def test_imaging_identity_exact(self, seed, mode):
        sc = R.generate_scene(R.GenConfig(mode=mode, size=(32, 32), seed=seed), 0)
        rebuilt = (1 - sc.drop_mask) * (sc.background + sc.streaks) + sc.eta * sc.drop_layer
        assert np.max(np.abs(sc.degraded - rebuilt)) == 0.0

    def test_mode_contracts(self):
        rs = R.generate_scene(R.GenConfig(mode="RS", size=(32, 32)), 1)
        rd = R.generate_scene(R.GenConfig(mode="RD", size=(32, 32)), 1)
        rds = R.generate_scene(R.GenConfig(mode="RDS", size=(32, 32)), 1)
        assert rs.drop_mask.sum() == 0 and rs.streaks.sum() > 0
        assert rd.streaks.sum() == 0 and rd.drop_mask.sum() > 0
        assert rds.streaks.sum() > 0 and rds.drop_mask.sum() > 0

    def test_samples_are_independent_streams(self):
        cfg = R.GenConfig(size=(16, 16))
        a, b = R.generate_scene(cfg, 0), R.generate_scene(cfg, 1)
        assert not np.array_equal(a.background, b.background)
        np.testing.assert_array_equal(a.degraded, R.generate_scene(cfg, 0).degraded)

    def test_degraded_psnr_band(self):
        vals = []
        for seed in range(100):
            sc = R.generate_scene(R.GenConfig(seed=seed), 0)
            mse = np.mean((np.clip(sc.degraded, 0, 1) - sc.background) ** 2)
            vals.append(10 * math.log10(1 / mse))
        assert 12.0 <= np.mean(vals) <= 30.0


class TestFiles:
    def test_dataset_layout_and_roundtrip(self, tmp_path):
        cfg = R.GenConfig(size=(16, 16), seed=2)
        d = R.write_dataset(tmp_path, cfg, 3)
        assert d == tmp_path / "rds"
        assert sorted(p.name for p in d.iterdir()) == [
            "00000_clean.png", "00000_rain.png", "00001_clean.png", "00001_rain.png",
            "00002_clean.png", "00002_rain.png", "manifest.json"]
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 2 and manifest["samples"][1]["seed"] == [2, 1]
        names, rain, clean = R.load_pairs(tmp_path)
        assert names == ["00000", "00001", "00002"] and rain.shape == (3, 3, 16, 16)
        sc = R.generate_scene(cfg, 1)
        np.testing.assert_allclose(clean[1], sc.background, atol=0.5 / 255 + 1e-12)

    def test_zero_count_writes_manifest_only(self, tmp_path):
        d = R.write_dataset(tmp_path, R.GenConfig(size=(16, 16)), 0)
        assert [p.name for p in d.iterdir()] == ["manifest.json"]
