import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssattn.errors import ShapeError
from ssattn.metrics import MetricReport, psnr, rgb_to_y, ssim, validate_report


def direct_psnr(a, b):
    total = 0.0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += (x - y) ** 2
    mse = total / a.size
    return 100.0 if mse == 0 else 10 * math.log10(1.0 / mse)


def direct_ssim(a, b):
    """Explicit 11x11 window loop over the valid region with the 2-D Gaussian weights."""
    a, b = a[0], b[0]
    r = np.arange(11) - 5
    g1 = np.exp(-(r ** 2) / (2 * 1.5 ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(win * pa), np.sum(win * pb)
            va = np.sum(win * pa * pa) - ma * ma
            vb = np.sum(win * pb * pb) - mb * mb
            cov = np.sum(win * pa * pb) - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def pairs():
    out = []
    for seed in range(5):
        g = np.random.default_rng(seed)
        a = g.uniform(size=(1, 14 + seed, 17))
        b = np.clip(a + g.normal(0, 0.05 * (seed + 1), size=a.shape), 0, 1)
        out.append((a, b))
    return out


class TestLuma:
    @pytest.mark.parametrize("rgb,y", [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((1, 0, 0), 0.299),
                                       ((0, 1, 0), 0.587), ((0, 0, 1), 0.114)])
    def test_coefficients(self, rgb, y):
        img = np.array(rgb, dtype=float).reshape(3, 1, 1)
        assert rgb_to_y(img)[0, 0, 0] == pytest.approx(y, abs=1e-15)

    def test_batched_shape(self):
        assert rgb_to_y(np.zeros((2, 3, 4, 5))).shape == (2, 1, 4, 5)

    def test_rejects_non_rgb(self):
        with pytest.raises(ShapeError):
            rgb_to_y(np.zeros((2, 4, 4)))


class TestPsnr:
    def test_cap_and_simple_values(self):
        z = np.zeros((1, 4, 4))
        assert psnr(z, z) == 100.0
        assert psnr(z, np.ones_like(z)) == pytest.approx(0.0)
        assert psnr(z, np.full_like(z, 0.1)) == pytest.approx(20.0)

    @pytest.mark.parametrize("k", range(5))
    def test_matches_direct_formula(self, k):
        a, b = pairs()[k]
        assert abs(psnr(a, b) - direct_psnr(a, b)) < 1e-9

    def test_strictly_decreasing_in_noise(self):
        base = np.random.default_rng(0).uniform(size=(1, 16, 16))
        noise = np.random.default_rng(1).normal(size=base.shape)
        vals = [psnr(base, base + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestSsim:
    @pytest.mark.parametrize("k", range(5))
    def test_matches_direct_formula(self, k):
        a, b = pairs()[k]
        assert abs(ssim(a, b) - direct_ssim(a, b)) < 1e-9

    def test_identity(self):
        a = np.random.default_rng(2).uniform(size=(1, 20, 20))
        assert abs(ssim(a, a) - 1.0) <= 1e-12

    def test_constant_images(self):
        a, b = np.zeros((1, 11, 11)), np.ones((1, 11, 11))
        assert ssim(a, b) == pytest.approx(direct_ssim(a, b), abs=1e-15)
        assert ssim(a, b) == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9)

    def test_tiny_noise_near_one(self):
        a = np.random.default_rng(3).uniform(size=(1, 24, 24))
        b = a + np.random.default_rng(4).normal(0, 1e-4, size=a.shape)
        assert ssim(a, b) > 0.999

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_symmetric(self, seed):
        g = np.random.default_rng(seed)
        a, b = g.uniform(size=(2, 1, 12, 13))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((1, 10, 20)), np.zeros((1, 10, 20)))


class TestReport:
    def test_roundtrip_through_schema(self, tmp_path):
        rep = MetricReport()
        g = np.random.default_rng(5)
        for i in range(2):
            clean = g.uniform(size=(3, 16, 16))
            rain = np.clip(clean + 0.2, 0, 1)
            rep.add(f"img{i}", clean, rain, clean)
        d = rep.to_dict()
        validate_report(d)
        again = MetricReport.from_dict(d)
        assert again.to_dict() == d
        assert d["mean"]["psnr_db"] == 100.0
        jpath, cpath = rep.write(tmp_path)
        assert jpath.exists() and cpath.read_text().splitlines()[0].startswith("name,psnr_db")

    def test_schema_rejects_bad_ssim(self):
        bad = {"images": [{"name": "a", "psnr_db": 10.0, "ssim": 2.0, "input_psnr_db": 5.0,
                           "input_ssim": 0.1}],
               "mean": {"psnr_db": 10.0, "ssim": 2.0, "input_psnr_db": 5.0, "input_ssim": 0.1,
                        "psnr_gain_db": 5.0}}
        with pytest.raises(jsonschema.ValidationError):
            validate_report(bad)
