import math

import numpy as np
import pytest

from gsedit.errors import DimensionMismatch, EmptyRegion
from gsedit.images import ImageBuffer
from gsedit.metrics import INF_DB, dilate, psnr, region_report, ssim


def naive_psnr(a, b, region=None):
    total, count = 0.0, 0
    h, w, _ = a.shape
    for i in range(h):
        for j in range(w):
            if region is not None and not region[i, j]:
                continue
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
                count += 1
    mse = total / count
    return INF_DB if mse == 0 else 10 * math.log10(1 / mse)


def naive_ssim(a, b, region=None):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    lw = np.array([0.299, 0.587, 0.114])
    la, lb = a @ lw, b @ lw
    h, w = la.shape
    vals = []
    for i in range(h - 7):
        for j in range(w - 7):
            if region is not None and not region[i + 3, j + 3]:
                continue
            wa = la[i:i + 8, j:j + 8]
            wb = lb[i:i + 8, j:j + 8]
            mu_a, mu_b = wa.mean(), wb.mean()
            va = (wa ** 2).mean() - mu_a ** 2
            vb = (wb ** 2).mean() - mu_b ** 2
            cov = (wa * wb).mean() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_images_hit_sentinel(self, rng):
        img = rng.uniform(size=(10, 12, 3))
        assert psnr(img, img.copy()) == INF_DB

    def test_constant_offset_closed_form(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 0.5)
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.25))

    def test_matches_naive_loop(self, rng):
        for _ in range(5):
            a = rng.uniform(size=(9, 11, 3))
            b = rng.uniform(size=(9, 11, 3))
            assert psnr(a, b) == pytest.approx(naive_psnr(a, b), abs=1e-9)

    def test_region_matches_naive_loop(self, rng):
        a = rng.uniform(size=(9, 11, 3))
        b = rng.uniform(size=(9, 11, 3))
        region = rng.uniform(size=(9, 11)) > 0.5
        assert psnr(a, b, region) == pytest.approx(naive_psnr(a, b, region), abs=1e-9)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            psnr(rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 5, 3)))

    def test_empty_region(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        with pytest.raises(EmptyRegion):
            psnr(a, a, np.zeros((4, 4), dtype=bool))

    def test_accepts_image_buffers(self, rng):
        a = ImageBuffer.from_array(rng.uniform(size=(5, 5, 3)))
        assert psnr(a, a) == INF_DB


class TestSsim:
    def test_identical_is_one(self, rng):
        img = rng.uniform(size=(12, 12, 3))
        assert ssim(img, img.copy()) == pytest.approx(1.0)

    def test_constant_vs_constant_closed_form(self):
        a = np.full((10, 10, 3), 0.2)
        b = np.full((10, 10, 3), 0.6)
        mu1 = 0.2  # luma weights sum to 1
        mu2 = 0.6
        c1 = 0.01 ** 2
        expected = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-12)

    def test_matches_naive_loop(self, rng):
        for _ in range(3):
            a = rng.uniform(size=(11, 13, 3))
            b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
            assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)

    def test_region_matches_naive_loop(self, rng):
        a = rng.uniform(size=(12, 12, 3))
        b = rng.uniform(size=(12, 12, 3))
        region = np.zeros((12, 12), dtype=bool)
        region[4:9, 3:10] = True
        assert ssim(a, b, region) == pytest.approx(naive_ssim(a, b, region), abs=1e-6)

    def test_too_small_image_rejected(self, rng):
        with pytest.raises(DimensionMismatch):
            ssim(rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3)))

    def test_empty_region(self, rng):
        a = rng.uniform(size=(10, 10, 3))
        region = np.zeros((10, 10), dtype=bool)
        region[0, 0] = True  # never a window center
        with pytest.raises(EmptyRegion):
            ssim(a, a, region)


class TestRegionHelpers:
    def test_dilate_grows_by_radius(self):
        m = np.zeros((9, 9), dtype=bool)
        m[4, 4] = True
        d = dilate(m, 2)
        assert d[2:7, 2:7].all()
        assert d.sum() == 25

    def test_region_report_structure(self, rng):
        a = rng.uniform(size=(12, 12, 3))
        b = np.clip(a + 0.01, 0, 1)
        region = np.zeros((12, 12), dtype=bool)
        region[2:8, 2:8] = True
        rep = region_report(a, b, region)
        assert set(rep) == {"full", "edited", "non_edited"}
        assert rep["edited"]["psnr"] > 0
