import math

import numpy as np
import pytest
import torch

from app.core.errors import DataError, NumericError, ShapeError
from app.metrics import (
    FeatureFileExtractor,
    FeatureStats,
    RandomProjectionExtractor,
    build_report,
    compare_histograms,
    feature_stats,
    format_report,
    frechet_distance,
    intensity_spread,
    psnr,
    ssim,
)
from app.metrics.quality import SSIM_K1, gaussian_window


def _flatten_extractor(image, image_id=None):
    return image.detach().to(torch.float64).reshape(-1).numpy()


def _ssim_reference(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Direct per-window evaluation."""
    w = gaussian_window(size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    values = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            values.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def test_psnr_identical_images_hit_the_cap():
    img = np.random.default_rng(0).random((8, 8))
    assert psnr(img, img) == 99.0


def test_psnr_constant_offset():
    a = np.full((8, 8), 0.5)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_direct_formula_and_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    expected = 10 * math.log10(1.0 / np.mean((a - b) ** 2))
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)
    assert psnr(a, b) == psnr(b, a)


def test_psnr_accepts_tensors_and_checks_shapes():
    t = torch.zeros(1, 4, 4)
    assert psnr(t, t + 0.5) == pytest.approx(10 * math.log10(4.0))
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def test_ssim_identical_is_one():
    img = np.random.default_rng(2).random((20, 20))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_zero_against_constant_one():
    c1 = (SSIM_K1 * 1.0) ** 2
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), abs=1e-6)


def test_ssim_matches_windowed_reference():
    rng = np.random.default_rng(3)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-6)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    a, b = rng.random((2, 14, 14)), rng.random((2, 14, 14))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_ssim_rejects_images_smaller_than_window():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))


# ---------------------------------------------------------------------------
# Feature statistics and Fréchet distance
# ---------------------------------------------------------------------------

def test_feature_stats_of_identical_images_has_zero_covariance():
    img = torch.rand(1, 2, 2)
    stats = feature_stats([img, img, img], _flatten_extractor)
    np.testing.assert_allclose(stats.cov, 0.0, atol=1e-15)
    np.testing.assert_allclose(stats.mu, img.reshape(-1).double().numpy())


def test_feature_stats_matches_two_pass_covariance():
    images = [torch.rand(1, 2, 2) for _ in range(7)]
    stats = feature_stats(images, _flatten_extractor)
    feats = np.stack([_flatten_extractor(i) for i in images])
    np.testing.assert_allclose(stats.cov, np.cov(feats, rowvar=False), atol=1e-12)
    assert stats.n == 7


def test_feature_stats_of_opposite_pair_has_zero_mean():
    v = torch.rand(1, 2, 2)
    np.testing.assert_allclose(feature_stats([v, -v], _flatten_extractor).mu, 0.0, atol=1e-15)


def test_feature_stats_needs_two_images():
    with pytest.raises(DataError):
        feature_stats([torch.zeros(1, 2, 2)], _flatten_extractor)


def _stats(mu, cov):
    return FeatureStats(mu=np.asarray(mu, dtype=np.float64), cov=np.asarray(cov, dtype=np.float64), n=10)


def test_frechet_of_identical_stats_is_zero():
    a = np.random.default_rng(5).standard_normal((6, 4))
    s = _stats(np.ones(4), a.T @ a)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-8)


def test_frechet_equal_covariances_reduces_to_mean_distance():
    cov = np.diag([1.0, 2.0, 3.0])
    d = frechet_distance(_stats([0, 0, 0], cov), _stats([1, 2, 2], cov))
    assert d == pytest.approx(9.0, abs=1e-9)


def test_frechet_diagonal_closed_form():
    c1, c2 = np.array([1.0, 4.0]), np.array([9.0, 1.0])
    expected = float(np.sum((np.sqrt(c1) - np.sqrt(c2)) ** 2))
    assert frechet_distance(_stats([0, 0], np.diag(c1)), _stats([0, 0], np.diag(c2))) == pytest.approx(expected)


def test_frechet_is_symmetric():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    s1, s2 = _stats(rng.random(3), a.T @ a), _stats(rng.random(3), b.T @ b)
    assert frechet_distance(s1, s2) == pytest.approx(frechet_distance(s2, s1), rel=1e-8)


def test_frechet_validates_inputs():
    with pytest.raises(ShapeError):
        frechet_distance(_stats([0, 0], np.eye(2)), _stats([0, 0, 0], np.eye(3)))
    with pytest.raises(NumericError):
        frechet_distance(_stats([0, 0], np.diag([1.0, -1.0])), _stats([0, 0], np.eye(2)))


def test_random_projection_extractor_is_fixed():
    img = torch.rand(1, 32, 32)
    a, b = RandomProjectionExtractor(seed=0), RandomProjectionExtractor(seed=0)
    fa = a(img)
    assert fa.shape == (64,)
    np.testing.assert_array_equal(fa, b(img))
    assert np.all(np.abs(fa) < 1)
    assert not np.array_equal(fa, RandomProjectionExtractor(seed=1)(img))
    assert "seed=0" in a.name


def test_feature_file_extractor_lookup(tmp_path):
    path = tmp_path / "features.npz"
    np.savez(path, **{"generated/a": np.ones(3), "reference/a": np.zeros(3)})
    ext = FeatureFileExtractor(str(path))
    np.testing.assert_array_equal(ext(torch.zeros(1), "generated/a"), np.ones(3))
    with pytest.raises(DataError):
        ext(torch.zeros(1), "generated/b")
    with pytest.raises(DataError):
        FeatureFileExtractor(str(tmp_path / "missing.npz"))


# ---------------------------------------------------------------------------
# Intensity spread and reports
# ---------------------------------------------------------------------------

def test_intensity_spread_of_constant_images():
    stats = intensity_spread([torch.full((1, 4, 4), 0.3)] * 3)
    assert stats.std_dev == pytest.approx(0.0, abs=1e-12)
    assert stats.iqr == pytest.approx(0.0, abs=1e-12)
    assert sum(stats.histogram) == 48
    assert len(stats.histogram) == 256


def test_intensity_spread_of_uniform_noise():
    rng = np.random.default_rng(7)
    images = [torch.from_numpy(rng.uniform(-1, 1, (1, 64, 64))) for _ in range(4)]
    stats = intensity_spread(images)
    assert stats.std_dev == pytest.approx(1 / math.sqrt(3), abs=0.01)
    assert stats.iqr == pytest.approx(1.0, abs=0.02)


def test_intensity_spread_needs_images():
    with pytest.raises(DataError):
        intensity_spread([])


def test_compare_histograms():
    a = intensity_spread([torch.linspace(-1, 1, 100).reshape(1, 10, 10)])
    b = intensity_spread([torch.linspace(-0.5, 0.5, 100).reshape(1, 10, 10)])
    same = compare_histograms(a, a)
    assert same.intersection == pytest.approx(1.0)
    assert same.contrast_ratio == pytest.approx(1.0)
    narrowed = compare_histograms(b, a)
    assert narrowed.contrast_ratio == pytest.approx(0.5, rel=1e-3)
    assert narrowed.intersection < 1.0


def test_report_of_ground_truth_against_itself():
    rng = np.random.default_rng(8)
    images = [torch.from_numpy(rng.uniform(-1, 1, (1, 16, 16))).float() for _ in range(5)]
    ids = [f"img{i}" for i in range(5)]
    report = build_report(images, images, ids, ["day"] * 5, RandomProjectionExtractor(0), label="gt", seed=1)
    assert report.psnr_mean == 99.0
    assert report.ssim_mean == pytest.approx(1.0, abs=1e-9)
    assert report.fid == pytest.approx(0.0, abs=1e-4)
    assert report.histogram.intersection == pytest.approx(1.0)
    assert [r.id for r in report.records] == ids
    text = format_report(report)
    assert "PSNR" in text and "random-projection" in text


def test_report_of_a_single_image_leaves_fid_undefined():
    image = torch.zeros(1, 16, 16)
    report = build_report([image], [image], ["only"], ["night"], RandomProjectionExtractor(0), label="one")
    assert report.n_images == 1
    assert report.fid is None
    assert report.psnr_mean == 99.0
    assert report.headline()["fid"] is None
    assert "n/a" in format_report(report)
