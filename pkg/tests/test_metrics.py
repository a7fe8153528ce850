import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidgan import metrics
from sidgan.metrics import (
    REPORT_COLUMNS,
    FeatureExtractor,
    MetricReport,
    PrecomputedFlow,
    fid,
    kid,
    psnr,
    ssim,
    temporal_metrics,
    warp_error,
    zero_flow,
)

from .oracles import fid_eig, kid_three_loop, mse_loop, psnr_loop, ssim_sliding


def test_psnr_examples():
    x = np.full((8, 8, 3), 0.3)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(x, x) == 100.0
    rng = np.random.default_rng(0)
    a, b = rng.random((9, 7, 3)), rng.random((9, 7, 3))
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)
    assert metrics.mse(a, b) == pytest.approx(mse_loop(a, b), abs=1e-12)
    with pytest.raises(ValueError):
        psnr(a, b[:-1])
    with pytest.raises(ValueError):
        psnr(a, b, peak=0)


def test_ssim_identical_and_constant_closed_form():
    rng = np.random.default_rng(1)
    x = rng.random((20, 20, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    c1, c2 = 0.01**2, 0.03**2
    for c, d in [(0.2, 0.1), (0.5, -0.3), (0.0, 0.9)]:
        expected = (2 * c * (c + d) + c1) * c2 / ((c * c + (c + d) ** 2 + c1) * c2)
        got = ssim(np.full((16, 16), c), np.full((16, 16), c + d))
        assert got == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_sliding_window_oracle():
    rng = np.random.default_rng(2)
    x = rng.random((18, 21, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(ssim_sliding(x, y), abs=1e-6)
    g = rng.random((13, 13))
    assert ssim(g, g[::-1]) == pytest.approx(ssim_sliding(g, g[::-1]), abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_temporal_metrics():
    const = np.full((4, 16, 16, 3), 0.4)
    assert temporal_metrics(const) == (100.0, pytest.approx(1.0))
    rng = np.random.default_rng(3)
    clip = rng.random((5, 16, 16, 3))
    two = temporal_metrics(clip[:2])
    assert two[0] == pytest.approx(psnr(clip[1], clip[0])) and two[1] == pytest.approx(ssim(clip[1], clip[0]))
    tp, ts = temporal_metrics(clip)
    assert tp == pytest.approx(np.mean([psnr_loop(clip[t], clip[t - 1]) for t in range(1, 5)]), abs=1e-9)
    assert ts == pytest.approx(np.mean([ssim_sliding(clip[t], clip[t - 1]) for t in range(1, 5)]), abs=1e-6)
    with pytest.raises(ValueError):
        temporal_metrics(clip[:1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    assert psnr(x, y) == psnr(y, x)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


# ---------------------------------------------------------------------------
# FID / KID


def test_fid_identical_sets():
    x = np.random.default_rng(4).normal(size=(30, 5))
    assert abs(fid(x, x)) < 1e-8


def test_fid_commuting_covariances():
    base = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float) * math.sqrt(3 / 4)
    assert np.allclose(np.cov(base, rowvar=False), np.eye(2))
    eps = metrics.FID_EPS
    exact = 2 * (math.sqrt(4 + eps) - math.sqrt(1 + eps)) ** 2
    assert fid(base, 2 * base) == pytest.approx(exact, abs=1e-10)
    assert fid(base, 2 * base) == pytest.approx(2.0, abs=1e-5)


def test_fid_matches_eigendecomposition_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        d = int(rng.integers(1, 6))
        x = rng.normal(size=(int(rng.integers(d + 2, 40)), d)) @ rng.normal(size=(d, d))
        y = rng.normal(1.0, 2.0, size=(int(rng.integers(d + 2, 40)), d))
        assert fid(x, y) == pytest.approx(fid_eig(x, y), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fid_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(25, 4)), rng.normal(0.5, 1.5, size=(25, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert fid(x @ q, y @ q) == pytest.approx(fid(x, y), abs=1e-6)


def test_fid_errors():
    with pytest.raises(ValueError):
        fid(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        fid(np.full((4, 3), np.nan), np.zeros((4, 3)))


def test_kid_hand_example():
    # k = (ab + 1)^3; Kxx off-diagonal 1, Kyy 343, Kxy mean 93/4
    assert kid(np.array([[0.0], [1.0]]), np.array([[2.0], [3.0]])) == pytest.approx(297.5, abs=1e-12)


def test_kid_matches_three_loop_reference():
    rng = np.random.default_rng(6)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        x = rng.normal(size=(int(rng.integers(2, 9)), d))
        y = rng.normal(0.3, 1.2, size=(int(rng.integers(2, 9)), d))
        assert abs(kid(x, y) - kid_three_loop(x, y)) < 1e-9


def test_kid_unbiased():
    rng = np.random.default_rng(7)
    est = []
    for _ in range(400):
        s = rng.normal(size=(16, 3))
        est.append(kid(s[:8], s[8:]))
    est = np.array(est)
    assert abs(est.mean()) < 3 * est.std(ddof=1) / math.sqrt(len(est))


def test_kid_errors():
    with pytest.raises(ValueError):
        kid(np.zeros((1, 2)), np.zeros((3, 2)))


def test_kid_report_scales():
    r = MetricReport("c", "val", 4, kid=0.0399)
    assert r.kid_x100 == pytest.approx(3.99)
    assert r.row()["kid_raw"] == 0.0399


# ---------------------------------------------------------------------------
# warping error


def test_warp_error_static_and_zero_flow():
    rng = np.random.default_rng(8)
    still = np.repeat(rng.random((1, 12, 12, 3)), 4, axis=0)
    assert warp_error(still) == 0.0
    clip = rng.random((4, 12, 12, 3))
    ref = np.mean([mse_loop(clip[t], clip[t - 1]) for t in range(1, 4)])
    assert warp_error(clip, zero_flow) == pytest.approx(ref, abs=1e-12)


def test_warp_error_exact_translation():
    rng = np.random.default_rng(9)
    prev = rng.random((20, 24, 3))
    cur = np.roll(prev, (1, 2), axis=(0, 1))  # cur[y, x] = prev[y - 1, x - 2]
    flow = np.zeros((20, 24, 2))
    flow[..., 0], flow[..., 1] = -2, -1

    def provider(a, b):
        return flow, np.ones((20, 24), bool)

    assert warp_error(np.stack([prev, cur]), provider) < 1e-6
    assert warp_error(np.stack([prev, cur]), PrecomputedFlow(flow[None])) < 1e-6
    assert warp_error(np.stack([prev, cur])) > 0.01


def test_warp_error_errors():
    clip = np.zeros((3, 8, 8, 3))
    with pytest.raises(ValueError):
        warp_error(clip[:1])
    with pytest.raises(ValueError):
        warp_error(clip, lambda a, b: (np.zeros((4, 4, 2)), np.ones((4, 4), bool)))


# ---------------------------------------------------------------------------
# extractor and reports


def test_feature_extractor_deterministic():
    imgs = np.random.default_rng(10).uniform(-1, 1, (5, 16, 16, 3)).astype(np.float32)
    a, b = FeatureExtractor()(imgs), FeatureExtractor()(imgs)
    assert a.shape[0] == 5 and a.shape == b.shape
    np.testing.assert_array_equal(a, b)


def test_report_csv_roundtrip(tmp_path):
    rs = [MetricReport("epoch_3", "val", 20, 28.9, 0.83, 39.3, 0.95, 12.0, 0.05, 2.82e-4),
          MetricReport("epoch_4", "test", 5, psnr=30.0)]
    p = tmp_path / "r.csv"
    metrics.write_reports(p, rs)
    assert p.read_text().splitlines()[0].split(",") == list(REPORT_COLUMNS)
    back = metrics.read_reports(p)
    for a, b in zip(back, rs):
        for k in REPORT_COLUMNS:
            va, vb = a.row()[k], b.row()[k]
            assert va == vb or va == pytest.approx(vb)
    assert back[0].e_warp_x1e5 == pytest.approx(28.2)


def test_report_rejects_nonfinite():
    with pytest.raises(ValueError):
        MetricReport("x", "val", 1, psnr=float("nan"))
