import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sidgan.isp import (
    IspConfig,
    RawFrame,
    apply_gain_and_ev,
    bin2x2,
    denormalize,
    normalize,
    pack_green_average,
    preprocess,
)
from sidgan.tensorio import read_tensor

GOLDEN = Path(__file__).parent / "golden"
FIXTURES = sorted(p.name for p in GOLDEN.iterdir() if p.is_dir())


def load_fixture(name):
    d = GOLDEN / name
    p = json.loads((d / "params.json").read_text())
    raw = RawFrame(read_tensor(d / "mosaic.sgt"), p["cfa"], p["black"], p["white"], p["short"])
    return d, p, raw


def test_five_fixtures_present():
    assert len(FIXTURES) == 5 and "worked_2x2" in FIXTURES


@pytest.mark.parametrize("name", FIXTURES)
def test_golden_bit_exact(name):
    d, p, raw = load_fixture(name)
    packed = pack_green_average(raw)
    assert packed.tobytes() == read_tensor(d / "packed.sgt").tobytes()
    ev = apply_gain_and_ev(packed, p["short"], p["long"], p["gain"])
    assert ev.tobytes() == read_tensor(d / "ev.sgt").tobytes()
    if (d / "binned.sgt").exists():
        assert bin2x2(packed).tobytes() == read_tensor(d / "binned.sgt").tobytes()


def test_worked_block():
    raw = RawFrame(np.array([[100, 80], [90, 60]], np.uint16), "RGGB", 0, 1023)
    out = pack_green_average(raw)
    assert out.shape == (1, 1, 3)
    np.testing.assert_array_equal(out[0, 0], np.float32([100 / 1023, 85 / 1023, 60 / 1023]))


@pytest.mark.parametrize("cfa", ["RGGB", "BGGR", "GRBG", "GBRG"])
def test_black_frame_is_zero(cfa):
    raw = RawFrame(np.full((6, 8), 200, np.uint16), cfa, 200, 1023)
    out = pack_green_average(raw)
    assert out.shape == (3, 4, 3) and not out.any()


@pytest.mark.parametrize("cfa,order", [
    ("RGGB", (10, 20, 30, 40)), ("BGGR", (40, 20, 30, 10)),
    ("GRBG", (20, 10, 40, 30)), ("GBRG", (20, 40, 10, 30)),
])
def test_cfa_positions(cfa, order):
    # block values laid out as [[a, b], [c, d]] = order; R=10, G=20/30, B=40 everywhere
    m = np.array([[order[0], order[1]], [order[2], order[3]]], np.uint16)
    out = pack_green_average(RawFrame(m, cfa, 0, 100))
    np.testing.assert_allclose(out[0, 0], [0.1, 0.25, 0.4], rtol=1e-6)


def test_pack_errors():
    with pytest.raises(ValueError):
        pack_green_average(RawFrame(np.zeros((3, 4), np.uint16)))
    with pytest.raises(ValueError):
        RawFrame(np.zeros((4, 4), np.uint16), "XXXX")
    with pytest.raises(ValueError):
        RawFrame(np.full((4, 4), 2000, np.uint16), white_level=1023)


def test_bin_examples():
    img = np.array([[1, 3], [5, 7]], np.float32)[..., None]
    assert bin2x2(img)[0, 0, 0] == 4.0
    c = np.full((8, 6, 3), 0.37, np.float32)
    np.testing.assert_array_equal(bin2x2(c), np.full((4, 3, 3), 0.37, np.float32))
    with pytest.raises(ValueError):
        bin2x2(np.zeros((3, 4, 3)))


def test_bin_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.random((32, 32, 3)).astype(np.float32)
    ref = np.zeros((16, 16, 3), np.float32)
    for i in range(16):
        for j in range(16):
            for k in range(3):
                ref[i, j, k] = (float(x[2 * i, 2 * j, k]) + float(x[2 * i, 2 * j + 1, k])
                                + float(x[2 * i + 1, 2 * j, k]) + float(x[2 * i + 1, 2 * j + 1, k])) / 4
    np.testing.assert_array_equal(bin2x2(x), ref)


def test_ev_examples():
    assert apply_gain_and_ev(np.float32(0.05), 0.1, 1.0, 1.0) == np.float32(0.5)
    assert apply_gain_and_ev(np.float32(0.2), 0.1, 1.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        apply_gain_and_ev(np.zeros(3), 0.0, 1.0)
    with pytest.raises(ValueError):
        apply_gain_and_ev(np.zeros(3), 0.1, -1.0)


def test_ev_grid_matches_scalar_oracle():
    imgs = np.linspace(0, 1, 11)
    for ratio in (1.0, 2.5, 10.0, 100.0):
        for gain in (0.5, 1.0, 3.0):
            out = apply_gain_and_ev(imgs, 1.0 / ratio, 1.0, gain)
            ref = [np.float32(min(max(v * gain * (1.0 / (1.0 / ratio)), 0.0), 1.0)) for v in imgs]
            np.testing.assert_array_equal(out, ref)


def test_normalize_examples():
    assert normalize(np.float32(0.5)) == 0.0
    np.testing.assert_array_equal(normalize(np.array([0.0, 1.0])), [-1.0, 1.0])
    np.testing.assert_array_equal(normalize(np.array([0.3]), "unit"), np.float32([0.3]))
    with pytest.raises(ValueError):
        normalize(np.array([1.01]))
    with pytest.raises(ValueError):
        normalize(np.array([-0.01]))
    normalize(np.array([1.0 + 5e-7]))  # inside tolerance


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=6), elements=st.floats(0, 1, width=32)))
def test_normalize_roundtrip(x):
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 900), st.integers(1, 100), st.sampled_from(["RGGB", "BGGR", "GRBG", "GBRG"]))
def test_pipeline_monotone(base, delta, cfa):
    rng = np.random.default_rng(base)
    m = rng.integers(0, 1023 - delta, (8, 8)).astype(np.uint16)
    cfg = IspConfig(digital_gain=1.7)
    lo = preprocess(RawFrame(m, cfa, 16, 1023, 0.1), cfg, 1.0)
    hi = preprocess(RawFrame(m + delta, cfa, 16, 1023, 0.1), cfg, 1.0)
    assert lo.shape == (2, 2, 3)
    assert (hi >= lo).all()


def test_pipeline_shapes_and_determinism():
    m = np.random.default_rng(1).integers(0, 1024, (16, 24)).astype(np.uint16)
    raw = RawFrame(m, "BGGR", 64, 1023, 0.04)
    assert pack_green_average(raw).shape == (8, 12, 3)
    a = preprocess(raw, IspConfig(bin=True), 0.4)
    assert a.shape == (4, 6, 3)
    assert a.tobytes() == preprocess(raw, IspConfig(bin=True), 0.4).tobytes()
    assert preprocess(raw, IspConfig(bin=False)).shape == (8, 12, 3)
    assert preprocess(raw, IspConfig(target_range="unit")).min() >= 0
