import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from brushforge.surface_io import (DetrendParams, HeightMap, NormalizeParams, SurfaceFormatError,
                                   detrend, disk_mean_filter, disk_offsets, load_heightmap,
                                   normalize, save_heightmap)


def dense_disk_mean(a, r):
    """Direct O(N r^2) disk mean with in-grid renormalization."""
    h, w = a.shape
    out = np.empty_like(a, dtype=np.float64)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    fp = yy ** 2 + xx ** 2 <= r * r
    for i in range(h):
        for j in range(w):
            y0, y1 = max(0, i - r), min(h, i + r + 1)
            x0, x1 = max(0, j - r), min(w, j + r + 1)
            m = fp[y0 - i + r:y1 - i + r, x0 - j + r:x1 - j + r]
            out[i, j] = a[y0:y1, x0:x1][m].mean()
    return out


def test_topo_constant_4x4(tmp_path):
    p = tmp_path / "c.topo"
    save_heightmap(HeightMap(np.full((4, 4), 10.0), 50.0), p)
    hm = load_heightmap(p)
    assert hm.shape == (4, 4) and hm.pitch_um == 50.0
    assert np.all(hm.heights == 10.0)


def test_topo_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    z = rng.normal(0, 80, (32, 32)).astype(np.float32)
    hm = HeightMap(z, 37.5, {"painting_id": "x1", "note": "a=b"})
    save_heightmap(hm, tmp_path / "r.topo")
    back = load_heightmap(tmp_path / "r.topo")
    assert back.heights.tobytes() == z.tobytes()
    assert back.pitch_um == 37.5 and back.meta == hm.meta


@pytest.mark.parametrize("level,expected", [(0, -200.0), (65535, 300.0)])
def test_png16_endpoints(tmp_path, level, expected):
    from PIL import Image
    p = tmp_path / "e.png"
    Image.fromarray(np.full((3, 3), level, dtype=np.uint16)).save(p)
    (tmp_path / "e.topo.json").write_text(json.dumps(
        {"pitch_um": 50.0, "z_lo_um": -200.0, "z_hi_um": 300.0}))
    assert np.all(load_heightmap(p).heights == expected)


def test_png16_roundtrip_quantization(tmp_path):
    p = tmp_path / "q.png"
    save_heightmap(HeightMap(np.full((5, 6), 50.0)), p, format="png16")
    err = np.abs(load_heightmap(p).heights - 50.0).max()
    assert err <= 0.0077


@given(arrays(np.float32, (7, 9), elements=st.floats(-200, 300, width=32)))
@settings(max_examples=30, deadline=None)
def test_png16_roundtrip_within_one_level(tmp_path_factory, z):
    p = tmp_path_factory.mktemp("png") / "h.png"
    save_heightmap(HeightMap(z), p, format="png16")
    back = load_heightmap(p).heights.astype(np.float64)
    assert np.abs(back - z).max() <= 500.0 / 65535 + 1e-4


def test_save_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        HeightMap(np.array([[0.0, np.nan]]))


def test_truncated_and_unknown_files(tmp_path):
    p = tmp_path / "t.topo"
    save_heightmap(HeightMap(np.zeros((4, 4))), p)
    p.write_bytes(p.read_bytes()[:30])
    with pytest.raises(SurfaceFormatError):
        load_heightmap(p)
    q = tmp_path / "junk.bin"
    q.write_bytes(b"nothing here")
    with pytest.raises(SurfaceFormatError):
        load_heightmap(q)


def test_png16_missing_sidecar(tmp_path):
    p = tmp_path / "m.png"
    save_heightmap(HeightMap(np.zeros((4, 4))), p, format="png16")
    (tmp_path / "m.topo.json").unlink()
    with pytest.raises(SurfaceFormatError):
        load_heightmap(p)


def test_disk_offsets_count():
    r = 5
    n = sum(2 * hw + 1 for _, hw in disk_offsets(r))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    assert n == int((yy ** 2 + xx ** 2 <= r * r).sum())


@pytest.mark.parametrize("r", [1, 3, 6])
def test_disk_mean_matches_dense_oracle(r):
    a = np.random.default_rng(r).normal(size=(17, 23))
    np.testing.assert_allclose(disk_mean_filter(a, r), dense_disk_mean(a, r), atol=1e-12)


def test_detrend_constant_is_zero():
    out = detrend(HeightMap(np.full((40, 50), 123.0)), DetrendParams(7))
    assert np.all(out.heights == 0.0)


def test_detrend_shift_equivariant():
    z = np.random.default_rng(3).normal(0, 50, (48, 40)).astype(np.float32)
    a = detrend(HeightMap(z), DetrendParams(9)).heights
    b = detrend(HeightMap(z + np.float32(1000.0)), DetrendParams(9)).heights
    # equality holds up to the rounding of the shifted float32 input
    np.testing.assert_allclose(a, b, atol=1e-3)


def test_detrend_impulse_closed_form():
    r, hgt = 6, 100.0
    z = np.zeros((41, 41))
    z[20, 20] = hgt
    out = detrend(HeightMap(z), DetrendParams(r)).heights
    ndisk = sum(2 * hw + 1 for _, hw in disk_offsets(r))
    assert out[20, 20] == pytest.approx(hgt * (1 - 1 / ndisk), rel=1e-5)


def test_detrend_removes_bow():
    n, r, amp = 512, 100, 20.0
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    bow = -500.0 * ((x - n / 2) ** 2 + (y - n / 2) ** 2) / (n / 2) ** 2
    sine = amp * np.sin(2 * np.pi * x / 8.0)
    z = bow + sine
    out = detrend(HeightMap(z), DetrendParams(r)).heights.astype(np.float64)
    # dense oracle at scattered pixels, including near the edges
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    fp = yy ** 2 + xx ** 2 <= r * r
    for i, j in [(0, 0), (5, 300), (256, 256), (130, 400), (511, 17), (300, 511)]:
        y0, y1, x0, x1 = max(0, i - r), min(n, i + r + 1), max(0, j - r), min(n, j + r + 1)
        m = fp[y0 - i + r:y1 - i + r, x0 - j + r:x1 - j + r]
        assert out[i, j] == pytest.approx(z[i, j] - z[y0:y1, x0:x1][m].mean(), abs=2e-3)
    # in the interior a paraboloid leaves only a constant, so the texture survives
    inner = (slice(r, n - r), slice(r, n - r))
    resid = out[inner] - sine[inner]
    assert np.abs(resid - resid.mean()).max() <= 0.05 * amp


@pytest.mark.parametrize("z,v", [(-200.0, 0.0), (300.0, 1.0), (50.0, 0.5), (400.0, 1.0),
                                 (-500.0, 0.0)])
def test_normalize_values(z, v):
    assert normalize(np.array([[z]])).values[0, 0] == v


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=50))
def test_normalize_monotone_and_idempotent(zs):
    z = np.sort(np.array(zs))[None, :]
    v = normalize(z).values
    assert np.all(np.diff(v) >= 0)
    again = normalize(v, NormalizeParams(0.0, 1.0)).values
    np.testing.assert_array_equal(again, v)
