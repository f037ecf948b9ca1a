import hashlib
import math
import pathlib

import numpy as np
import pytest

from satref.errors import FormatError, InvalidArgumentError, NoObservablePixelsError
from satref.raster import (
    Band,
    Image,
    NOT_OBSERVABLE,
    TileGrid,
    downsample,
    downsample_mask_all,
    is_observable,
    psnr,
    read_raster,
    tile_mean_abs_diff,
    write_raster,
)

DATA = pathlib.Path(__file__).parent / "data"


def random_band(rng, h, w, band_id=0):
    return Band(band_id, rng.random((h, w), dtype=np.float32))


# ---------------------------------------------------------------- oracles


def oracle_tile_mean_abs_diff(a, b, grid, valid):
    """Per-pixel loop: row partials left to right, rows top to bottom."""
    out = np.full((grid.rows, grid.cols), NOT_OBSERVABLE)
    for r in range(grid.rows):
        for c in range(grid.cols):
            ys, xs = grid.tile_slices(r, c)
            total = 0.0
            count = 0
            for y in range(ys.start, ys.stop):
                row_sum = 0.0
                for x in range(xs.start, xs.stop):
                    if valid[y, x]:
                        row_sum += abs(float(a.samples[y, x]) - float(b.samples[y, x]))
                        count += 1
                total += row_sum
            if count:
                out[r, c] = total / count
    return out


def oracle_mse(a, b, valid):
    total = 0.0
    n = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if valid[y, x]:
                d = float(a[y, x]) - float(b[y, x])
                total += d * d
                n += 1
    return total / n


# ------------------------------------------------------------- tile grid


def test_tile_grid_counts():
    g = TileGrid(130, 97, 64)
    assert (g.rows, g.cols) == (3, 2)
    assert g.tile_count == 6
    # partial edge tiles are kept, not padded
    assert g.pixel_count(0, 0) == 64 * 64
    assert g.pixel_count(2, 1) == 2 * 33


def test_tiling_partition_property():
    rng = np.random.default_rng(7)
    for _ in range(200):
        h = int(rng.integers(1, 300))
        w = int(rng.integers(1, 300))
        t = int(rng.integers(1, 80))
        g = TileGrid(h, w, t)
        total = sum(g.pixel_count(r, c) for r in range(g.rows) for c in range(g.cols))
        assert total == h * w


# ------------------------------------------------------------ downsample


def test_downsample_constant():
    b = Band(0, np.full((128, 128), 0.3, dtype=np.float32))
    out = downsample(b, 64)
    assert out.samples.shape == (2, 2)
    assert np.all(out.samples == np.float32(0.3))


def test_downsample_factor_one_identity():
    rng = np.random.default_rng(1)
    b = random_band(rng, 33, 17)
    out = downsample(b, 1)
    assert np.array_equal(out.samples, b.samples)


def test_downsample_2x2_mean():
    b = Band(0, np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32))
    out = downsample(b, 2)
    assert out.samples.shape == (1, 1)
    assert out.samples[0, 0] == np.float32(0.5)


def test_downsample_partial_edge_blocks():
    # 3x3 at factor 2: edge blocks average their actual pixels only
    vals = np.arange(9, dtype=np.float32).reshape(3, 3) / 16.0
    out = downsample(Band(0, vals), 2).samples
    assert out.shape == (2, 2)
    assert out[0, 0] == pytest.approx((0 + 1 + 3 + 4) / 4 / 16)
    assert out[0, 1] == pytest.approx((2 + 5) / 2 / 16)
    assert out[1, 0] == pytest.approx((6 + 7) / 2 / 16)
    assert out[1, 1] == pytest.approx(8 / 16)


def test_downsample_output_dims_ceil():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h = int(rng.integers(1, 200))
        w = int(rng.integers(1, 200))
        f = int(rng.integers(1, max(h, w) + 1))
        out = downsample(random_band(rng, h, w), f)
        assert out.samples.shape == (-(-h // f), -(-w // f))
        assert out.samples.min() >= 0.0 and out.samples.max() <= 1.0


def test_downsample_bad_factor():
    b = Band(0, np.zeros((4, 6), dtype=np.float32))
    with pytest.raises(InvalidArgumentError):
        downsample(b, 0)
    with pytest.raises(InvalidArgumentError):
        downsample(b, 7)
    # factor within the larger dimension is allowed
    assert downsample(b, 5).samples.shape == (1, 2)


def test_downsample_commutes_with_constant_shift():
    rng = np.random.default_rng(3)
    b = random_band(rng, 96, 80)
    scaled = Band(0, b.samples * np.float32(0.5))
    shifted = Band(0, scaled.samples + np.float32(0.25))
    lhs = downsample(shifted, 16).samples
    rhs = downsample(scaled, 16).samples + np.float32(0.25)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_downsample_mask_all():
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 1] = False
    out = downsample_mask_all(mask, 2)
    assert out.tolist() == [[False, True], [True, True]]


# --------------------------------------------------- tile_mean_abs_diff


def test_tile_diff_identity():
    rng = np.random.default_rng(4)
    a = random_band(rng, 128, 128)
    g = TileGrid(128, 128, 64)
    out = tile_mean_abs_diff(a, a, g)
    assert np.all(out == 0.0)


def test_tile_diff_single_tile_shift():
    a = Band(0, np.zeros((128, 128), dtype=np.float32))
    b_samples = np.zeros((128, 128), dtype=np.float32)
    b_samples[64:128, 0:64] = np.float32(0.05)
    b = Band(0, b_samples)
    out = tile_mean_abs_diff(a, b, TileGrid(128, 128, 64))
    assert out[1, 0] == float(np.float32(0.05))
    assert out[1, 0] == pytest.approx(0.05, abs=1e-7)
    out[1, 0] = 0.0
    assert np.all(out == 0.0)


def test_tile_diff_not_observable_sentinel():
    a = Band(0, np.zeros((128, 64), dtype=np.float32))
    valid = np.ones((128, 64), dtype=bool)
    valid[0:64, :] = False
    out = tile_mean_abs_diff(a, a, TileGrid(128, 64, 64), valid)
    assert not is_observable(out[0, 0])
    assert is_observable(out[1, 0])
    assert out[1, 0] == 0.0
    # the sentinel is NaN, never comparable equal to zero
    assert not (out[0, 0] == 0.0)


def test_tile_diff_matches_bruteforce_exactly():
    rng = np.random.default_rng(5)
    a = random_band(rng, 128, 128)
    b = random_band(rng, 128, 128)
    valid = np.ones((128, 128), dtype=bool)
    g = TileGrid(128, 128, 64)
    impl = tile_mean_abs_diff(a, b, g, valid)
    want = oracle_tile_mean_abs_diff(a, b, g, valid)
    assert np.array_equal(impl, want)


def test_tile_diff_bruteforce_sweep():
    rng = np.random.default_rng(6)
    for _ in range(8):
        h = int(rng.integers(10, 140))
        w = int(rng.integers(10, 140))
        t = int(rng.integers(3, 70))
        a = random_band(rng, h, w)
        b = random_band(rng, h, w)
        valid = rng.random((h, w)) > 0.3
        g = TileGrid(h, w, t)
        impl = tile_mean_abs_diff(a, b, g, valid)
        want = oracle_tile_mean_abs_diff(a, b, g, valid)
        assert np.array_equal(impl, want, equal_nan=True)


def test_tile_diff_dimension_mismatch():
    a = Band(0, np.zeros((8, 8), dtype=np.float32))
    b = Band(0, np.zeros((8, 9), dtype=np.float32))
    with pytest.raises(InvalidArgumentError):
        tile_mean_abs_diff(a, b, TileGrid(8, 8, 4))


# ------------------------------------------------------------------ psnr


def make_image(rng, h=64, w=64, bands=2, cell=1, t=0.0):
    return Image(cell, t, [random_band(rng, h, w, i) for i in range(bands)])


def test_psnr_identical_is_inf():
    rng = np.random.default_rng(8)
    img = make_image(rng)
    res = psnr(img, img)
    assert res.aggregate == math.inf
    assert all(v == math.inf for v in res.per_band)


def test_psnr_uniform_error():
    a = Image(1, 0.0, [Band(0, np.full((32, 32), 0.5, dtype=np.float32))])
    b = Image(1, 0.0, [Band(0, np.full((32, 32), 0.6, dtype=np.float32))])
    res = psnr(a, b)
    assert res.aggregate == pytest.approx(20.0, rel=1e-6)


def test_psnr_matches_bruteforce():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a = make_image(rng, 48, 40, 3)
        b = make_image(rng, 48, 40, 3)
        valid = rng.random((48, 40)) > 0.25
        res = psnr(a, b, valid)
        per_band = [
            oracle_mse(x.samples, y.samples, valid) for x, y in zip(a.bands, b.bands)
        ]
        for got, mse in zip(res.per_band, per_band):
            assert got == pytest.approx(10 * math.log10(1 / mse), rel=1e-9)
        agg = sum(per_band) / len(per_band)
        assert res.aggregate == pytest.approx(10 * math.log10(1 / agg), rel=1e-9)


def test_psnr_symmetry_and_monotonicity():
    rng = np.random.default_rng(10)
    a = make_image(rng, 32, 32, 1)
    prev = math.inf
    for err in (0.05, 0.1, 0.2, 0.4):
        shifted = Image(
            1, 0.0, [Band(0, np.clip(a.bands[0].samples + np.float32(err), 0, 1))]
        )
        fwd = psnr(a, shifted)
        rev = psnr(shifted, a)
        assert fwd.aggregate == rev.aggregate
        assert fwd.aggregate < prev
        prev = fwd.aggregate


def test_psnr_empty_mask_raises():
    rng = np.random.default_rng(11)
    img = make_image(rng, 16, 16, 1)
    with pytest.raises(NoObservablePixelsError):
        psnr(img, img, np.zeros((16, 16), dtype=bool))


# ------------------------------------------------------------------ ERP1


def test_erp1_round_trip():
    rng = np.random.default_rng(12)
    for _ in range(10):
        h = int(rng.integers(1, 70))
        w = int(rng.integers(1, 70))
        nb = int(rng.integers(1, 5))
        img = make_image(rng, h, w, nb, cell=int(rng.integers(0, 2**40)), t=float(rng.random() * 100))
        path = DATA / "tmp_roundtrip.erp1"
        write_raster(img, path)
        back = read_raster(path)
        assert back.cell_id == img.cell_id
        assert back.captured_at == img.captured_at
        assert back.band_count == img.band_count
        for x, y in zip(img.bands, back.bands):
            assert np.array_equal(x.samples, y.samples)
    path.unlink()


def test_erp1_truncated_rejected(tmp_path):
    rng = np.random.default_rng(13)
    img = make_image(rng, 8, 8, 2)
    path = tmp_path / "x.erp1"
    write_raster(img, path)
    raw = path.read_bytes()
    for cut in (0, 10, len(raw) - 5):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_raster(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        read_raster(path)


def test_erp1_bad_magic_and_range(tmp_path):
    rng = np.random.default_rng(14)
    img = make_image(rng, 4, 4, 1)
    path = tmp_path / "x.erp1"
    write_raster(img, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_raster(path)
    # out-of-range sample
    write_raster(img, path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = np.array([1.5], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_raster(path)


def test_erp1_golden_file():
    golden = DATA / "golden.erp1"
    digest = hashlib.sha256(golden.read_bytes()).hexdigest()
    assert digest == "9235de5b53c2e11f20cc042edcdc9d51e56a53245e7b4eb93127d4a882d7e15b"
    img = read_raster(golden)
    assert (img.height, img.width, img.band_count) == (3, 4, 2)
    assert img.cell_id == 7
    assert img.captured_at == 12.5
    assert img.bands[0].samples[1, 2] == np.float32(6 / 16)
    assert img.bands[1].samples[2, 3] == np.float32((11 % 5) / 8)
