"""Core raster types, tiling, downsampling, and image-quality math.

Samples are unit-interval reals stored at 32-bit precision; every
accumulation (block means, tile sums, MSE) runs in 64-bit. Tiles are
``tile_size`` px squares with partial tiles kept at the right/bottom
edges. The module also owns the ERP1 raster file format.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgumentError, NoObservablePixelsError

TILE_SIZE_DEFAULT = 64

# Sentinel for per-tile statistics over zero valid pixels. NaN rather than
# 0.0 so an unobservable tile can never masquerade as "no difference".
NOT_OBSERVABLE = float("nan")

# Reporting cap for infinite PSNR (lossless tiles) so CSV stays numeric.
PSNR_CAP_DB = 99.0

ERP1_MAGIC = b"ERP1"
_ERP1_HEADER = struct.Struct("<4sIIIQd")


def is_observable(values) -> np.ndarray:
    """True where a per-tile statistic is real data, not the sentinel."""
    return ~np.isnan(values)


@dataclass
class Band:
    """One spectral band: a row-major grid of unit-interval samples."""

    band_id: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise InvalidArgumentError("band samples must be a 2-D grid")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass
class Image:
    """Multi-band capture of one geographic cell at one instant."""

    cell_id: int
    captured_at: float
    bands: list[Band] = field(default_factory=list)

    def __post_init__(self):
        if not self.bands:
            raise InvalidArgumentError("image needs at least one band")
        if self.captured_at < 0:
            raise InvalidArgumentError("captured_at must be >= 0 days")
        h, w = self.bands[0].samples.shape
        for i, band in enumerate(self.bands):
            if band.samples.shape != (h, w):
                raise InvalidArgumentError("bands must share dimensions")
            if band.band_id != i:
                raise InvalidArgumentError("band ids must run 0..B-1 in order")

    @property
    def height(self) -> int:
        return self.bands[0].height

    @property
    def width(self) -> int:
        return self.bands[0].width

    @property
    def band_count(self) -> int:
        return len(self.bands)

    def validate_range(self) -> None:
        for band in self.bands:
            s = band.samples
            if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
                raise InvalidArgumentError(
                    f"band {band.band_id} has samples outside [0, 1]"
                )


# A PixelMask is a plain boolean ndarray aligned to one image's H x W grid.
PixelMask = np.ndarray


@dataclass(frozen=True)
class TileGrid:
    """Tiling of an H x W raster into tile_size px squares.

    Partial tiles at the right/bottom edges are kept as smaller tiles, so
    every pixel belongs to exactly one tile.
    """

    height: int
    width: int
    tile_size: int = TILE_SIZE_DEFAULT

    def __post_init__(self):
        if self.tile_size < 1 or self.height < 1 or self.width < 1:
            raise InvalidArgumentError("tile grid dimensions must be positive")

    @property
    def rows(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def cols(self) -> int:
        return -(-self.width // self.tile_size)

    @property
    def tile_count(self) -> int:
        return self.rows * self.cols

    def tile_slices(self, row: int, col: int) -> tuple[slice, slice]:
        t = self.tile_size
        return (
            slice(row * t, min((row + 1) * t, self.height)),
            slice(col * t, min((col + 1) * t, self.width)),
        )

    def pixel_count(self, row: int, col: int) -> int:
        ys, xs = self.tile_slices(row, col)
        return (ys.stop - ys.start) * (xs.stop - xs.start)

    def tile_index(self, row: int, col: int) -> int:
        return row * self.cols + col


def downsample(band: Band, factor: int) -> Band:
    """Block-area-mean downsample to ceil(H/f) x ceil(W/f).

    Partial edge blocks average over their actual pixels. Accumulation is
    64-bit; the result is cast back to 32-bit storage.
    """
    h, w = band.samples.shape
    if factor < 1 or (factor > h and factor > w):
        raise InvalidArgumentError(f"downsample factor {factor} out of range for {h}x{w}")
    if factor == 1:
        return Band(band.band_id, band.samples.copy())
    sums = _block_sums(band.samples.astype(np.float64), factor)
    counts = _block_counts(h, w, factor)
    return Band(band.band_id, (sums / counts).astype(np.float32))


@functools.lru_cache(maxsize=256)
def _block_weights(length: int, factor: int) -> np.ndarray:
    starts = np.arange(0, length, factor)
    weights = np.zeros((starts.size, length))
    for row, start in enumerate(starts):
        weights[row, start : start + factor] = 1.0
    return weights


def _block_sums(a: np.ndarray, factor: int) -> np.ndarray:
    # two thin matrix products against 0/1 block-membership weights; BLAS
    # handles these far faster than a reduceat pass over the same data
    h, w = a.shape
    return _block_weights(h, factor) @ a @ _block_weights(w, factor).T


def _block_counts(h: int, w: int, factor: int) -> np.ndarray:
    rows = np.diff(np.append(np.arange(0, h, factor), h))
    cols = np.diff(np.append(np.arange(0, w, factor), w))
    return np.outer(rows, cols).astype(np.float64)


def downsample_mask_all(mask: PixelMask, factor: int) -> np.ndarray:
    """Per-block AND of a boolean mask: True only for fully-True blocks."""
    h, w = mask.shape
    if factor < 1 or (factor > h and factor > w):
        raise InvalidArgumentError(f"downsample factor {factor} out of range for {h}x{w}")
    trues = _block_sums(mask.astype(np.float64), factor)
    return trues == _block_counts(h, w, factor)


def tile_mean_abs_diff(
    a: Band, b: Band, grid: TileGrid, valid: PixelMask | None = None
) -> np.ndarray:
    """Per-tile mean of |a - b| over valid pixels.

    Returns a (rows, cols) float64 grid; tiles with zero valid pixels hold
    the NOT_OBSERVABLE sentinel. The per-tile sum is accumulated in a fixed
    order (each pixel row left to right, row partials top to bottom) so the
    result is reproducible bit-for-bit against a per-pixel loop.
    """
    if a.samples.shape != b.samples.shape:
        raise InvalidArgumentError("band dimensions differ")
    if grid.height != a.height or grid.width != a.width:
        raise InvalidArgumentError("tile grid does not match band dimensions")
    if valid is None:
        valid = np.ones(a.samples.shape, dtype=bool)
    elif valid.shape != a.samples.shape:
        raise InvalidArgumentError("valid mask does not match band dimensions")

    # Widen before subtracting: float64 difference of float32 inputs is exact.
    diff = np.abs(a.samples.astype(np.float64) - b.samples.astype(np.float64))
    diff[~valid] = 0.0

    t = grid.tile_size
    rows, cols = grid.rows, grid.cols
    pad = np.zeros((rows * t, cols * t))
    pad[: grid.height, : grid.width] = diff

    # Left-to-right within each pixel row, then top-to-bottom row partials.
    by_col = pad.reshape(rows * t, cols, t)
    row_partial = np.zeros((rows * t, cols))
    for j in range(t):
        row_partial += by_col[:, :, j]
    by_row = row_partial.reshape(rows, t, cols)
    sums = np.zeros((rows, cols))
    for i in range(t):
        sums += by_row[:, i, :]

    padc = np.zeros((rows * t, cols * t))
    padc[: grid.height, : grid.width] = valid
    counts = _block_sums(padc, t)

    out = np.full((rows, cols), NOT_OBSERVABLE)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


@dataclass(frozen=True)
class PsnrResult:
    per_band: list[float]
    aggregate: float


def psnr(original: Image, reconstructed: Image, valid: PixelMask | None = None) -> PsnrResult:
    """PSNR in dB per band plus pooled aggregate, MAX = 1.0.

    Computed over valid pixels only; zero MSE yields +inf (callers cap at
    PSNR_CAP_DB when writing CSV).
    """
    if (original.height, original.width, original.band_count) != (
        reconstructed.height,
        reconstructed.width,
        reconstructed.band_count,
    ):
        raise InvalidArgumentError("image dimensions differ")
    if valid is None:
        valid = np.ones((original.height, original.width), dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise NoObservablePixelsError("PSNR over an empty valid mask")

    per_band = []
    total_sq = 0.0
    for a, b in zip(original.bands, reconstructed.bands):
        d = a.samples.astype(np.float64) - b.samples.astype(np.float64)
        sq = float(np.sum(np.square(d, where=valid, out=np.zeros_like(d))))
        total_sq += sq
        per_band.append(_mse_to_db(sq / n))
    return PsnrResult(per_band, _mse_to_db(total_sq / (n * original.band_count)))


def _mse_to_db(mse: float) -> float:
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cap_db(value: float, cap: float = PSNR_CAP_DB) -> float:
    """Clamp a dB figure for CSV output (inf becomes the cap)."""
    return min(value, cap)


def write_raster(image: Image, path) -> None:
    """Write an image in the ERP1 format (bit-exact round-trip)."""
    image.validate_range()
    with open(path, "wb") as f:
        f.write(
            _ERP1_HEADER.pack(
                ERP1_MAGIC,
                image.height,
                image.width,
                image.band_count,
                image.cell_id,
                image.captured_at,
            )
        )
        for band in image.bands:
            f.write(np.ascontiguousarray(band.samples, dtype="<f4").tobytes())


def read_raster(path) -> Image:
    """Read an ERP1 file, rejecting malformed headers and out-of-range samples."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _ERP1_HEADER.size:
        raise FormatError("ERP1 file truncated in header")
    magic, height, width, band_count, cell_id, captured_at = _ERP1_HEADER.unpack_from(raw)
    if magic != ERP1_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if height == 0 or width == 0 or band_count == 0:
        raise FormatError("zero raster dimension")
    if not math.isfinite(captured_at) or captured_at < 0:
        raise FormatError("captured_at must be a finite nonnegative day count")
    expect = _ERP1_HEADER.size + 4 * height * width * band_count
    if len(raw) != expect:
        raise FormatError(f"expected {expect} bytes, file has {len(raw)}")
    bands = []
    offset = _ERP1_HEADER.size
    plane = 4 * height * width
    for band_id in range(band_count):
        samples = np.frombuffer(raw, dtype="<f4", count=height * width, offset=offset)
        samples = samples.reshape(height, width)
        if not np.all(np.isfinite(samples)) or samples.min() < 0.0 or samples.max() > 1.0:
            raise FormatError(f"band {band_id} has samples outside [0, 1]")
        bands.append(Band(band_id, samples))
        offset += plane
    return Image(cell_id, captured_at, bands)
