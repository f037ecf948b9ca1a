"""Tile-level change detection against downsampled references.

Detection happens in the downsampled domain: the capture is reduced to
the reference's resolution, mapped into the reference's illumination by
the inverse of the fitted (k, d), and differenced per downsampled cell.
Each capture tile then gets the overlap-area-weighted mean of its
cells' absolute differences (cell and tile boundaries need not line up)
and is CHANGED when that mean clears theta. Differencing on the
reference side keeps the statistic invariant to the capture's own
illumination, so one calibrated theta stays valid as lighting varies.
The full-resolution 0.01 criterion is never applied onboard; it defines
ground truth for calibration and scoring only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    CalibrationFailedError,
    DegenerateFitError,
    InvalidArgumentError,
    InvalidReferenceError,
)
from .preprocess import IDENTITY_FIT, CloudMask, IlluminationFit, fit_illumination
from .raster import (
    TILE_SIZE_DEFAULT,
    Band,
    Image,
    TileGrid,
    downsample,
    downsample_mask_all,
)

UNCHANGED = np.int8(0)
CHANGED = np.int8(1)
NOT_OBSERVABLE = np.int8(2)

THETA_SWEEP_GRID = tuple(round(0.001 + 0.0005 * i, 4) for i in range(39))
MISS_BUDGET_DEFAULT = 0.01
FP_BUDGET_DEFAULT = 0.01

# Gains this small make the inverse illumination map numerically useless.
_MIN_GAIN = 1e-6


@dataclass(frozen=True)
class DetectionConfig:
    """Knobs for reference-domain change detection.

    fit_gauge=False skips the per-capture illumination fit and differences
    directly; use it when capture and reference are known to share a
    radiometric gauge (calibrated sensor, normalized reference), where a
    fitted gauge could only absorb real change into the illumination model.
    """

    theta: float = 0.01
    reference_downsample: int = 51
    tile_size: int = TILE_SIZE_DEFAULT
    fit_gauge: bool = True

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise InvalidArgumentError("theta must sit inside (0, 1)")
        if self.reference_downsample < 1:
            raise InvalidArgumentError("reference_downsample must be >= 1")
        if self.tile_size < 1:
            raise InvalidArgumentError("tile_size must be positive")


@dataclass
class ChangeMap:
    """Per-(band, tile) trits plus the illumination fits that produced them."""

    trits: np.ndarray
    fits: tuple
    tile_size: int = TILE_SIZE_DEFAULT

    def __post_init__(self):
        self.trits = np.asarray(self.trits, dtype=np.int8)
        if self.trits.ndim != 3:
            raise InvalidArgumentError("trits must be (bands, rows, cols)")
        if not np.isin(self.trits, (UNCHANGED, CHANGED, NOT_OBSERVABLE)).all():
            raise InvalidArgumentError("trits hold values outside the alphabet")
        if len(self.fits) != self.trits.shape[0]:
            raise InvalidArgumentError("one illumination fit per band required")

    @property
    def band_count(self) -> int:
        return self.trits.shape[0]

    def changed(self, band: int) -> np.ndarray:
        return self.trits[band] == CHANGED

    def observable(self, band: int) -> np.ndarray:
        return self.trits[band] != NOT_OBSERVABLE

    def changed_fraction(self) -> float:
        """CHANGED share of all (band, tile) slots."""
        return float(np.count_nonzero(self.trits == CHANGED) / self.trits[0].size
                     / self.band_count)


def _tile_cell_spans(n_pixels, factor, tile_size, n_tiles):
    """Downsampled cells under each capture tile, with overlap widths.

    Returns one (first_cell, last_cell, widths) triple per tile along one
    axis, where widths[i] is how many of the tile's pixels fall inside
    cell first_cell + i. The outer product of row and column widths gives
    the per-cell overlap areas used as weights.
    """
    out = []
    for t in range(n_tiles):
        start = t * tile_size
        stop = min((t + 1) * tile_size, n_pixels)
        first = start // factor
        last = (stop - 1) // factor
        widths = [
            min(stop, (i + 1) * factor) - max(start, i * factor)
            for i in range(first, last + 1)
        ]
        out.append((first, last, np.array(widths, dtype=np.float64)))
    return out


def _robust_fit(capture: Band, reference: Band, mask) -> IlluminationFit:
    """Two-pass least squares: fit, drop gross outliers, refit.

    Changed cells are outliers for the illumination model; one trimming
    round removes their bias without touching well-behaved history.
    """
    fit = fit_illumination(capture, reference, mask)
    if fit.residual_rms == 0.0:
        return fit
    cap = capture.samples.astype(np.float64)
    ref = reference.samples.astype(np.float64)
    resid = np.abs(cap - (fit.k * ref + fit.d))
    inliers = mask & (resid <= 3.0 * fit.residual_rms)
    if inliers.sum() < 2 or inliers.sum() == mask.sum():
        return fit
    try:
        return fit_illumination(capture, reference, inliers)
    except DegenerateFitError:
        return fit


class _BandAnalysis:
    """Theta-independent detection state for one band."""

    __slots__ = ("cell_diff", "cell_obs", "fit", "degenerate", "missing")

    def __init__(self, cell_diff, cell_obs, fit, degenerate, missing):
        self.cell_diff = cell_diff
        self.cell_obs = cell_obs
        self.fit = fit
        self.degenerate = degenerate
        self.missing = missing


def _analyze_band(band: Band, entry, ds_clear, cfg: DetectionConfig):
    if entry is None:
        return _BandAnalysis(None, None, IDENTITY_FIT, False, True)
    ds_capture = downsample(band, cfg.reference_downsample)
    ref = entry.raster.samples
    if ref.shape != ds_capture.samples.shape:
        raise InvalidReferenceError(
            f"reference raster {ref.shape} does not match the downsampled "
            f"capture {ds_capture.samples.shape}"
        )
    cell_obs = ds_clear & np.isfinite(ref)
    degenerate = False
    if cfg.fit_gauge:
        try:
            fit = _robust_fit(ds_capture, Band(band.band_id, ref), cell_obs)
        except DegenerateFitError:
            fit = IDENTITY_FIT
            degenerate = True
        if fit.k < _MIN_GAIN:
            fit = IDENTITY_FIT
            degenerate = True
    else:
        fit = IDENTITY_FIT
    restored = (ds_capture.samples.astype(np.float64) - fit.d) / fit.k
    cell_diff = np.abs(restored - ref.astype(np.float64))
    return _BandAnalysis(cell_diff, cell_obs, fit, degenerate, False)


def _span_matrix(spans, n_tiles, n_cells):
    w = np.zeros((n_tiles, n_cells))
    for t, (first, last, widths) in enumerate(spans):
        w[t, first : last + 1] = widths
    return w


def _threshold_band(analysis, cloud_tiles, grid, row_spans, col_spans, theta):
    trits = np.full((grid.rows, grid.cols), NOT_OBSERVABLE, dtype=np.int8)
    if analysis.missing:
        return trits
    # per-tile weighted mean over observable cells, written as two matrix
    # products with the tile/cell overlap widths on either side
    obs = analysis.cell_obs.astype(np.float64)
    wy = _span_matrix(row_spans, grid.rows, obs.shape[0])
    wx = _span_matrix(col_spans, grid.cols, obs.shape[1])
    den = wy @ obs @ wx.T
    evaluable = ~np.asarray(cloud_tiles, dtype=bool) & (den > 0)
    if analysis.degenerate:
        trits[evaluable] = CHANGED
        return trits
    # zero unobserved cells rather than multiplying: the diff is NaN where
    # the reference has holes, and NaN * 0 would poison the products
    num = wy @ np.where(analysis.cell_obs, analysis.cell_diff, 0.0) @ wx.T
    scores = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    trits[evaluable & (scores > theta)] = CHANGED
    trits[evaluable & (scores <= theta)] = UNCHANGED
    return trits


def _prepare(capture: Image, references, cloud: CloudMask, cfg: DetectionConfig):
    grid = TileGrid(capture.height, capture.width, cfg.tile_size)
    if cloud.tiles.shape != (grid.rows, grid.cols):
        raise InvalidArgumentError(
            f"cloud mask grid {cloud.tiles.shape} does not match the "
            f"capture's {(grid.rows, grid.cols)}"
        )
    clear_px = cloud.clear_pixels(capture.height, capture.width)
    # one mask downsample shared across bands
    ds_clear = downsample_mask_all(clear_px, cfg.reference_downsample)
    row_spans = _tile_cell_spans(
        capture.height, cfg.reference_downsample, cfg.tile_size, grid.rows
    )
    col_spans = _tile_cell_spans(
        capture.width, cfg.reference_downsample, cfg.tile_size, grid.cols
    )
    analyses = [
        _analyze_band(band, references.get(band.band_id), ds_clear, cfg)
        for band in capture.bands
    ]
    return grid, row_spans, col_spans, analyses


def detect_changes(
    capture: Image, references, cloud: CloudMask, cfg: DetectionConfig
) -> ChangeMap:
    """Classify every (band, tile) as CHANGED/UNCHANGED/NOT_OBSERVABLE.

    references maps band_id to that band's ReferenceEntry; bands without
    an entry come back fully NOT_OBSERVABLE. A degenerate illumination
    fit falls back to identity and marks all observable tiles CHANGED,
    so nothing is lost when alignment cannot be trusted.
    """
    grid, row_spans, col_spans, analyses = _prepare(capture, references, cloud, cfg)
    trits = np.stack(
        [
            _threshold_band(a, cloud.tiles, grid, row_spans, col_spans, cfg.theta)
            for a in analyses
        ]
    )
    return ChangeMap(
        trits=trits,
        fits=tuple(a.fit for a in analyses),
        tile_size=cfg.tile_size,
    )


def miss_rate(change_map: ChangeMap, truth: np.ndarray) -> float:
    """Fraction of truly-changed, observable tiles marked UNCHANGED."""
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != change_map.trits.shape[1:]:
        raise InvalidArgumentError(
            f"truth grid {truth.shape} does not match the map "
            f"{change_map.trits.shape[1:]}"
        )
    missed = 0
    eligible = 0
    for band in range(change_map.band_count):
        observable = change_map.observable(band)
        eligible += int(np.count_nonzero(truth & observable))
        missed += int(
            np.count_nonzero(truth & (change_map.trits[band] == UNCHANGED))
        )
    return 0.0 if eligible == 0 else missed / eligible


def false_positive_rate(change_map: ChangeMap, truth: np.ndarray) -> float:
    """Fraction of truly-unchanged, observable tiles marked CHANGED."""
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != change_map.trits.shape[1:]:
        raise InvalidArgumentError("truth grid does not match the map")
    wrong = 0
    eligible = 0
    for band in range(change_map.band_count):
        observable = change_map.observable(band)
        eligible += int(np.count_nonzero(~truth & observable))
        wrong += int(np.count_nonzero(~truth & change_map.changed(band)))
    return 0.0 if eligible == 0 else wrong / eligible


def calibrate_theta(
    history,
    cfg: DetectionConfig | None = None,
    grid=THETA_SWEEP_GRID,
    miss_budget: float = MISS_BUDGET_DEFAULT,
    fp_budget: float = FP_BUDGET_DEFAULT,
) -> float:
    """Pick theta from profiling data.

    history holds (capture, references_by_band, cloud_mask, truth) tuples
    where truth flags tiles whose full-resolution mean difference against
    the reference source exceeded 0.01. The sweep returns the largest
    grid theta that keeps both the aggregate miss rate and the aggregate
    false positive rate over the profiling set within their budgets.
    Misses only grow with theta and false positives only shrink, so the
    feasible thetas form one interval; an empty interval means the grid
    cannot separate change from noise on this history.
    """
    if not history:
        raise CalibrationFailedError("empty profiling history")
    if cfg is None:
        cfg = DetectionConfig()
    prepared = []
    for capture, references, cloud, truth in history:
        grid_t, row_spans, col_spans, analyses = _prepare(
            capture, references, cloud, cfg
        )
        truth = np.asarray(truth, dtype=bool)
        if truth.shape != (grid_t.rows, grid_t.cols):
            raise InvalidArgumentError("truth grid does not match the capture")
        prepared.append((grid_t, row_spans, col_spans, analyses, cloud, truth))
    for theta in sorted(grid, reverse=True):
        missed = 0
        changed_eligible = 0
        wrong = 0
        static_eligible = 0
        for grid_t, row_spans, col_spans, analyses, cloud, truth in prepared:
            for analysis in analyses:
                trits = _threshold_band(
                    analysis, cloud.tiles, grid_t, row_spans, col_spans, theta
                )
                observable = trits != NOT_OBSERVABLE
                changed_eligible += int(np.count_nonzero(truth & observable))
                missed += int(np.count_nonzero(truth & (trits == UNCHANGED)))
                static_eligible += int(np.count_nonzero(~truth & observable))
                wrong += int(np.count_nonzero(~truth & (trits == CHANGED)))
        miss = 0.0 if changed_eligible == 0 else missed / changed_eligible
        fp = 0.0 if static_eligible == 0 else wrong / static_eligible
        if miss <= miss_budget and fp <= fp_budget:
            return float(theta)
    raise CalibrationFailedError(
        f"no theta in the sweep grid keeps misses within {miss_budget:.2%} "
        f"and false positives within {fp_budget:.2%}"
    )
