"""Ground segment: image archive, reference selection, uplink planning.

The archive keeps downloaded full-resolution images per cell (optionally
only the newest few), normalized into one photometric gauge so that
references cut from different captures agree with each other. Reference
selection picks the newest nearly cloud-free archived capture
constellation-wide, and uplink planning turns selected references into
budgeted per-band diffs against the ground's shadow of each satellite's
onboard cache.
"""

import bisect
from dataclasses import dataclass, field

import numpy as np

from .changedet import _robust_fit
from .errors import DegenerateFitError, InvalidArgumentError
from .preprocess import IDENTITY_FIT, CloudMask
from .raster import (
    NOT_OBSERVABLE,
    TILE_SIZE_DEFAULT,
    Band,
    Image,
    TileGrid,
    downsample,
    downsample_mask_all,
)
from .refstore import ReferenceStore, diff_to_bytes, make_diff

__all__ = [
    "ArchivedCapture",
    "GroundArchive",
    "UplinkPlan",
    "plan_uplink",
    "redetect_clouds_ground",
    "reference_raster",
    "schedule_guaranteed_download",
]

# whole-image cloud coverage below which a capture can serve as a reference
REFERENCE_CLOUD_BOUND = 0.01
# full downloads are guaranteed at least this often per cell (days)
GUARANTEED_PERIOD_DAYS = 30.0
# 250 kbps over a 600 s contact
UPLINK_BUDGET_BYTES = 18_750_000
# gains this small make the inverse gauge map numerically useless
_MIN_GAIN = 1e-6
# gauge fits run on a strided subsample once images get bigger than this;
# the fit is a global 2-parameter line, so a few thousand pixels pin it
# as well as all of them at a fraction of the cost
_FIT_SAMPLE_TARGET = 8192


@dataclass
class ArchivedCapture:
    """One downloaded image in the archive's common gauge."""

    cell_id: int
    captured_at: float
    image: Image
    cloud_tiles: np.ndarray
    source_satellite: int
    full_download: bool
    valid: np.ndarray | None = None
    gauges: tuple = ()
    tile_size: int = TILE_SIZE_DEFAULT

    @property
    def cloud_coverage(self) -> float:
        return float(np.count_nonzero(self.cloud_tiles) / self.cloud_tiles.size)


def _pixel_valid(capture: ArchivedCapture, band_id: int) -> np.ndarray:
    """Pixels of one band that carry real (non-cloud, downloaded) data."""
    band = capture.image.bands[band_id]
    clear = CloudMask(capture.cloud_tiles, capture.tile_size).clear_pixels(
        band.height, band.width
    )
    if capture.valid is None:
        return clear
    return capture.valid[band_id] & clear


class GroundArchive:
    """Time-ordered downloaded imagery for every cell.

    Every arriving image is aligned to the cell's newest archived image
    by a trimmed least-squares illumination fit before storage, so the
    first capture of a cell fixes that cell's gauge and later captures
    join it instead of dragging their own capture-time illumination in.
    normalize_gauge=False stores images as they arrive; use it when the
    sensor gauge is already calibrated and a fitted alignment could only
    absorb real surface change.
    """

    def __init__(
        self,
        tile_size: int = TILE_SIZE_DEFAULT,
        reconstructed_reference_eligible: bool = True,
        max_captures_per_cell: int | None = None,
        normalize_gauge: bool = True,
    ):
        if tile_size < 1:
            raise InvalidArgumentError("tile_size must be positive")
        if max_captures_per_cell is not None and max_captures_per_cell < 1:
            raise InvalidArgumentError("retention bound must keep >= 1 capture")
        self.tile_size = tile_size
        self.reconstructed_reference_eligible = reconstructed_reference_eligible
        self.max_captures_per_cell = max_captures_per_cell
        self.normalize_gauge = normalize_gauge
        self._captures: dict[int, list[ArchivedCapture]] = {}

    def cells(self):
        return sorted(self._captures)

    def captures(self, cell_id: int):
        return list(self._captures.get(cell_id, ()))

    def newest(self, cell_id: int):
        entries = self._captures.get(cell_id)
        return entries[-1] if entries else None

    def ingest(
        self,
        image: Image,
        cloud_tiles,
        source_satellite: int = 0,
        full_download: bool = True,
        valid=None,
    ) -> ArchivedCapture:
        grid = TileGrid(image.height, image.width, self.tile_size)
        cloud_tiles = np.asarray(cloud_tiles, dtype=bool)
        if cloud_tiles.shape != (grid.rows, grid.cols):
            raise InvalidArgumentError(
                f"cloud grid {cloud_tiles.shape} does not match the image's "
                f"{(grid.rows, grid.cols)} tiling"
            )
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (image.band_count, image.height, image.width):
                raise InvalidArgumentError(
                    "validity mask must cover every band and pixel"
                )
            valid = valid.copy()

        entry = ArchivedCapture(
            cell_id=image.cell_id,
            captured_at=image.captured_at,
            image=image,
            cloud_tiles=cloud_tiles.copy(),
            source_satellite=source_satellite,
            full_download=full_download,
            valid=valid,
            tile_size=self.tile_size,
        )
        prior = self.newest(image.cell_id)
        if self.normalize_gauge and prior is not None:
            entry = self._normalize(entry, prior)
        order = self._captures.setdefault(image.cell_id, [])
        bisect.insort(order, entry, key=lambda e: e.captured_at)
        if (
            self.max_captures_per_cell is not None
            and len(order) > self.max_captures_per_cell
        ):
            del order[: len(order) - self.max_captures_per_cell]
        return entry

    def _normalize(
        self, entry: ArchivedCapture, prior: ArchivedCapture
    ) -> ArchivedCapture:
        if (prior.image.height, prior.image.width) != (
            entry.image.height,
            entry.image.width,
        ) or prior.image.band_count != entry.image.band_count:
            raise InvalidArgumentError(
                f"cell {entry.cell_id} arrived with a different raster "
                "layout than its archive"
            )
        bands = []
        gauges = []
        step = 1
        size = entry.image.height * entry.image.width
        if size > _FIT_SAMPLE_TARGET:
            step = int(np.ceil(np.sqrt(size / _FIT_SAMPLE_TARGET)))
        for band in entry.image.bands:
            anchor = prior.image.bands[band.band_id]
            mask = _pixel_valid(entry, band.band_id) & _pixel_valid(
                prior, band.band_id
            )
            sub_band, sub_anchor, sub_mask = band, anchor, mask
            if step > 1:
                sub_mask = mask[::step, ::step]
                if sub_mask.sum() >= 2:
                    sub_band = Band(band.band_id, band.samples[::step, ::step])
                    sub_anchor = Band(
                        anchor.band_id, anchor.samples[::step, ::step]
                    )
                else:
                    sub_mask = mask
            fit = IDENTITY_FIT
            if sub_mask.sum() >= 2:
                try:
                    fit = _robust_fit(sub_band, sub_anchor, sub_mask)
                except DegenerateFitError:
                    fit = IDENTITY_FIT
            if fit.k < _MIN_GAIN:
                fit = IDENTITY_FIT
            if fit is IDENTITY_FIT:
                bands.append(Band(band.band_id, band.samples.copy()))
            else:
                leveled = (band.samples.astype(np.float64) - fit.d) / fit.k
                bands.append(
                    Band(band.band_id, np.clip(leveled, 0.0, 1.0).astype(np.float32))
                )
            gauges.append(fit)
        entry.image = Image(entry.cell_id, entry.captured_at, bands)
        entry.gauges = tuple(gauges)
        return entry

    def select_reference(self, cell_id: int, band_id: int, now: float):
        """Newest archived capture usable as the (cell, band) reference.

        Usable means captured by `now`, whole-image cloud coverage under
        1%, carrying the band, and (unless reconstructed captures are
        reference-eligible) downloaded in full.
        """
        for entry in reversed(self._captures.get(cell_id, ())):
            if entry.captured_at > now:
                continue
            if band_id >= entry.image.band_count:
                continue
            if entry.cloud_coverage >= REFERENCE_CLOUD_BOUND:
                continue
            if not (self.reconstructed_reference_eligible or entry.full_download):
                continue
            return entry
        return None

    def index_rows(self):
        """Archive index as plain dicts, one per capture, CSV-ready."""
        rows = []
        for cell_id in self.cells():
            for entry in self._captures[cell_id]:
                rows.append(
                    {
                        "cell_id": cell_id,
                        "captured_at": entry.captured_at,
                        "source_satellite": entry.source_satellite,
                        "cloud_coverage": entry.cloud_coverage,
                        "full_download": int(entry.full_download),
                    }
                )
        return rows


def redetect_clouds_ground(
    image: Image, truth_tiles, tile_size: int = TILE_SIZE_DEFAULT
) -> np.ndarray:
    """Ground-side cloud labels for an archived image.

    The simulator stands in the compute-heavy accurate detector with the
    generator's own truth, so the labels ARE the truth; a real detector
    would plug in here.
    """
    truth_tiles = np.asarray(truth_tiles, dtype=bool)
    grid = TileGrid(image.height, image.width, tile_size)
    if truth_tiles.shape != (grid.rows, grid.cols):
        raise InvalidArgumentError(
            f"truth grid {truth_tiles.shape} does not match the image's "
            f"{(grid.rows, grid.cols)} tiling"
        )
    return truth_tiles.copy()


def schedule_guaranteed_download(
    last_full_at: float,
    now: float,
    cloud_coverage: float,
    period_days: float = GUARANTEED_PERIOD_DAYS,
    coverage_bound: float = REFERENCE_CLOUD_BOUND,
) -> bool:
    """Monthly full-download rule: due by age AND currently clear enough.

    A cell overdue under permanent cloud stays pending; the rule fires on
    the first capture clear enough to be worth archiving whole.
    """
    return now - last_full_at >= period_days and cloud_coverage < coverage_bound


def reference_raster(
    capture: ArchivedCapture, band_id: int, factor: int
) -> Band:
    """Downsampled reference for one band of an archived capture.

    Cells whose footprint includes any cloudy or never-downloaded pixel
    come back as the not-observable sentinel instead of a polluted mean.
    """
    band = capture.image.bands[band_id]
    ds = downsample(band, factor)
    whole = downsample_mask_all(_pixel_valid(capture, band_id), factor)
    samples = ds.samples.copy()
    samples[~whole] = NOT_OBSERVABLE
    return Band(band_id, samples)


@dataclass
class UplinkPlan:
    """Reference diffs admitted to one contact's uplink window."""

    contact_id: int
    diffs: list = field(default_factory=list)
    total_bytes: int = 0
    skipped: list = field(default_factory=list)

    def rows(self):
        rows = [
            {
                "contact_id": self.contact_id,
                "cell_id": diff.cell_id,
                "band_id": diff.band_id,
                "source_captured_at": diff.source_captured_at,
                "bytes": len(diff_to_bytes(diff)),
                "admitted": 1,
            }
            for diff in self.diffs
        ]
        rows.extend(
            {
                "contact_id": self.contact_id,
                "cell_id": cell_id,
                "band_id": band_id,
                "source_captured_at": float("nan"),
                "bytes": 0,
                "admitted": 0,
            }
            for cell_id, band_id in self.skipped
        )
        return rows


def plan_uplink(
    contact_id: int,
    upcoming_cells,
    archive: GroundArchive,
    shadow: ReferenceStore,
    now: float,
    budget_bytes: int = UPLINK_BUDGET_BYTES,
    reference_downsample: int = 51,
    policy: str = "age",
    rng=None,
    raster_cache: dict | None = None,
) -> UplinkPlan:
    """Pick reference diffs for the cells a satellite visits next.

    Candidates are the cells (per band) whose onboard cache would differ
    from today's selected reference. The default policy admits them in
    ascending post-update reference age, so the budget buys the freshest
    achievable references first; "random" reproduces uniformly random
    skipping instead. Whatever misses the budget is listed as skipped and
    the satellite falls back to its cached reference.

    Archived captures never change after ingest, so callers planning many
    contacts can pass a dict as raster_cache to reuse downsampled
    reference rasters across calls.
    """
    if policy not in ("age", "random"):
        raise InvalidArgumentError(f"unknown uplink policy {policy!r}")
    if policy == "random" and rng is None:
        raise InvalidArgumentError("random uplink policy needs a generator")
    if budget_bytes < 0:
        raise InvalidArgumentError("uplink budget must be >= 0")

    candidates = []
    for cell_id in sorted(set(upcoming_cells)):
        capture = archive.select_reference(cell_id, 0, now)
        if capture is None:
            continue
        for band in capture.image.bands:
            key = (
                cell_id,
                band.band_id,
                capture.captured_at,
                capture.source_satellite,
                reference_downsample,
            )
            ground_new = None if raster_cache is None else raster_cache.get(key)
            if ground_new is None:
                ground_new = reference_raster(
                    capture, band.band_id, reference_downsample
                )
                if raster_cache is not None:
                    raster_cache[key] = ground_new
            cached = shadow.get(cell_id, band.band_id)
            diff = make_diff(
                cell_id,
                band.band_id,
                capture.captured_at,
                ground_new,
                None if cached is None else cached.raster,
            )
            current = (
                cached is not None
                and not diff.tiles
                and cached.source_captured_at >= capture.captured_at
            )
            if current:
                continue
            age_after = now - capture.captured_at
            candidates.append((age_after, cell_id, band.band_id, diff))

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    if policy == "random":
        order = rng.permutation(len(candidates))
        candidates = [candidates[i] for i in order]

    plan = UplinkPlan(contact_id=contact_id)
    for _, cell_id, band_id, diff in candidates:
        nbytes = len(diff_to_bytes(diff))
        if plan.total_bytes + nbytes <= budget_bytes:
            plan.diffs.append(diff)
            plan.total_bytes += nbytes
        else:
            plan.skipped.append((cell_id, band_id))
    return plan
