"""Onboard reference cache with diff-based uplink updates.

References live in downsampled form, one entry per (cell, band). Ground
keeps a bit-identical shadow copy, so updates travel as diffs: the set
of downsampled-domain tiles (8x8 cells by default) whose samples differ
bitwise from what the satellite already holds. A full-coverage diff
doubles as the bootstrap upload.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BootstrapRequiredError,
    FormatError,
    InvalidArgumentError,
    InvalidReferenceError,
    StorageBudgetError,
)
from .raster import Band, TileGrid

DIFF_TILE = 8
STORAGE_BUDGET_BYTES = 360 * 10**9

DIFF_MAGIC = b"ERPR"
_DIFF_HEADER = struct.Struct("<4sQBdIII")
_DIFF_TILE_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class ReferenceEntry:
    cell_id: int
    band_id: int
    raster: Band
    source_captured_at: float
    uploaded_at: float

    def __post_init__(self):
        if self.source_captured_at > self.uploaded_at:
            raise InvalidArgumentError(
                "reference cannot be uploaded before its source was captured"
            )

    @property
    def nbytes(self) -> int:
        return int(self.raster.samples.size) * 4


@dataclass(frozen=True)
class ReferenceDiff:
    """Replacement samples for the downsampled-domain tiles that changed."""

    cell_id: int
    band_id: int
    source_captured_at: float
    height: int
    width: int
    tiles: tuple

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgumentError("diff needs positive raster dimensions")
        grid = self.grid()
        seen = set()
        for index, samples in self.tiles:
            if index in seen:
                raise InvalidArgumentError(f"duplicate diff tile {index}")
            if not 0 <= index < grid.tile_count:
                raise InvalidArgumentError(f"diff tile {index} out of range")
            seen.add(index)
            ys, xs = grid.tile_slices(*divmod(index, grid.cols))
            want = (ys.stop - ys.start, xs.stop - xs.start)
            if samples.shape != want:
                raise InvalidArgumentError(
                    f"diff tile {index} has shape {samples.shape}, wants {want}"
                )

    def grid(self) -> TileGrid:
        return TileGrid(self.height, self.width, DIFF_TILE)

    @property
    def full_coverage(self) -> bool:
        return len(self.tiles) == self.grid().tile_count

    @property
    def wire_bytes(self) -> int:
        body = sum(
            _DIFF_TILE_HEADER.size + samples.size * 4 for _, samples in self.tiles
        )
        return _DIFF_HEADER.size + body


class ReferenceStore:
    """One satellite's cache of downsampled references."""

    def __init__(self):
        self._entries = {}

    def get(self, cell_id: int, band_id: int):
        return self._entries.get((cell_id, band_id))

    def entries(self):
        return list(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self._entries.values())

    def drop(self, cell_id: int, band_id: int):
        self._entries.pop((cell_id, band_id), None)

    def evict_lru(self, max_bytes: int, protected_cells=()):
        """Drop oldest-uploaded unprotected entries until under max_bytes.

        Returns the evicted entries. Protected cells are never dropped,
        so the store can refuse to fit; callers check total_bytes after.
        """
        protected = set(protected_cells)
        victims = sorted(
            (
                e
                for e in self._entries.values()
                if e.cell_id not in protected
            ),
            key=lambda e: (e.uploaded_at, e.cell_id, e.band_id),
        )
        evicted = []
        for entry in victims:
            if self.total_bytes() <= max_bytes:
                break
            del self._entries[(entry.cell_id, entry.band_id)]
            evicted.append(entry)
        return evicted


def make_diff(
    cell_id: int,
    band_id: int,
    source_captured_at: float,
    ground_new: Band,
    onboard_cached: Band | None = None,
) -> ReferenceDiff:
    """Diff of the new ground reference against the onboard copy.

    Tiles are compared bitwise; an absent onboard copy yields a
    full-coverage diff.
    """
    h, w = ground_new.samples.shape
    grid = TileGrid(h, w, DIFF_TILE)
    if onboard_cached is not None and onboard_cached.samples.shape != (h, w):
        raise InvalidReferenceError(
            f"cached raster is {onboard_cached.samples.shape}, ground is {(h, w)}"
        )
    new_bits = ground_new.samples.view(np.uint32)
    old_bits = None if onboard_cached is None else onboard_cached.samples.view(
        np.uint32
    )
    tiles = []
    for index in range(grid.tile_count):
        ys, xs = grid.tile_slices(*divmod(index, grid.cols))
        if old_bits is not None and np.array_equal(
            new_bits[ys, xs], old_bits[ys, xs]
        ):
            continue
        tiles.append((index, ground_new.samples[ys, xs].copy()))
    return ReferenceDiff(
        cell_id=cell_id,
        band_id=band_id,
        source_captured_at=float(source_captured_at),
        height=h,
        width=w,
        tiles=tuple(tiles),
    )


def apply_diff(
    store: ReferenceStore, diff: ReferenceDiff, uploaded_at: float
) -> ReferenceEntry:
    """Apply an uplinked diff, returning the updated entry."""
    key = (diff.cell_id, diff.band_id)
    entry = store.get(*key)
    if entry is None:
        if not diff.full_coverage:
            raise BootstrapRequiredError(
                f"no cached reference for cell {diff.cell_id} band "
                f"{diff.band_id}; a partial diff cannot bootstrap"
            )
        raster = np.zeros((diff.height, diff.width), dtype=np.float32)
    else:
        if entry.raster.samples.shape != (diff.height, diff.width):
            raise InvalidReferenceError(
                f"cached raster is {entry.raster.samples.shape}, diff is "
                f"{(diff.height, diff.width)}"
            )
        raster = entry.raster.samples.copy()
    grid = diff.grid()
    for index, samples in diff.tiles:
        ys, xs = grid.tile_slices(*divmod(index, grid.cols))
        raster[ys, xs] = samples
    updated = ReferenceEntry(
        cell_id=diff.cell_id,
        band_id=diff.band_id,
        raster=Band(diff.band_id, raster),
        source_captured_at=diff.source_captured_at,
        uploaded_at=float(uploaded_at),
    )
    store._entries[key] = updated
    return updated


def diff_to_bytes(diff: ReferenceDiff) -> bytes:
    parts = [
        _DIFF_HEADER.pack(
            DIFF_MAGIC,
            diff.cell_id,
            diff.band_id,
            diff.source_captured_at,
            diff.height,
            diff.width,
            len(diff.tiles),
        )
    ]
    for index, samples in diff.tiles:
        flat = np.ascontiguousarray(samples, dtype="<f4")
        parts.append(_DIFF_TILE_HEADER.pack(index, flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def diff_from_bytes(raw: bytes) -> ReferenceDiff:
    if len(raw) < _DIFF_HEADER.size:
        raise FormatError("diff shorter than its header")
    magic, cell_id, band_id, src_t, height, width, n_tiles = _DIFF_HEADER.unpack_from(
        raw, 0
    )
    if magic != DIFF_MAGIC:
        raise FormatError(f"bad diff magic {magic!r}")
    if height < 1 or width < 1:
        raise FormatError("diff has empty raster dimensions")
    grid = TileGrid(height, width, DIFF_TILE)
    offset = _DIFF_HEADER.size
    tiles = []
    for _ in range(n_tiles):
        if len(raw) < offset + _DIFF_TILE_HEADER.size:
            raise FormatError("diff truncated inside a tile header")
        index, n_samples = _DIFF_TILE_HEADER.unpack_from(raw, offset)
        offset += _DIFF_TILE_HEADER.size
        if not 0 <= index < grid.tile_count:
            raise FormatError(f"diff tile index {index} out of range")
        ys, xs = grid.tile_slices(*divmod(index, grid.cols))
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        if n_samples != shape[0] * shape[1]:
            raise FormatError(
                f"diff tile {index} carries {n_samples} samples, wants "
                f"{shape[0] * shape[1]}"
            )
        end = offset + n_samples * 4
        if len(raw) < end:
            raise FormatError("diff truncated inside tile samples")
        samples = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        tiles.append((index, samples.copy()))
        offset = end
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after diff")
    try:
        return ReferenceDiff(
            cell_id=cell_id,
            band_id=band_id,
            source_captured_at=src_t,
            height=height,
            width=width,
            tiles=tuple(tiles),
        )
    except InvalidArgumentError as exc:
        raise FormatError(str(exc)) from None


@dataclass
class StorageLedger:
    """Running byte counts against the onboard storage budget."""

    budget_bytes: int = STORAGE_BUDGET_BYTES
    capture_bytes: int = 0
    reference_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return self.capture_bytes + self.reference_bytes

    def charge_capture(self, n: int):
        if n < 0:
            raise InvalidArgumentError("cannot charge negative bytes")
        self.capture_bytes += n
        self._check()

    def release_capture(self, n: int):
        if n < 0 or n > self.capture_bytes:
            raise InvalidArgumentError("releasing more capture bytes than held")
        self.capture_bytes -= n

    def set_reference_bytes(self, n: int):
        if n < 0:
            raise InvalidArgumentError("reference bytes cannot be negative")
        self.reference_bytes = n
        self._check()

    def _check(self):
        if self.total_bytes > self.budget_bytes:
            raise StorageBudgetError(
                f"storage {self.total_bytes} exceeds budget {self.budget_bytes}"
            )


@dataclass(frozen=True)
class StorageEstimate:
    area_per_contact_km2: float
    captured_mb: float
    reference_mb: float
    ratio: float
    stated_reference_mb: float
    stated_ratio: float
    note: str


def storage_estimate(
    area_per_contact_km2: float,
    coefficient_mb_per_km2: float = 0.87,
    revisit_coverage_multiple: float = 160.0,
    downsample_area_factor: float = 2601.0,
) -> StorageEstimate:
    """Back-of-envelope onboard storage breakdown.

    Captured imagery is held for two consecutive ground contacts; the
    reference cache covers the revisit footprint at the configured
    downsample factor. The formula result for the reference share
    (~0.0535a MB, ~3% of captured) does not match the separately stated
    figures of 0.08a MB and about 9%; both are reported and nothing is
    forced to agree.
    """
    if area_per_contact_km2 < 0 or coefficient_mb_per_km2 < 0:
        raise InvalidArgumentError("inputs must be nonnegative")
    if revisit_coverage_multiple < 0 or downsample_area_factor <= 0:
        raise InvalidArgumentError("inputs must be nonnegative")
    a = area_per_contact_km2
    captured = 2.0 * coefficient_mb_per_km2 * a
    reference = coefficient_mb_per_km2 * revisit_coverage_multiple * a
    reference /= downsample_area_factor
    ratio = 0.0 if captured == 0 else reference / captured
    note = (
        "reference share from the formula is "
        f"{reference:.4g} MB ({ratio:.1%} of captured); the stated "
        f"figures of {0.08 * a:.4g} MB and 9% do not follow from the "
        "same constants, so both are reported"
    )
    return StorageEstimate(
        area_per_contact_km2=a,
        captured_mb=captured,
        reference_mb=reference,
        ratio=ratio,
        stated_reference_mb=0.08 * a,
        stated_ratio=0.09,
        note=note,
    )
