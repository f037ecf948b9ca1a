"""Constellation simulator: captures, encoding, downlink, archive, uplink.

Time is measured in days. Satellites follow a revisit schedule rather
than orbital mechanics: each satellite sweeps every cell once per revisit
period, with cell passes spread evenly through the period, and talks to
the ground a fixed number of times per day. Captures are cloud-screened,
differenced against the onboard reference, encoded, and queued until the
next contact; the downlink budget may force uniform refinement-layer
truncation or defer whole payloads FIFO. The ground reconstructs and
archives each download, re-detects clouds, selects the newest clear
reference per cell, and - under the reference-sharing strategy - uplinks
budgeted reference diffs for the cells each satellite visits next.

Everything is driven by seeded generators keyed on (seed, role), so a
(config, seed) pair replays to identical ledgers, byte for byte.
"""

import bisect
import enum
import hashlib
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .changedet import (
    CHANGED,
    NOT_OBSERVABLE,
    UNCHANGED,
    ChangeMap,
    DetectionConfig,
    calibrate_theta,
    detect_changes,
)
from .codec import EncodedPayload, RateConfig, encode, reconstruct, truncate_layers
from .errors import InvalidArgumentError, StorageBudgetError
from .ground import (
    GUARANTEED_PERIOD_DAYS,
    REFERENCE_CLOUD_BOUND,
    GroundArchive,
    plan_uplink,
    redetect_clouds_ground,
    schedule_guaranteed_download,
)
from .preprocess import (
    IDENTITY_FIT,
    CloudMask,
    detect_clouds_onboard,
    should_drop,
    train_cloud_tree,
)
from .raster import Band, Image, TileGrid, downsample, downsample_mask_all
from .raster import NOT_OBSERVABLE as _MISSING_CELL
from .refstore import (
    STORAGE_BUDGET_BYTES,
    ReferenceEntry,
    ReferenceStore,
    StorageLedger,
    apply_diff,
)
from .synth import ChangeEvent, WorldConfig, WorldModel, generate_capture

__all__ = [
    "CONTACT_COLUMNS",
    "IMAGE_COLUMNS",
    "EventQueue",
    "MetricsLedger",
    "Satellite",
    "ScenarioConfig",
    "SimResult",
    "Strategy",
    "compression_vs_constellation",
    "detection_quality_experiment",
    "downlink_quality_tradeoff",
    "golden_schedule_scenario",
    "psnr",
    "reference_age_experiment",
    "run",
    "scripted_world",
]

# event kinds; captures sort before contacts at the same instant, so a
# capture taken at a contact time still rides down on that contact
_CAPTURE = 0
_CONTACT = 1

# seed-stream tags (arbitrary but fixed; sharing one would alias streams)
_REVISIT_TAG = 11
_PHASE_TAG = 12
_UPLINK_TAG = 13
_TREE_SEED_OFFSET = 104729
_AGE_TAG = 21
_RATIO_TAG = 22
_QUALITY_TAG = 23


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tags))


class Strategy(enum.Enum):
    """Where a satellite's change-detection reference comes from."""

    EARTH_PLUS = "earth-plus"  # constellation-wide references via uplink
    SAT_LOCAL = "sat-local"  # own most recent cloud-free capture
    FIXED_REF = "fixed-ref"  # own first cloud-free capture, never updated
    NONCLOUDY_ALL = "noncloudy-all"  # no reference; send all clear tiles


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything that defines one simulated campaign.

    revisit_days may be a single period for all satellites, one per
    satellite, or None to draw each uniformly from 10-15 days.
    phase_days is "staggered" (evenly offset starts), "random", or an
    explicit per-satellite tuple. capture_times, when given, replaces the
    generated capture schedule with explicit (day, satellite, cell)
    triples; contacts are always generated.
    """

    world: WorldConfig = field(default_factory=WorldConfig)
    satellite_count: int = 3
    duration_days: float = 120.0
    revisit_days: object = None
    phase_days: object = "staggered"
    contacts_per_day: int = 7
    contact_seconds: float = 600.0
    uplink_bps: float = 250_000.0
    downlink_bps: float = 200_000_000.0
    strategy: Strategy = Strategy.EARTH_PLUS
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    rate: RateConfig = field(default_factory=lambda: RateConfig(1.0))
    seed: int = 0
    uplink_policy: str = "age"
    guaranteed_period_days: float = GUARANTEED_PERIOD_DAYS
    storage_budget_bytes: int = STORAGE_BUDGET_BYTES
    archive_retention: int | None = 8
    download_unreferenced: bool = True
    capture_times: tuple | None = None

    def __post_init__(self):
        if self.satellite_count < 1:
            raise InvalidArgumentError("need at least one satellite")
        if not self.duration_days > 0:
            raise InvalidArgumentError("duration must be positive")
        if self.contacts_per_day < 1:
            raise InvalidArgumentError("need at least one contact per day")
        if not self.contact_seconds > 0:
            raise InvalidArgumentError("contacts must have positive duration")
        if not (self.uplink_bps > 0 and self.downlink_bps > 0):
            raise InvalidArgumentError("link rates must be positive")
        if not isinstance(self.strategy, Strategy):
            raise InvalidArgumentError(f"unknown strategy {self.strategy!r}")
        if self.uplink_policy not in ("age", "random"):
            raise InvalidArgumentError(
                f"unknown uplink policy {self.uplink_policy!r}"
            )
        if not self.guaranteed_period_days > 0:
            raise InvalidArgumentError("guaranteed period must be positive")
        if self.storage_budget_bytes < 1:
            raise InvalidArgumentError("storage budget must be positive")
        if self.archive_retention is not None and self.archive_retention < 1:
            raise InvalidArgumentError("archive retention must keep >= 1")
        if self.detection.tile_size != self.world.tile_size:
            raise InvalidArgumentError(
                "detection and world disagree on the tile size"
            )
        self._check_revisit()
        self._check_phases()
        if self.capture_times is not None:
            for item in self.capture_times:
                t, sat, cell = item
                if t < 0 or not math.isfinite(t):
                    raise InvalidArgumentError(f"bad capture time {t!r}")
                if not 0 <= sat < self.satellite_count:
                    raise InvalidArgumentError(f"bad capture satellite {sat}")
                if not 0 <= cell < self.world.cells:
                    raise InvalidArgumentError(f"bad capture cell {cell}")

    def _check_revisit(self):
        r = self.revisit_days
        if r is None:
            return
        if isinstance(r, (int, float)):
            if not r > 0:
                raise InvalidArgumentError("revisit period must be positive")
            return
        if len(r) != self.satellite_count:
            raise InvalidArgumentError(
                f"{len(r)} revisit periods for {self.satellite_count} satellites"
            )
        if not all(p > 0 for p in r):
            raise InvalidArgumentError("revisit periods must be positive")

    def _check_phases(self):
        p = self.phase_days
        if p in ("staggered", "random"):
            return
        if isinstance(p, str):
            raise InvalidArgumentError(f"unknown phase rule {p!r}")
        if len(p) != self.satellite_count:
            raise InvalidArgumentError(
                f"{len(p)} phases for {self.satellite_count} satellites"
            )
        if not all(x >= 0 for x in p):
            raise InvalidArgumentError("phases cannot be negative")

    @property
    def uplink_budget_bytes(self) -> int:
        return int(self.uplink_bps * self.contact_seconds / 8)

    @property
    def downlink_budget_bytes(self) -> int:
        return int(self.downlink_bps * self.contact_seconds / 8)


class EventQueue:
    """Min-heap of (time, kind, satellite, cell) simulation events.

    Pops in nondecreasing time; ties break by event kind first (captures
    before contacts), then satellite id, then insertion order.
    """

    def __init__(self):
        self._heap = []
        self._seq = 0
        self._last = -math.inf

    def push(self, time, kind, satellite, cell=-1):
        if not math.isfinite(time) or time < 0:
            raise InvalidArgumentError(f"bad event time {time!r}")
        if kind not in (_CAPTURE, _CONTACT):
            raise InvalidArgumentError(f"unknown event kind {kind!r}")
        heapq.heappush(
            self._heap,
            (float(time), int(kind), int(satellite), int(cell), self._seq),
        )
        self._seq += 1

    def pop(self):
        time, kind, satellite, cell, _ = heapq.heappop(self._heap)
        if time < self._last:
            raise InvalidArgumentError("event time regressed")
        self._last = time
        return time, kind, satellite, cell

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)


def _revisit_periods(config: ScenarioConfig):
    n = config.satellite_count
    r = config.revisit_days
    if r is None:
        return [
            float(_rng(config.seed, _REVISIT_TAG, s).uniform(10.0, 15.0))
            for s in range(n)
        ]
    if isinstance(r, (int, float)):
        return [float(r)] * n
    return [float(x) for x in r]


def _capture_phases(config: ScenarioConfig, periods):
    n = config.satellite_count
    p = config.phase_days
    if p == "staggered":
        return [s * periods[s] / n for s in range(n)]
    if p == "random":
        return [
            float(_rng(config.seed, _PHASE_TAG, s).uniform(0.0, periods[s]))
            for s in range(n)
        ]
    return [float(x) for x in p]


def _build_schedule(config: ScenarioConfig):
    """Per-satellite capture (time, cell) and contact time tables."""
    n = config.satellite_count
    periods = _revisit_periods(config)
    phases = _capture_phases(config, periods)
    captures = [[] for _ in range(n)]
    if config.capture_times is not None:
        for t, sat, cell in config.capture_times:
            captures[sat].append((float(t), int(cell)))
    else:
        cells = config.world.cells
        for s in range(n):
            period = periods[s]
            for cell in range(cells):
                t = phases[s] + cell * period / cells
                while t <= config.duration_days:
                    captures[s].append((t, cell))
                    t += period
    for lst in captures:
        lst.sort()
    step = 1.0 / config.contacts_per_day
    contacts = []
    for s in range(n):
        times = []
        t = step * (s + 1) / (n + 1)
        while t <= config.duration_days:
            times.append(t)
            t += step
        contacts.append(times)
    return periods, phases, captures, contacts


def psnr(reference, test, valid=None) -> float:
    """Peak signal-to-noise ratio in dB for unit-range imagery.

    valid, when given, is a pixel mask; for multi-band arrays a 2-D mask
    applies to every band. Returns inf for a perfect match and nan when
    no pixel is eligible.
    """
    a = np.asarray(reference)
    b = np.asarray(test)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    d = np.subtract(a, b, dtype=np.float64)
    if valid is None:
        count = d.size
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape == d.shape:
            count = int(np.count_nonzero(valid))
        elif d.ndim == valid.ndim + 1 and d.shape[1:] == valid.shape:
            count = int(np.count_nonzero(valid)) * d.shape[0]
        else:
            raise InvalidArgumentError(
                f"mask {valid.shape} does not fit data {a.shape}"
            )
        d *= valid
    if count == 0:
        return math.nan
    flat = d.ravel()
    mse = float(np.dot(flat, flat)) / count
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


IMAGE_COLUMNS = (
    "satellite",
    "cell",
    "captured_at",
    "strategy",
    "dropped",
    "first_visit",
    "full_download",
    "reference_age_days",
    "tiles_total",
    "tiles_cloudy",
    "tiles_changed",
    "tiles_extra_not_observable",
    "tiles_coded",
    "downloaded_fraction",
    "truth_changed_tiles",
    "payload_bytes",
    "downloaded_at",
    "contact_id",
    "keep_layers",
    "bytes_sent",
    "psnr_db",
)

CONTACT_COLUMNS = (
    "contact_id",
    "satellite",
    "time",
    "payloads_sent",
    "payloads_deferred",
    "keep_layers",
    "downlink_bytes",
    "downlink_budget_bytes",
    "uplink_bytes",
    "uplink_budget_bytes",
    "uplink_diffs",
    "uplink_skipped",
)


@dataclass
class MetricsLedger:
    """Measurement rows for every capture and contact, plus aggregates.

    images rows are created at capture time and completed in place when
    the payload lands; a row whose downloaded_at is nan never came down.
    """

    images: list = field(default_factory=list)
    contacts: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def _image_rows(self, exclude_first=True, include_full=True):
        for row in self.images:
            if row["dropped"]:
                continue
            if exclude_first and row["first_visit"]:
                continue
            if not include_full and row["full_download"]:
                continue
            yield row

    def mean_reference_age(self, exclude_first: bool = True) -> float:
        """Mean capture-minus-reference age over captures that had one."""
        ages = [
            row["reference_age_days"]
            for row in self._image_rows(exclude_first)
            if math.isfinite(row["reference_age_days"])
        ]
        return math.nan if not ages else sum(ages) / len(ages)

    def mean_downloaded_fraction(
        self, exclude_first: bool = True, include_full: bool = True
    ) -> float:
        """Pooled coded-tile share of all tiles across captures."""
        num = den = 0
        for row in self._image_rows(exclude_first, include_full):
            num += row["tiles_coded"]
            den += row["tiles_total"]
        return math.nan if den == 0 else num / den

    def mean_psnr(self) -> float:
        vals = [
            row["psnr_db"]
            for row in self.images
            if not row["dropped"] and math.isfinite(row["psnr_db"])
        ]
        return math.nan if not vals else sum(vals) / len(vals)

    def downloaded_count(self) -> int:
        return sum(
            1 for row in self.images if math.isfinite(row["downloaded_at"])
        )

    def total_downlink_bytes(self) -> int:
        return sum(row["downlink_bytes"] for row in self.contacts)

    def total_uplink_bytes(self) -> int:
        return sum(row["uplink_bytes"] for row in self.contacts)

    def max_contact_downlink_bytes(self) -> int:
        return max((row["downlink_bytes"] for row in self.contacts), default=0)

    def max_contact_uplink_bytes(self) -> int:
        return max((row["uplink_bytes"] for row in self.contacts), default=0)

    def downlink_bytes_per_contact(self) -> float:
        if not self.contacts:
            return 0.0
        return self.total_downlink_bytes() / len(self.contacts)


@dataclass
class Satellite:
    """Onboard state: reference cache, pending downloads, storage."""

    sat_id: int
    references: ReferenceStore
    pending: deque
    last_full: dict
    storage: StorageLedger
    seen_cells: set


@dataclass
class _PendingCapture:
    image: Image
    payload: EncodedPayload
    row: dict
    cell_id: int
    captured_at: float
    full: bool
    ref_domain: str | None
    ref_sources: dict
    truth_clouds: np.ndarray


@dataclass
class SimResult:
    """Everything a finished campaign leaves behind."""

    config: ScenarioConfig
    ledger: MetricsLedger
    archive: GroundArchive
    satellites: list
    world: WorldModel

    def summary_row(self) -> dict:
        led = self.ledger
        dropped = sum(1 for r in led.images if r["dropped"])
        return {
            "strategy": self.config.strategy.value,
            "seed": self.config.seed,
            "satellite_count": self.config.satellite_count,
            "cells": self.config.world.cells,
            "duration_days": self.config.duration_days,
            "captures": len(led.images),
            "captures_dropped": dropped,
            "images_downloaded": led.downloaded_count(),
            "mean_reference_age_days": led.mean_reference_age(),
            "mean_downloaded_fraction": led.mean_downloaded_fraction(),
            "mean_psnr_db": led.mean_psnr(),
            "total_downlink_bytes": led.total_downlink_bytes(),
            "total_uplink_bytes": led.total_uplink_bytes(),
            "downlink_bytes_per_contact": led.downlink_bytes_per_contact(),
            "contacts": len(led.contacts),
            "violations": len(led.violations),
        }

    def checksum(self) -> str:
        """Stable digest of all measurement rows, for replay checks."""
        blob = json.dumps(
            {
                "images": self.ledger.images,
                "contacts": self.ledger.contacts,
                "violations": self.ledger.violations,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _store_reference(store: ReferenceStore, entry: ReferenceEntry):
    store._entries[(entry.cell_id, entry.band_id)] = entry


def _all_changed(change_map: ChangeMap) -> ChangeMap:
    """Same observability, but every observable tile marked CHANGED."""
    trits = change_map.trits.copy()
    trits[trits == UNCHANGED] = CHANGED
    return ChangeMap(
        trits=trits, fits=change_map.fits, tile_size=change_map.tile_size
    )


class _Simulation:
    def __init__(self, config: ScenarioConfig, world: WorldModel | None):
        self.config = config
        if world is None:
            world = WorldModel(config.world)
        elif world.config != config.world:
            raise InvalidArgumentError(
                "provided world was built from a different world config"
            )
        self.world = world
        self.grid = TileGrid(
            config.world.height, config.world.width, config.world.tile_size
        )
        self.sats = [
            Satellite(
                sat_id=s,
                references=ReferenceStore(),
                pending=deque(),
                last_full={},
                storage=StorageLedger(budget_bytes=config.storage_budget_bytes),
                seen_cells=set(),
            )
            for s in range(config.satellite_count)
        ]
        # gauge alignment at ingest exists to cancel capture-time
        # illumination; a world without illumination gets none, so the
        # fit cannot absorb genuine change into a phantom gauge
        self.archive = GroundArchive(
            tile_size=config.world.tile_size,
            max_captures_per_cell=config.archive_retention,
            normalize_gauge=config.world.illumination,
        )
        self.shadows = [ReferenceStore() for _ in range(config.satellite_count)]
        self.ledger = MetricsLedger()
        self.archived_by_time = {}
        self.raster_cache = {}
        self.uplink_rng = (
            _rng(config.seed, _UPLINK_TAG)
            if config.uplink_policy == "random"
            else None
        )
        self.tree = self._train_tree() if config.world.clouds else None
        (
            self.periods,
            self.phases,
            self.capture_table,
            self.contact_table,
        ) = _build_schedule(config)
        self.capture_times = [
            np.array([t for t, _ in caps]) for caps in self.capture_table
        ]
        self.capture_cells = [
            [cell for _, cell in caps] for caps in self.capture_table
        ]
        self.contact_id = 0

    # ------------------------------------------------------------- setup

    def _train_tree(self):
        """Fit the onboard cloud screen on a held-out labeled world."""
        base = self.config.world
        cfg = replace(
            base,
            seed=base.seed + _TREE_SEED_OFFSET,
            cells=1,
            height=min(base.height, 256),
            width=min(base.width, 256),
        )
        teacher = WorldModel(cfg)
        labeled = []
        cloudy = clear = 0
        t = 0.0
        while True:
            image, truth = generate_capture(teacher, 0, t)
            labeled.append((image, truth.cloud_tiles))
            cloudy += int(np.count_nonzero(truth.cloud_tiles))
            clear += int(truth.cloud_tiles.size - np.count_nonzero(truth.cloud_tiles))
            t += 3.0
            if len(labeled) >= 12 and cloudy >= 40 and clear >= 40:
                break
            if len(labeled) >= 48:
                break
        return train_cloud_tree(labeled, base.tile_size)

    # ----------------------------------------------------------- capture

    def _on_capture(self, t: float, sat_id: int, cell_id: int):
        cfg = self.config
        sat = self.sats[sat_id]
        image, truth = generate_capture(self.world, cell_id, t)
        if self.tree is not None:
            cloud = detect_clouds_onboard(image, self.tree)
        else:
            cloud = CloudMask(
                np.zeros((self.grid.rows, self.grid.cols), dtype=bool),
                tile_size=cfg.world.tile_size,
            )
        row = {name: math.nan for name in IMAGE_COLUMNS}
        row.update(
            satellite=sat_id,
            cell=cell_id,
            captured_at=float(t),
            strategy=cfg.strategy.value,
            dropped=0,
            first_visit=int(cell_id not in sat.seen_cells),
            full_download=0,
            tiles_total=int(self.grid.tile_count),
            tiles_cloudy=int(np.count_nonzero(cloud.tiles)),
            tiles_changed=0,
            tiles_extra_not_observable=0,
            tiles_coded=0,
            downloaded_fraction=0.0,
            truth_changed_tiles=-1,
            payload_bytes=0,
            contact_id=-1,
            keep_layers=0,
            bytes_sent=0,
        )
        self.ledger.images.append(row)
        if should_drop(cloud):
            row["dropped"] = 1
            return
        sat.seen_cells.add(cell_id)

        bands = image.band_count
        if cfg.strategy is Strategy.NONCLOUDY_ALL:
            refs = {}
            trits = np.where(cloud.tiles, NOT_OBSERVABLE, CHANGED)
            trits = np.broadcast_to(trits, (bands,) + trits.shape).copy()
            change_map = ChangeMap(
                trits=trits,
                fits=(IDENTITY_FIT,) * bands,
                tile_size=cfg.world.tile_size,
            )
            full = True
        else:
            refs = {}
            for b in range(bands):
                entry = sat.references.get(cell_id, b)
                if entry is not None:
                    refs[b] = entry
            change_map = detect_changes(image, refs, cloud, cfg.detection)
            guaranteed = schedule_guaranteed_download(
                sat.last_full.get(cell_id, -math.inf),
                t,
                cloud.coverage,
                period_days=cfg.guaranteed_period_days,
            )
            full = guaranteed or not refs
            if full and refs:
                change_map = _all_changed(change_map)

        include = None
        if cfg.download_unreferenced or full:
            include = ~cloud.tiles
        payload = encode(
            image, change_map, change_map.fits, cfg.rate, include
        )

        coded = np.zeros((self.grid.rows, self.grid.cols), dtype=bool)
        changed = np.zeros_like(coded)
        for sec in payload.bands:
            coded |= sec.coded
            changed |= sec.changed
        age = math.nan
        truth_changed = -1
        if 0 in refs:
            age = t - refs[0].source_captured_at
            truth_changed = int(
                np.count_nonzero(
                    self.world.tiles_with_events_between(
                        cell_id, refs[0].source_captured_at, t
                    )
                )
            )
        row.update(
            full_download=int(full),
            reference_age_days=age,
            tiles_changed=int(np.count_nonzero(changed)),
            tiles_extra_not_observable=int(np.count_nonzero(coded & ~changed)),
            tiles_coded=int(np.count_nonzero(coded)),
            downloaded_fraction=float(
                np.count_nonzero(coded) / self.grid.tile_count
            ),
            truth_changed_tiles=truth_changed,
            payload_bytes=int(payload.total_bytes),
        )

        domain = None
        if cfg.strategy is Strategy.EARTH_PLUS:
            domain = "archive"
        elif cfg.strategy in (Strategy.SAT_LOCAL, Strategy.FIXED_REF):
            domain = "capture"
        sat.pending.append(
            _PendingCapture(
                image=image,
                payload=payload,
                row=row,
                cell_id=cell_id,
                captured_at=float(t),
                full=full,
                ref_domain=domain,
                ref_sources={
                    b: e.source_captured_at for b, e in refs.items()
                },
                truth_clouds=truth.cloud_tiles,
            )
        )
        sat.storage.charge_capture(payload.total_bytes)

        if (
            cfg.strategy in (Strategy.SAT_LOCAL, Strategy.FIXED_REF)
            and cloud.coverage < REFERENCE_CLOUD_BOUND
        ):
            self._store_own_reference(sat, image, cloud, cell_id, t)
        if full:
            sat.last_full[cell_id] = float(t)

    def _store_own_reference(self, sat, image, cloud, cell_id, t):
        """Keep this capture, downsampled, as the satellite's reference."""
        cfg = self.config
        factor = cfg.detection.reference_downsample
        clear_px = cloud.clear_pixels(image.height, image.width)
        whole = downsample_mask_all(clear_px, factor)
        for band in image.bands:
            if (
                cfg.strategy is Strategy.FIXED_REF
                and sat.references.get(cell_id, band.band_id) is not None
            ):
                continue
            samples = downsample(band, factor).samples.copy()
            samples[~whole] = _MISSING_CELL
            _store_reference(
                sat.references,
                ReferenceEntry(
                    cell_id=cell_id,
                    band_id=band.band_id,
                    raster=Band(band.band_id, samples),
                    source_captured_at=float(t),
                    uploaded_at=float(t),
                ),
            )
        sat.storage.set_reference_bytes(sat.references.total_bytes())

    # ----------------------------------------------------------- contact

    def _on_contact(self, t: float, sat_id: int):
        cfg = self.config
        sat = self.sats[sat_id]
        contact_id = self.contact_id
        self.contact_id += 1
        budget = cfg.downlink_budget_bytes
        layers = cfg.rate.layers
        keep = layers
        if sat.pending:
            # refinement layers are dropped uniformly across the whole
            # queue; whatever still cannot fit defers FIFO to the next pass
            for k in range(layers, 0, -1):
                total = 0
                for rec in sat.pending:
                    total += truncate_layers(rec.payload, k).total_bytes
                    if total > budget:
                        break
                if total <= budget:
                    keep = k
                    break
            else:
                keep = 1
        sent = 0
        used = 0
        while sat.pending:
            rec = sat.pending[0]
            trimmed = truncate_layers(rec.payload, keep)
            nbytes = trimmed.total_bytes
            if used + nbytes > budget:
                break
            sat.pending.popleft()
            used += nbytes
            sat.storage.release_capture(rec.payload.total_bytes)
            self._deliver(sat_id, rec, trimmed, t, contact_id, keep, nbytes)
            sent += 1

        uplink_bytes = 0
        diffs = skipped = 0
        if cfg.strategy is Strategy.EARTH_PLUS:
            upcoming = self._upcoming_cells(sat_id, t)
            if upcoming:
                plan = plan_uplink(
                    contact_id,
                    upcoming,
                    self.archive,
                    self.shadows[sat_id],
                    now=t,
                    budget_bytes=cfg.uplink_budget_bytes,
                    reference_downsample=cfg.detection.reference_downsample,
                    policy=cfg.uplink_policy,
                    rng=self.uplink_rng,
                    raster_cache=self.raster_cache,
                )
                for diff in plan.diffs:
                    apply_diff(self.shadows[sat_id], diff, uploaded_at=t)
                    apply_diff(sat.references, diff, uploaded_at=t)
                uplink_bytes = plan.total_bytes
                diffs = len(plan.diffs)
                skipped = len(plan.skipped)
                if plan.diffs:
                    sat.storage.set_reference_bytes(
                        sat.references.total_bytes()
                    )

        if used > budget or uplink_bytes > cfg.uplink_budget_bytes:
            self.ledger.violations.append(
                {
                    "time": float(t),
                    "satellite": sat_id,
                    "kind": "link-budget",
                    "detail": f"downlink {used} uplink {uplink_bytes}",
                }
            )
        if sent:
            self._prune_priors()
        self.ledger.contacts.append(
            {
                "contact_id": contact_id,
                "satellite": sat_id,
                "time": float(t),
                "payloads_sent": sent,
                "payloads_deferred": len(sat.pending),
                "keep_layers": keep if sent else layers,
                "downlink_bytes": int(used),
                "downlink_budget_bytes": int(budget),
                "uplink_bytes": int(uplink_bytes),
                "uplink_budget_bytes": int(cfg.uplink_budget_bytes),
                "uplink_diffs": diffs,
                "uplink_skipped": skipped,
            }
        )

    def _deliver(self, sat_id, rec, payload, t, contact_id, keep, nbytes):
        """Reconstruct, score, and archive one downlinked capture."""
        cell = rec.cell_id
        h, w = rec.image.height, rec.image.width
        prior_bands = []
        for sec in payload.bands:
            src = rec.ref_sources.get(sec.band_id)
            arch = None
            if src is not None:
                arch = self.archived_by_time.get((cell, src))
                if arch is None:
                    self.ledger.violations.append(
                        {
                            "time": float(t),
                            "satellite": sat_id,
                            "kind": "missing-prior",
                            "detail": (
                                f"cell {cell} band {sec.band_id} source {src}"
                            ),
                        }
                    )
            if arch is None:
                prior_bands.append(np.zeros((h, w), dtype=np.float32))
                continue
            if rec.ref_domain == "capture" and arch.gauges:
                # the onboard reference was cut from the raw capture, but
                # the archive stores that capture gauge-normalized; chain
                # the two linear maps so the model lands in archive gauge
                fit = arch.gauges[sec.band_id]
                k0 = sec.k
                sec.k = k0 * fit.k
                sec.d = k0 * fit.d + sec.d
            prior_bands.append(arch.image.bands[sec.band_id].samples)
        prior = Image(
            cell,
            rec.captured_at,
            [Band(i, arr) for i, arr in enumerate(prior_bands)],
        )
        recon = reconstruct(payload, prior)
        original = np.stack([b.samples for b in rec.image.bands])
        rebuilt = np.stack([b.samples for b in recon.image.bands])
        valid = recon.valid.all(axis=0)
        quality = psnr(original, rebuilt, valid)

        ground_clouds = redetect_clouds_ground(
            recon.image, rec.truth_clouds, self.config.world.tile_size
        )
        entry = self.archive.ingest(
            recon.image,
            ground_clouds,
            source_satellite=sat_id,
            full_download=rec.full,
            valid=recon.valid,
        )
        self.archived_by_time[(cell, rec.captured_at)] = entry
        rec.row.update(
            downloaded_at=float(t),
            contact_id=contact_id,
            keep_layers=keep,
            bytes_sent=int(nbytes),
            psnr_db=quality,
        )

    def _upcoming_cells(self, sat_id, t):
        """Cells this satellite captures before its next contact."""
        contacts = self.contact_table[sat_id]
        i = bisect.bisect_right(contacts, t)
        if i < len(contacts):
            horizon = contacts[i]
        else:
            horizon = t + 1.0 / self.config.contacts_per_day
        times = self.capture_times[sat_id]
        lo = int(np.searchsorted(times, t, side="right"))
        hi = int(np.searchsorted(times, horizon, side="right"))
        return sorted(set(self.capture_cells[sat_id][lo:hi]))

    def _prune_priors(self):
        """Forget archived images nothing can need as a prior any more.

        Kept are images some onboard reference or queued payload was cut
        from, plus whatever the archive itself still retains - those can
        become uplinked references at any later contact.
        """
        needed = set()
        for sat in self.sats:
            for entry in sat.references.entries():
                needed.add((entry.cell_id, entry.source_captured_at))
            for rec in sat.pending:
                for src in rec.ref_sources.values():
                    if src is not None:
                        needed.add((rec.cell_id, src))
        for cell in self.archive.cells():
            for entry in self.archive.captures(cell):
                needed.add((cell, entry.captured_at))
        for key in list(self.archived_by_time):
            if key not in needed:
                del self.archived_by_time[key]

    # --------------------------------------------------------------- run

    def run(self) -> SimResult:
        queue = EventQueue()
        for s, caps in enumerate(self.capture_table):
            for t, cell in caps:
                queue.push(t, _CAPTURE, s, cell)
        for s, times in enumerate(self.contact_table):
            for t in times:
                queue.push(t, _CONTACT, s)
        try:
            while queue:
                t, kind, sat, cell = queue.pop()
                if kind == _CAPTURE:
                    self._on_capture(t, sat, cell)
                else:
                    self._on_contact(t, sat)
        except StorageBudgetError as err:
            self.ledger.violations.append(
                {
                    "time": math.nan,
                    "satellite": -1,
                    "kind": "storage-budget",
                    "detail": str(err),
                }
            )
            err.ledger = self.ledger
            raise
        return SimResult(
            config=self.config,
            ledger=self.ledger,
            archive=self.archive,
            satellites=self.sats,
            world=self.world,
        )


def run(config: ScenarioConfig, world: WorldModel | None = None) -> SimResult:
    """Simulate one campaign end to end.

    Returns the full measurement ledger plus the final ground archive and
    onboard states. Both link budgets hold on every contact by
    construction (truncation and deferral downlink-side, plan admission
    uplink-side); exceeding the onboard storage budget is a hard failure
    that raises StorageBudgetError with the ledger so far attached as
    err.ledger.
    """
    return _Simulation(config, world).run()


# ------------------------------------------------------------ experiments


def scripted_world(config: WorldConfig, cell_events: dict) -> WorldModel:
    """World whose change events are stated instead of drawn.

    cell_events maps cell id to a list of ChangeEvent. Build the config
    with change_rate=0 so no Poisson arrivals mix in.
    """
    world = WorldModel(config)
    for cell, events in cell_events.items():
        stream = world._cell_stream(cell)
        stream.events.extend(sorted(events, key=lambda e: e.time))
        stream.clock = math.inf
    return world


def _tile_block_event(grid: TileGrid, t, r0, r1, c0, c1, delta) -> ChangeEvent:
    ts = grid.tile_size
    return ChangeEvent(
        time=float(t),
        y0=r0 * ts,
        x0=c0 * ts,
        height=(r1 - r0 + 1) * ts,
        width=(c1 - c0 + 1) * ts,
        delta=float(delta),
    )


def golden_schedule_scenario(strategy: Strategy):
    """Three staggered satellites, one cell, hand-placed changes.

    Captures fall on days 1/11/21 (first pass) and 31/41/51 (second
    pass); whole-tile repaints land on days 5, 15, and 35 covering 7, 4,
    and 9 of the 20 tiles. Ignoring each satellite's bootstrap pass, a
    satellite differencing against its own previous capture sees a
    30-day-old reference and 55% of tiles changed, while shared
    references make that 10 days and 15%. The numbers are exact, so
    tests can compare with == rather than a tolerance.

    Returns (config, world) ready for run(config, world).
    """
    wcfg = WorldConfig(
        seed=0,
        cells=1,
        height=256,
        width=320,
        bands=1,
        change_rate=0.0,
        illumination=False,
        clouds=False,
    )
    grid = TileGrid(wcfg.height, wcfg.width, wcfg.tile_size)
    events = [
        # day 5: tiles 13..19 (7 tiles of the 4x5 grid)
        _tile_block_event(grid, 5.0, 2, 2, 3, 4, 0.1),
        _tile_block_event(grid, 5.0, 3, 3, 0, 4, 0.1),
        # day 15: tiles 9..12
        _tile_block_event(grid, 15.0, 1, 1, 4, 4, 0.1),
        _tile_block_event(grid, 15.0, 2, 2, 0, 2, 0.1),
        # day 35: tiles 0..8
        _tile_block_event(grid, 35.0, 0, 0, 0, 4, 0.1),
        _tile_block_event(grid, 35.0, 1, 1, 0, 3, 0.1),
    ]
    world = scripted_world(wcfg, {0: events})
    config = ScenarioConfig(
        world=wcfg,
        satellite_count=3,
        duration_days=60.0,
        revisit_days=30.0,
        strategy=strategy,
        rate=RateConfig(4.0),
        # the reference grid matches the tile grid and the gauge is pinned
        # to identity, so detection is exact and the counts below are too
        detection=DetectionConfig(reference_downsample=64, fit_gauge=False),
        guaranteed_period_days=math.inf,
        capture_times=(
            (1.0, 0, 0),
            (11.0, 1, 0),
            (21.0, 2, 0),
            (31.0, 0, 0),
            (41.0, 1, 0),
            (51.0, 2, 0),
        ),
        seed=0,
    )
    return config, world


def reference_age_experiment(
    satellite_counts,
    period_days: float = 12.0,
    duration_days: float = 1440.0,
    clear_probability: float = 1.0,
    seeds=(0,),
    burn_in_days: float | None = None,
):
    """Reference availability by constellation size, schedule-only.

    At every capture instant after burn-in this measures the age of the
    newest preceding cloud-free capture from the same satellite (local)
    and from any satellite (constellation). No imagery is generated.
    With even staggering and certain clear skies the constellation age
    is exactly period/N against a local age of period; with clear
    probability q the waiting times turn geometric and the means
    approach period/q and period/(N q).

    Returns one row per (satellite_count, seed) with measured means and
    the analytic values alongside.
    """
    if not 0.0 < clear_probability <= 1.0:
        raise InvalidArgumentError("clear probability must be in (0, 1]")
    if not period_days > 0:
        raise InvalidArgumentError("period must be positive")
    if burn_in_days is None:
        burn_in_days = 10.0 * period_days / clear_probability
    if duration_days <= burn_in_days:
        raise InvalidArgumentError("duration must extend past burn-in")
    rows = []
    for n in satellite_counts:
        if n < 1:
            raise InvalidArgumentError("need at least one satellite")
        for seed in seeds:
            merged = []
            for s in range(n):
                phase = s * period_days / n
                count = int((duration_days - phase) // period_days) + 1
                clear_draws = (
                    _rng(seed, _AGE_TAG, n, s).random(count)
                    < clear_probability
                )
                for k in range(count):
                    merged.append(
                        (phase + k * period_days, s, bool(clear_draws[k]))
                    )
            merged.sort()
            last_any = math.nan
            last_own = [math.nan] * n
            local_ages = []
            shared_ages = []
            for t, s, clear in merged:
                if (
                    t >= burn_in_days
                    and math.isfinite(last_own[s])
                    and math.isfinite(last_any)
                ):
                    local_ages.append(t - last_own[s])
                    shared_ages.append(t - last_any)
                if clear:
                    last_own[s] = t
                    last_any = t
            rows.append(
                {
                    "satellite_count": int(n),
                    "seed": int(seed),
                    "samples": len(local_ages),
                    "local_mean_age_days": (
                        math.nan
                        if not local_ages
                        else sum(local_ages) / len(local_ages)
                    ),
                    "constellation_mean_age_days": (
                        math.nan
                        if not shared_ages
                        else sum(shared_ages) / len(shared_ages)
                    ),
                    "local_analytic_days": period_days / clear_probability,
                    "constellation_analytic_days": period_days
                    / (n * clear_probability),
                }
            )
    return rows


def compression_vs_constellation(
    satellite_counts,
    world: WorldConfig | None = None,
    period_days: float = 12.5,
    duration_days: float = 1080.0,
    clear_probability: float = 1.0 / 3.0,
    seeds=(0, 1, 2, 3, 4, 5, 6, 7),
    burn_in_days: float = 120.0,
):
    """Compression ratio versus constellation size, from truth bookkeeping.

    Replays the staggered capture schedule against the world's change
    process: at every clear capture the changed fraction is the share of
    tiles touched by change events since the newest preceding clear
    capture, i.e. against the reference a shared-reference constellation
    would difference with. Cloudiness is a whole-capture Bernoulli draw.
    The compression ratio is the reciprocal of the pooled mean changed
    fraction - a 10% changed area reads as 10x. No rasters are built, so
    sweeping constellation sizes over simulated years stays cheap.
    """
    if not 0.0 < clear_probability <= 1.0:
        raise InvalidArgumentError("clear probability must be in (0, 1]")
    base = world if world is not None else WorldConfig()
    rows = []
    for n in satellite_counts:
        if n < 1:
            raise InvalidArgumentError("need at least one satellite")
        num = 0
        den = 0
        for seed in seeds:
            wcfg = replace(base, seed=base.seed + 7919 * seed + 1)
            model = WorldModel(wcfg)
            tiles = model.grid.tile_count
            merged = []
            for s in range(n):
                phase = s * period_days / n
                count = int((duration_days - phase) // period_days) + 1
                clear_draws = (
                    _rng(seed, _RATIO_TAG, n, s).random(count)
                    < clear_probability
                )
                for k in range(count):
                    merged.append(
                        (phase + k * period_days, s, bool(clear_draws[k]))
                    )
            merged.sort()
            last_clear = math.nan
            for t, _, clear in merged:
                if not clear:
                    continue
                if t >= burn_in_days and math.isfinite(last_clear):
                    changed = model.tiles_with_events_between(
                        0, last_clear, t
                    )
                    num += int(np.count_nonzero(changed))
                    den += tiles
                last_clear = t
        fraction = math.nan if den == 0 else num / den
        rows.append(
            {
                "satellite_count": int(n),
                "samples": den,
                "mean_changed_fraction": fraction,
                "compression_ratio": (
                    math.inf if fraction == 0 else 1.0 / fraction
                ),
            }
        )
    return rows


def downlink_quality_tradeoff(
    base: ScenarioConfig,
    gammas=(0.25, 0.5, 1.0, 2.0),
    strategies=(
        Strategy.EARTH_PLUS,
        Strategy.FIXED_REF,
        Strategy.NONCLOUDY_ALL,
    ),
):
    """Rate-quality frontier per strategy over a shared campaign.

    Runs the same scenario once per (strategy, gamma) and reports the
    mean PSNR of downloaded images against the downlink bytes that
    bought it.
    """
    rows = []
    for strategy in strategies:
        for gamma in gammas:
            cfg = replace(
                base,
                strategy=strategy,
                rate=replace(base.rate, gamma=float(gamma)),
            )
            result = run(cfg)
            led = result.ledger
            rows.append(
                {
                    "strategy": strategy.value,
                    "gamma": float(gamma),
                    "images_downloaded": led.downloaded_count(),
                    "mean_psnr_db": led.mean_psnr(),
                    "mean_downloaded_fraction": led.mean_downloaded_fraction(),
                    "total_downlink_bytes": led.total_downlink_bytes(),
                    "downlink_bytes_per_contact": led.downlink_bytes_per_contact(),
                }
            )
    return rows


def detection_quality_experiment(
    world: WorldConfig | None = None,
    period_days: float = 12.5,
    calibration_days: float = 365.0,
    evaluation_days: float = 365.0,
    detection: DetectionConfig | None = None,
    miss_budget: float = 0.01,
    fp_budget: float = 0.01,
    seed: int = 0,
):
    """Calibrate theta on one synthetic year, score it on a held-out one.

    A single satellite revisits one cell; each cloud-free capture becomes
    the reference for the next ones (raw capture downsampled, cloudy
    cells masked), mirroring how a satellite differencing against its own
    archive behaves. Truth labels are tiles whose full-resolution mean
    moved past the truth criterion. Calibration picks theta from the
    sweep grid under the given budgets on year one; the returned rates
    come from the structurally identical but freshly seeded year two.
    """
    base = world if world is not None else WorldConfig()
    cfg = detection if detection is not None else DetectionConfig()

    def year(seed_offset, days):
        wcfg = replace(base, seed=base.seed + seed_offset, cells=1)
        model = WorldModel(wcfg)
        samples = []
        reference = None
        ref_time = math.nan
        t = 0.5
        while t <= days:
            image, truth = generate_capture(model, 0, t)
            cloud = CloudMask(truth.cloud_tiles, tile_size=wcfg.tile_size)
            if reference is not None and not should_drop(cloud):
                truth_changed = model.changed_tiles_between(0, ref_time, t)
                samples.append((image, dict(reference), cloud, truth_changed))
            if cloud.coverage < REFERENCE_CLOUD_BOUND:
                clear_px = cloud.clear_pixels(image.height, image.width)
                whole = downsample_mask_all(
                    clear_px, cfg.reference_downsample
                )
                reference = {}
                for band in image.bands:
                    samples_ds = downsample(
                        band, cfg.reference_downsample
                    ).samples.copy()
                    samples_ds[~whole] = _MISSING_CELL
                    reference[band.band_id] = ReferenceEntry(
                        cell_id=0,
                        band_id=band.band_id,
                        raster=Band(band.band_id, samples_ds),
                        source_captured_at=float(t),
                        uploaded_at=float(t),
                    )
                ref_time = t
            t += period_days
        return samples

    history = year(_QUALITY_TAG + seed, calibration_days)
    theta = calibrate_theta(
        history, cfg, miss_budget=miss_budget, fp_budget=fp_budget
    )
    tuned = replace(cfg, theta=theta)

    held_out = year(_QUALITY_TAG + seed + 5077, evaluation_days)
    missed = 0
    changed_eligible = 0
    wrong = 0
    static_eligible = 0
    coded = 0
    observable_total = 0
    for image, references, cloud, truth_changed in held_out:
        cm = detect_changes(image, references, cloud, tuned)
        for b in range(cm.band_count):
            observable = cm.observable(b)
            changed = cm.changed(b)
            changed_eligible += int(np.count_nonzero(truth_changed & observable))
            missed += int(
                np.count_nonzero(truth_changed & (cm.trits[b] == UNCHANGED))
            )
            static_eligible += int(
                np.count_nonzero(~truth_changed & observable)
            )
            wrong += int(np.count_nonzero(~truth_changed & changed))
            coded += int(np.count_nonzero(changed))
            observable_total += int(np.count_nonzero(observable))
    return {
        "theta": float(theta),
        "calibration_samples": len(history),
        "evaluation_samples": len(held_out),
        "miss_rate": (
            math.nan if changed_eligible == 0 else missed / changed_eligible
        ),
        "false_positive_rate": (
            math.nan if static_eligible == 0 else wrong / static_eligible
        ),
        "downloaded_fraction": (
            math.nan if observable_total == 0 else coded / observable_total
        ),
    }
