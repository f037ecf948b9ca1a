"""Synthetic earth generator.

Each cell has fixed smoothed-noise terrain per band. Land change arrives
as one Poisson stream per cell; an event re-paints a rectangular block
with a new offset (assignments, not accumulation, so the process is
stationary over long horizons). Blocks are "large scale": their edges
snap to a coarse change grid, several tiles wide, so a block either
covers a grid cell completely or not at all. The stream rate is
normalized so that config.change_rate stays the expected per-tile rate
of criterion-level change. Illumination scales captures linearly per
capture; heavy cloud replaces pixels with a bright IR signature.
Everything is a pure function of (seed, cell, t).

Range bookkeeping, all deliberate:
  - visible scenes stay inside [0.145, 0.69] so clip(k*s + d) never
    actually clips for any admissible (k, d); illumination stays exactly
    linear and least-squares alignment can invert it.
  - terrain tops out at 0.55 while the default magnitude caps at 0.13,
    so an upward repaint never clips either and every covered pixel
    shifts by exactly delta; downward repaints are only drawn when the
    block floor leaves room.
  - the IR band is treated as thermal: no illumination, scene capped at
    0.85, cloud IR drawn from [0.90, 1.0]. The 0.05 gap is what makes a
    cheap IR threshold a >=99%-precision cloud detector.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .raster import (
    TILE_SIZE_DEFAULT,
    Band,
    Image,
    TileGrid,
    read_raster,
    tile_mean_abs_diff,
    write_raster,
)

__all__ = [
    "CaptureTruth",
    "ChangeEvent",
    "TRUTH_DIFF_CRITERION",
    "WorldConfig",
    "WorldModel",
    "generate_capture",
    "read_raster",
    "write_raster",
]

TRUTH_DIFF_CRITERION = 0.01

TERRAIN_VISIBLE_RANGE = (0.20, 0.55)
TERRAIN_IR_RANGE = (0.35, 0.60)
SCENE_VISIBLE_CLIP = (0.145, 0.69)
SCENE_IR_CLIP = (0.10, 0.85)
CLOUD_VISIBLE_RANGE = (0.60, 0.95)
CLOUD_IR_RANGE = (0.90, 1.0)
CHANGE_SIGN_PIVOT = 0.375

# stream tags keeping the per-purpose generators independent
_TERRAIN, _CHANGES, _ILLUM, _CLOUD = range(4)


def _stream(seed, cell, tag, *extra):
    return np.random.default_rng(np.random.SeedSequence((seed, cell, tag) + extra))


def _time_key(t: float) -> int:
    return int(np.float64(t).view(np.uint64))


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    cells: int = 1
    height: int = 512
    width: int = 512
    bands: int = 4
    tile_size: int = TILE_SIZE_DEFAULT
    change_rate: float = 0.0334
    change_magnitude: tuple = (0.08, 0.13)
    change_grid: int = 51
    change_extent: tuple = (2, 4)
    illumination: bool = True
    k_range: tuple = (0.7, 1.3)
    d_range: tuple = (-0.1, 0.1)
    clouds: bool = True
    clear_probability: float = 1.0 / 3.0
    cloud_coverage: tuple = (0.05, 1.0)

    def __post_init__(self):
        if self.cells < 1:
            raise InvalidArgumentError("need at least one cell")
        if self.height < 1 or self.width < 1 or self.tile_size < 1:
            raise InvalidArgumentError("cell dimensions must be positive")
        if self.bands < 1:
            raise InvalidArgumentError("need at least one band")
        if self.clouds and self.bands < 2:
            raise InvalidArgumentError("the cloud process needs an IR band")
        if self.change_rate < 0:
            raise InvalidArgumentError("change_rate cannot be negative")
        if not 0 <= self.clear_probability <= 1:
            raise InvalidArgumentError("clear_probability must be in [0, 1]")
        lo, hi = self.change_magnitude
        if not 0 < lo <= hi:
            raise InvalidArgumentError("bad change magnitude range")
        if self.change_grid < 1:
            raise InvalidArgumentError("change_grid must be positive")
        lo, hi = self.change_extent
        if not 1 <= lo <= hi:
            raise InvalidArgumentError("bad change extent range")

    @property
    def ir_band(self):
        """Index of the IR band, or None when there is only one band."""
        return self.bands - 1 if self.bands >= 2 else None


@dataclass(frozen=True)
class ChangeEvent:
    """One repaint: a pixel rectangle gets offset by delta from then on."""

    time: float
    y0: int
    x0: int
    height: int
    width: int
    delta: float

    @property
    def slices(self):
        return (
            slice(self.y0, self.y0 + self.height),
            slice(self.x0, self.x0 + self.width),
        )


@dataclass(frozen=True)
class CaptureTruth:
    """Generator ground truth for one capture."""

    cell_id: int
    captured_at: float
    cloud_tiles: np.ndarray
    k: float
    d: float
    change_counts: np.ndarray

    @property
    def cloud_coverage(self) -> float:
        return float(np.count_nonzero(self.cloud_tiles) / self.cloud_tiles.size)

    @property
    def clear(self) -> bool:
        return not self.cloud_tiles.any()


class _ChangeStream:
    """Lazily extended Poisson arrival sequence for one cell."""

    def __init__(self, rng, rate):
        self.rng = rng
        self.events = []
        self.clock = math.inf if rate == 0 else float(rng.exponential(1.0 / rate))
        self.rate = rate


class WorldModel:
    def __init__(self, config: WorldConfig):
        self.config = config
        self.grid = TileGrid(config.height, config.width, config.tile_size)
        self._terrain = {}
        self._streams = {}
        self._event_rate = None
        self._scene_cache = {}
        self._cloud_cache = {}

    # ------------------------------------------------------------ terrain

    def terrain(self, cell: int):
        """Fixed per-band base rasters. Callers must not mutate them."""
        self._check_cell(cell)
        got = self._terrain.get(cell)
        if got is None:
            got = []
            for band in range(self.config.bands):
                lo, hi = self._terrain_range(band)
                rng = _stream(self.config.seed, cell, _TERRAIN, band)
                got.append(
                    _terrain_band(rng, self.config.height, self.config.width, lo, hi)
                )
            self._terrain[cell] = got
        return got

    def _terrain_range(self, band):
        if band == self.config.ir_band:
            return TERRAIN_IR_RANGE
        return TERRAIN_VISIBLE_RANGE

    def _scene_clip(self, band):
        if band == self.config.ir_band:
            return SCENE_IR_CLIP
        return SCENE_VISIBLE_CLIP

    # ------------------------------------------------------------- change

    def _block_geometry(self):
        g = self.config.change_grid
        rows_c = -(-self.config.height // g)
        cols_c = -(-self.config.width // g)
        return g, rows_c, cols_c

    def _mean_changed_tiles_per_event(self):
        """Expected number of tiles one event pushes past the criterion.

        Exact enumeration over block geometries (uniform extents and
        positions) and the magnitude distribution. Used to normalize the
        event rate so change_rate keeps its per-tile meaning.
        """
        cfg = self.config
        g, rows_c, cols_c = self._block_geometry()
        lo_e, hi_e = cfg.change_extent
        mag_lo, mag_hi = cfg.change_magnitude
        n_ext = hi_e - lo_e + 1
        tiles_y = [self.grid.tile_slices(r, 0)[0] for r in range(self.grid.rows)]
        tiles_x = [self.grid.tile_slices(0, c)[1] for c in range(self.grid.cols)]

        def axis_cases(count, length, tile_ivs):
            """(prob, per-tile overlap lengths) for one axis."""
            cases = []
            for ext in range(lo_e, hi_e + 1):
                k = min(ext, count)
                positions = count - k + 1
                for i0 in range(positions):
                    a0 = g * i0
                    a1 = min(g * (i0 + k), length)
                    ov = [
                        max(0, min(a1, s.stop) - max(a0, s.start))
                        for s in tile_ivs
                    ]
                    cases.append((1.0 / (n_ext * positions), ov))
            return cases

        total = 0.0
        for py, ovy in axis_cases(rows_c, cfg.height, tiles_y):
            for px, ovx in axis_cases(cols_c, cfg.width, tiles_x):
                w = py * px
                for r, oy in enumerate(ovy):
                    if not oy:
                        continue
                    ys, _ = self.grid.tile_slices(r, 0)
                    th = ys.stop - ys.start
                    for c, ox in enumerate(ovx):
                        if not ox:
                            continue
                        _, xs = self.grid.tile_slices(r, c)
                        area = th * (xs.stop - xs.start)
                        need = TRUTH_DIFF_CRITERION * area / (oy * ox)
                        if mag_hi <= need:
                            continue
                        if mag_hi == mag_lo:
                            total += w
                        else:
                            frac = (mag_hi - max(mag_lo, need)) / (mag_hi - mag_lo)
                            total += w * min(frac, 1.0)
        return total

    def _cell_stream(self, cell):
        st = self._streams.get(cell)
        if st is None:
            if self._event_rate is None:
                lam = self.config.change_rate
                if lam == 0:
                    self._event_rate = 0.0
                else:
                    per_event = self._mean_changed_tiles_per_event()
                    scale = per_event if per_event > 0 else 1.0
                    self._event_rate = lam * self.grid.tile_count / scale
            rng = _stream(self.config.seed, cell, _CHANGES)
            st = _ChangeStream(rng, self._event_rate)
            self._streams[cell] = st
        return st

    def _extend_events(self, cell, t):
        st = self._cell_stream(cell)
        while st.clock <= t:
            st.events.append(self._draw_event(cell, st, st.clock))
            st.clock += float(st.rng.exponential(1.0 / st.rate))

    def _draw_event(self, cell, st, when):
        cfg = self.config
        g, rows_c, cols_c = self._block_geometry()
        lo_e, hi_e = cfg.change_extent
        ky = min(int(st.rng.integers(lo_e, hi_e + 1)), rows_c)
        kx = min(int(st.rng.integers(lo_e, hi_e + 1)), cols_c)
        i0 = int(st.rng.integers(0, rows_c - ky + 1))
        j0 = int(st.rng.integers(0, cols_c - kx + 1))
        y0, y1 = g * i0, min(g * (i0 + ky), cfg.height)
        x0, x1 = g * j0, min(g * (j0 + kx), cfg.width)
        magnitude = float(st.rng.uniform(*cfg.change_magnitude))
        terrain = self.terrain(cell)
        sign = 1.0
        if float(terrain[0][y0:y1, x0:x1].mean()) > CHANGE_SIGN_PIVOT:
            # paint downward only when every band keeps clear of its floor
            if all(
                float(terrain[b][y0:y1, x0:x1].min()) - magnitude
                >= self._scene_clip(b)[0]
                for b in range(cfg.bands)
            ):
                sign = -1.0
        return ChangeEvent(
            time=float(when),
            y0=y0,
            x0=x0,
            height=y1 - y0,
            width=x1 - x0,
            delta=sign * magnitude,
        )

    def events_between(self, cell: int, t0: float, t1: float):
        """Change events with t0 < time <= t1, in time order."""
        self._check_cell(cell)
        self._extend_events(cell, t1)
        return [
            ev
            for ev in self._streams[cell].events
            if t0 < ev.time <= t1
        ]

    def _event_tile_box(self, ev):
        ts = self.config.tile_size
        r0, r1 = ev.y0 // ts, (ev.y0 + ev.height - 1) // ts
        c0, c1 = ev.x0 // ts, (ev.x0 + ev.width - 1) // ts
        return r0, r1, c0, c1

    def tiles_with_events_between(self, cell: int, t0: float, t1: float):
        """Tiles touched by at least one event, however slightly."""
        flags = np.zeros((self.grid.rows, self.grid.cols), dtype=bool)
        for ev in self.events_between(cell, t0, t1):
            r0, r1, c0, c1 = self._event_tile_box(ev)
            flags[r0 : r1 + 1, c0 : c1 + 1] = True
        return flags

    def change_counts(self, cell: int, t: float):
        """Cumulative count of events touching each tile up to t."""
        self._check_cell(cell)
        self._extend_events(cell, t)
        counts = np.zeros((self.grid.rows, self.grid.cols), dtype=np.int64)
        for ev in self._streams[cell].events:
            if ev.time <= t:
                r0, r1, c0, c1 = self._event_tile_box(ev)
                counts[r0 : r1 + 1, c0 : c1 + 1] += 1
        return counts

    # -------------------------------------------------------------- scene

    def true_scene(self, cell: int, t: float):
        """Accumulated cloud-free, illumination-free scene at time t.

        Returns one float32 array per band; callers must not mutate.
        """
        self._check_cell(cell)
        if t < 0:
            raise InvalidArgumentError("time cannot be negative")
        key = (cell, t)
        got = self._scene_cache.get(key)
        if got is not None:
            return got
        self._extend_events(cell, t)
        delta = np.zeros((self.config.height, self.config.width), dtype=np.float32)
        for ev in self._streams[cell].events:
            if ev.time <= t:
                delta[ev.slices] = np.float32(ev.delta)
        scene = []
        for band, base in enumerate(self.terrain(cell)):
            lo, hi = self._scene_clip(band)
            scene.append(np.clip(base + delta, lo, hi).astype(np.float32))
        if len(self._scene_cache) >= 8:
            self._scene_cache.pop(next(iter(self._scene_cache)))
        self._scene_cache[key] = scene
        return scene

    def changed_tiles_between(self, cell: int, t0: float, t1: float):
        """Truth labels: any band's full-res tile mean moved past 0.01."""
        s0 = self.true_scene(cell, t0)
        s1 = self.true_scene(cell, t1)
        changed = np.zeros((self.grid.rows, self.grid.cols), dtype=bool)
        for band in range(self.config.bands):
            diff = tile_mean_abs_diff(
                Band(band, s0[band]), Band(band, s1[band]), self.grid
            )
            changed |= diff > TRUTH_DIFF_CRITERION
        return changed

    # ------------------------------------------------- nuisance processes

    def illumination_at(self, cell: int, t: float):
        self._check_cell(cell)
        if not self.config.illumination:
            return 1.0, 0.0
        rng = _stream(self.config.seed, cell, _ILLUM, _time_key(t))
        k = float(rng.uniform(*self.config.k_range))
        d = float(rng.uniform(*self.config.d_range))
        return k, d

    def cloud_tiles(self, cell: int, t: float):
        tiles, _ = self._cloud_realization(cell, t)
        return tiles

    def _cloud_realization(self, cell, t):
        self._check_cell(cell)
        key = (cell, t)
        got = self._cloud_cache.get(key)
        if got is not None:
            return got
        rows, cols = self.grid.rows, self.grid.cols
        tiles = np.zeros((rows, cols), dtype=bool)
        fills = None
        if self.config.clouds:
            rng = _stream(self.config.seed, cell, _CLOUD, _time_key(t))
            if rng.random() >= self.config.clear_probability:
                target = max(
                    1,
                    round(
                        float(rng.uniform(*self.config.cloud_coverage))
                        * self.grid.tile_count
                    ),
                )
                chosen = self._cloud_rectangles(rng, rows, cols, target)
                for idx in chosen:
                    tiles[divmod(idx, cols)] = True
                fills = self._cloud_fills(rng, tiles)
        if len(self._cloud_cache) >= 8:
            self._cloud_cache.pop(next(iter(self._cloud_cache)))
        self._cloud_cache[key] = (tiles, fills)
        return tiles, fills

    def _cloud_rectangles(self, rng, rows, cols, target):
        """Union of random tile-aligned rectangles, trimmed to the target."""
        chosen = {}
        attempts = 0
        while len(chosen) < target and attempts < 1000:
            attempts += 1
            th = int(rng.integers(1, rows + 1))
            tw = int(rng.integers(1, cols + 1))
            y0 = int(rng.integers(0, rows - th + 1))
            x0 = int(rng.integers(0, cols - tw + 1))
            for r in range(y0, y0 + th):
                for c in range(x0, x0 + tw):
                    if len(chosen) == target:
                        break
                    chosen.setdefault(r * cols + c, None)
        for idx in range(rows * cols):
            if len(chosen) == target:
                break
            chosen.setdefault(idx, None)
        return list(chosen)

    def _cloud_fills(self, rng, tiles):
        t = self.config.tile_size
        px = np.repeat(np.repeat(tiles, t, axis=0), t, axis=1)
        px = px[: self.config.height, : self.config.width]
        n = int(np.count_nonzero(px))
        fills = []
        for band in range(self.config.bands):
            lo, hi = (
                CLOUD_IR_RANGE if band == self.config.ir_band else CLOUD_VISIBLE_RANGE
            )
            fills.append(rng.uniform(lo, hi, n).astype(np.float32))
        return fills

    def _check_cell(self, cell):
        if not 0 <= cell < self.config.cells:
            raise InvalidArgumentError(
                f"cell {cell} outside 0..{self.config.cells - 1}"
            )


def generate_capture(world: WorldModel, cell: int, t: float):
    """One synthetic capture plus its ground truth."""
    if t < 0:
        raise InvalidArgumentError("capture time cannot be negative")
    cfg = world.config
    scene = world.true_scene(cell, t)
    k, d = world.illumination_at(cell, t)
    cloud_tiles, fills = world._cloud_realization(cell, t)
    samples = []
    for band, base in enumerate(scene):
        if cfg.illumination and band != cfg.ir_band:
            vals = np.clip(k * base.astype(np.float64) + d, 0.0, 1.0)
            samples.append(vals.astype(np.float32))
        else:
            samples.append(base.copy())
    if fills is not None:
        t_px = cfg.tile_size
        px = np.repeat(np.repeat(cloud_tiles, t_px, axis=0), t_px, axis=1)
        px = px[: cfg.height, : cfg.width]
        for band in range(cfg.bands):
            samples[band][px] = fills[band]
    image = Image(cell, float(t), [Band(b, s) for b, s in enumerate(samples)])
    truth = CaptureTruth(
        cell_id=cell,
        captured_at=float(t),
        cloud_tiles=cloud_tiles.copy(),
        k=k,
        d=d,
        change_counts=world.change_counts(cell, t),
    )
    return image, truth


def _bilinear(grid, h, w):
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    e = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + e * fy * fx


def _terrain_band(rng, h, w, lo, hi):
    """Two-octave value noise, normalized to exactly span [lo, hi]."""
    noise = 0.7 * _bilinear(rng.random((9, 9)), h, w)
    noise += 0.3 * _bilinear(rng.random((33, 33)), h, w)
    span = noise.max() - noise.min()
    if span == 0:
        return np.full((h, w), (lo + hi) / 2.0, dtype=np.float32)
    out = (noise - noise.min()) / span * (hi - lo) + lo
    return out.astype(np.float32)
