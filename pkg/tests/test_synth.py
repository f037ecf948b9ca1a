import math

import numpy as np
import pytest

from satref.errors import InvalidArgumentError
from satref.synth import (
    CLOUD_IR_RANGE,
    SCENE_IR_CLIP,
    TERRAIN_IR_RANGE,
    TERRAIN_VISIBLE_RANGE,
    TRUTH_DIFF_CRITERION,
    WorldConfig,
    WorldModel,
    generate_capture,
)


def static_config(**kw):
    base = dict(
        seed=5,
        cells=1,
        height=256,
        width=256,
        bands=2,
        change_rate=0.0,
        illumination=False,
        clouds=False,
    )
    base.update(kw)
    return WorldConfig(**base)


def images_equal(a, b):
    return all(
        np.array_equal(x.samples, y.samples) for x, y in zip(a.bands, b.bands)
    )


# -------------------------------------------------------------- stillness


def test_static_world_identical_captures():
    world = WorldModel(static_config())
    first, truth0 = generate_capture(world, 0, 0.0)
    later, truth1 = generate_capture(world, 0, 250.0)
    assert images_equal(first, later)
    assert truth0.k == 1.0 and truth0.d == 0.0
    assert truth0.clear and truth1.clear
    assert truth1.change_counts.sum() == 0


def test_determinism_and_query_order_independence():
    cfg = WorldConfig(seed=9, cells=2, height=256, width=256, bands=3,
                      change_rate=0.05)
    w1 = WorldModel(cfg)
    w2 = WorldModel(cfg)
    a_late, _ = generate_capture(w1, 1, 50.0)
    a_early, _ = generate_capture(w1, 1, 10.0)
    b_early, _ = generate_capture(w2, 1, 10.0)
    b_late, _ = generate_capture(w2, 1, 50.0)
    assert images_equal(a_late, b_late)
    assert images_equal(a_early, b_early)
    # repeated call is bit-identical too
    again, _ = generate_capture(w1, 1, 50.0)
    assert images_equal(a_late, again)


# ----------------------------------------------------------------- ranges


def test_terrain_spans_configured_ranges():
    world = WorldModel(static_config(bands=4))
    terrain = world.terrain(0)
    for band in range(3):
        lo, hi = TERRAIN_VISIBLE_RANGE
        assert terrain[band].min() == np.float32(lo)
        assert terrain[band].max() == np.float32(hi)
    lo, hi = TERRAIN_IR_RANGE
    assert terrain[3].min() == np.float32(lo)
    assert terrain[3].max() == np.float32(hi)


def test_capture_values_inside_unit_interval():
    cfg = WorldConfig(seed=3, cells=1, height=256, width=256, bands=4,
                      change_rate=0.2)
    world = WorldModel(cfg)
    for t in (0.0, 40.0, 90.0):
        img, _ = generate_capture(world, 0, t)
        img.validate_range()


def test_illumination_never_actually_clips():
    # with scenes held inside the designed range, k*s + d is linear
    cfg = WorldConfig(seed=11, cells=1, height=256, width=256, bands=2,
                      change_rate=0.3, clouds=False)
    world = WorldModel(cfg)
    for t in (5.0, 25.0, 125.0):
        img, truth = generate_capture(world, 0, t)
        scene = world.true_scene(0, t)
        raw = truth.k * scene[0].astype(np.float64) + truth.d
        assert raw.min() >= 0.0 and raw.max() <= 1.0
        assert np.array_equal(
            img.bands[0].samples, raw.astype(np.float32)
        )


def test_ir_band_is_illumination_free_and_capped():
    cfg = WorldConfig(seed=12, cells=1, height=256, width=256, bands=2,
                      change_rate=0.3, clouds=False)
    world = WorldModel(cfg)
    img, _ = generate_capture(world, 0, 80.0)
    scene = world.true_scene(0, 80.0)
    assert np.array_equal(img.bands[1].samples, scene[1])
    assert img.bands[1].samples.max() <= SCENE_IR_CLIP[1]


# ----------------------------------------------------------------- clouds


def find_cloudy_capture(world, cell=0, start=0.0):
    for i in range(200):
        t = start + float(i)
        tiles = world.cloud_tiles(cell, t)
        if tiles.any():
            return t, tiles
    raise AssertionError("no cloudy capture found")


def test_cloud_ir_signature():
    cfg = WorldConfig(seed=6, cells=1, height=256, width=256, bands=4,
                      change_rate=0.0, illumination=False)
    world = WorldModel(cfg)
    t, tiles = find_cloudy_capture(world)
    img, truth = generate_capture(world, 0, t)
    assert np.array_equal(truth.cloud_tiles, tiles)
    px = np.repeat(np.repeat(tiles, 64, 0), 64, 1)
    ir = img.bands[3].samples
    assert ir[px].min() >= CLOUD_IR_RANGE[0]
    assert ir[px].min() >= 0.85
    if (~px).any():
        assert ir[~px].max() <= SCENE_IR_CLIP[1]


def test_cloud_coverage_distribution():
    cfg = WorldConfig(seed=7, cells=1, height=256, width=256, bands=2,
                      change_rate=0.0, illumination=False)
    world = WorldModel(cfg)
    clear = 0
    coverages = []
    n = 300
    for i in range(n):
        tiles = world.cloud_tiles(0, float(i))
        if tiles.any():
            coverages.append(tiles.mean())
        else:
            clear += 1
    p_clear = clear / n
    # 3 sigma around the configured 1/3
    sigma = math.sqrt((1 / 3) * (2 / 3) / n)
    assert abs(p_clear - 1 / 3) <= 3 * sigma
    assert min(coverages) >= 0.05 - 1 / 16  # one-tile rounding slack
    assert max(coverages) <= 1.0


def test_cloudless_config_never_clouds():
    world = WorldModel(static_config())
    for i in range(50):
        assert not world.cloud_tiles(0, float(i)).any()


# ---------------------------------------------------------------- changes


def test_poisson_change_rate_fidelity():
    # change_rate is the per-tile rate of criterion-level change, so the
    # truly-changed fraction over dt must track 1 - exp(-rate*dt). One
    # event flips several tiles at once, which correlates tiles inside a
    # cell; the honest 3-sigma band comes from the spread of independent
    # per-cell fractions, not from a binomial count.
    rate = 0.05
    dt = 10.0
    cfg = WorldConfig(seed=8, cells=60, height=512, width=512, bands=2,
                      change_rate=rate, illumination=False, clouds=False)
    world = WorldModel(cfg)
    fractions = np.array([
        world.changed_tiles_between(cell, 0.0, dt).mean()
        for cell in range(cfg.cells)
    ])
    p_expected = 1.0 - math.exp(-rate * dt)
    sem = fractions.std(ddof=1) / math.sqrt(cfg.cells)
    assert abs(fractions.mean() - p_expected) <= 3 * sem


def test_event_timeline_is_stable_under_queries():
    cfg = WorldConfig(seed=13, cells=1, height=256, width=256, bands=2,
                      change_rate=0.1, illumination=False, clouds=False)
    w1 = WorldModel(cfg)
    w2 = WorldModel(cfg)
    late_first = w1.events_between(0, 0.0, 100.0)
    _ = w2.events_between(0, 0.0, 30.0)
    late_second = w2.events_between(0, 0.0, 100.0)
    assert late_first == late_second


def overlap_px(ev_slice, tile_slice):
    return max(0, min(ev_slice.stop, tile_slice.stop)
               - max(ev_slice.start, tile_slice.start))


def test_first_event_truth_matches_its_footprint():
    cfg = WorldConfig(seed=14, cells=1, height=256, width=256, bands=2,
                      change_rate=0.02, illumination=False, clouds=False)
    world = WorldModel(cfg)
    events = world.events_between(0, 0.0, 400.0)
    assert events, "expected at least one event in 400 days"
    ev = events[0]
    after = ev.time + 0.25
    assert world.events_between(0, 0.0, after) == [ev], "seed gives a lone event"
    changed = world.changed_tiles_between(0, 0.0, after)
    ys, xs = ev.slices
    strong = 0
    for r in range(world.grid.rows):
        for c in range(world.grid.cols):
            tys, txs = world.grid.tile_slices(r, c)
            area = (tys.stop - tys.start) * (txs.stop - txs.start)
            covered = overlap_px(ys, tys) * overlap_px(xs, txs)
            if covered == 0:
                assert not changed[r, c]
            elif covered * abs(ev.delta) >= 2 * TRUTH_DIFF_CRITERION * area:
                # at least twice the criterion: must be flagged
                assert changed[r, c]
                strong += 1
    assert strong, "event should dominate at least one tile"


def test_truth_criterion_subset_of_events():
    cfg = WorldConfig(seed=15, cells=4, height=256, width=256, bands=2,
                      change_rate=0.05, illumination=False, clouds=False)
    world = WorldModel(cfg)
    for cell in range(4):
        by_truth = world.changed_tiles_between(cell, 0.0, 30.0)
        by_events = world.tiles_with_events_between(cell, 0.0, 30.0)
        assert not (by_truth & ~by_events).any()


def test_event_blocks_snap_to_change_grid():
    cfg = WorldConfig(seed=16, cells=1, height=256, width=256, bands=2,
                      change_rate=0.1, illumination=False, clouds=False)
    world = WorldModel(cfg)
    g = cfg.change_grid
    events = world.events_between(0, 0.0, 100.0)
    assert events
    for ev in events:
        assert abs(ev.delta) >= 0.05
        assert abs(ev.delta) >= cfg.change_magnitude[0]
        # edges on the change grid, except where the image ends
        assert ev.y0 % g == 0 and ev.x0 % g == 0
        y1 = ev.y0 + ev.height
        x1 = ev.x0 + ev.width
        assert y1 % g == 0 or y1 == cfg.height
        assert x1 % g == 0 or x1 == cfg.width
        assert y1 <= cfg.height and x1 <= cfg.width
        # blocks are large scale: at least one full grid step per axis
        assert ev.height >= g and ev.width >= g


def test_repaint_shifts_covered_pixels_by_exactly_delta():
    cfg = WorldConfig(seed=19, cells=1, height=256, width=256, bands=2,
                      change_rate=0.02, illumination=False, clouds=False)
    world = WorldModel(cfg)
    events = world.events_between(0, 0.0, 400.0)
    assert events
    ev = events[0]
    s0 = world.true_scene(0, 0.0)
    s1 = world.true_scene(0, ev.time)
    ys, xs = ev.slices
    for band in range(cfg.bands):
        diff = s1[band].astype(np.float64) - s0[band].astype(np.float64)
        inside = diff[ys, xs]
        # headroom guarantees the clip is a no-op over the block
        assert np.allclose(inside, ev.delta, atol=1e-6)
        outside = diff.copy()
        outside[ys, xs] = 0.0
        assert np.array_equal(outside, np.zeros_like(outside))


def test_changed_fraction_grows_with_reference_age():
    cfg = WorldConfig(seed=17, cells=30, height=256, width=256, bands=2,
                      change_rate=0.02, illumination=False, clouds=False)
    world = WorldModel(cfg)
    fractions = []
    for age in (5.0, 20.0, 60.0):
        hits = 0
        total = 0
        for cell in range(cfg.cells):
            flags = world.changed_tiles_between(cell, 100.0 - age, 100.0)
            hits += int(flags.sum())
            total += flags.size
        fractions.append(hits / total)
    assert fractions[0] < fractions[1] < fractions[2]


# ------------------------------------------------------------- validation


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        WorldConfig(cells=0)
    with pytest.raises(InvalidArgumentError):
        WorldConfig(bands=1, clouds=True)
    with pytest.raises(InvalidArgumentError):
        WorldConfig(change_rate=-1.0, clouds=False, bands=1)
    with pytest.raises(InvalidArgumentError):
        WorldConfig(change_magnitude=(0.0, 0.1))
    with pytest.raises(InvalidArgumentError):
        WorldConfig(change_grid=0)
    with pytest.raises(InvalidArgumentError):
        WorldConfig(change_extent=(0, 2))
    with pytest.raises(InvalidArgumentError):
        WorldConfig(change_extent=(3, 2))


def test_bad_cell_and_time_rejected():
    world = WorldModel(static_config())
    with pytest.raises(InvalidArgumentError):
        generate_capture(world, 5, 0.0)
    with pytest.raises(InvalidArgumentError):
        generate_capture(world, 0, -1.0)


def test_truth_change_counts_accumulate():
    cfg = WorldConfig(seed=18, cells=1, height=256, width=256, bands=2,
                      change_rate=0.1, illumination=False, clouds=False)
    world = WorldModel(cfg)
    _, early = generate_capture(world, 0, 10.0)
    _, late = generate_capture(world, 0, 80.0)
    assert (late.change_counts >= early.change_counts).all()
    assert late.change_counts.sum() > early.change_counts.sum()
