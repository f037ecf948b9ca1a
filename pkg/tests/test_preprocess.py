import numpy as np
import pytest

from satref.errors import (
    DegenerateFitError,
    FormatError,
    InvalidArgumentError,
    InvalidModelError,
)
from satref.preprocess import (
    CLOUD_TREE_MAX_DEPTH,
    CloudDecisionTree,
    CloudMask,
    IDENTITY_FIT,
    TreeNode,
    align,
    detect_clouds_onboard,
    fit_illumination,
    should_drop,
    tile_band_means,
    train_cloud_tree,
)
from satref.raster import Band, Image, TileGrid, tile_mean_abs_diff


def mask_with_coverage(cloudy, total=100):
    tiles = np.zeros(total, dtype=bool)
    tiles[:cloudy] = True
    return CloudMask(tiles.reshape(10, total // 10))


def tiled_image(rng, tiles_y=4, tiles_x=4, tile=64, bands=2):
    """Image whose tiles each hold one constant value per band."""
    per_band = []
    for b in range(bands):
        vals = rng.random((tiles_y, tiles_x)).astype(np.float32)
        per_band.append(Band(b, np.repeat(np.repeat(vals, tile, 0), tile, 1)))
    return Image(0, 0.0, per_band)


def cloudy_scene(rng, cloud_fraction, tiles_y=4, tiles_x=4, tile=64):
    """Two-band scene: band 1 is IR, cloudy tiles sit at IR >= 0.85.

    The visible band overlaps between classes on purpose; only IR
    separates them cleanly, as with real heavy cloud.
    """
    n = tiles_y * tiles_x
    truth = np.zeros(n, dtype=bool)
    truth[: round(n * cloud_fraction)] = True
    rng.shuffle(truth)
    truth = truth.reshape(tiles_y, tiles_x)
    vis = rng.uniform(0.2, 0.65, (tiles_y, tiles_x)).astype(np.float32)
    ir = rng.uniform(0.2, 0.7, (tiles_y, tiles_x)).astype(np.float32)
    ir[truth] = rng.uniform(0.85, 0.95, int(truth.sum())).astype(np.float32)
    vis[truth] = rng.uniform(0.6, 0.95, int(truth.sum())).astype(np.float32)
    bands = [
        Band(0, np.repeat(np.repeat(vis, tile, 0), tile, 1)),
        Band(1, np.repeat(np.repeat(ir, tile, 0), tile, 1)),
    ]
    return Image(0, 0.0, bands), truth


# ------------------------------------------------------------- drop rule


def test_should_drop_boundaries():
    assert should_drop(mask_with_coverage(51)) is True
    assert should_drop(mask_with_coverage(50)) is False
    assert should_drop(mask_with_coverage(0)) is False
    assert should_drop(mask_with_coverage(100)) is True


def test_should_drop_monotone():
    prev = False
    for cloudy in range(0, 101, 5):
        cur = should_drop(mask_with_coverage(cloudy))
        assert cur >= prev
        prev = cur


def test_cloud_mask_coverage_and_clear_pixels():
    mask = CloudMask(np.array([[True, False], [False, False]]), tile_size=4)
    assert mask.coverage == 0.25
    clear = mask.clear_pixels(7, 6)
    assert clear.shape == (7, 6)
    assert not clear[:4, :4].any()
    assert clear[:4, 4:].all() and clear[4:, :].all()
    with pytest.raises(InvalidArgumentError):
        mask.clear_pixels(20, 20)


# ------------------------------------------------------- illumination fit


def dyadic_band(rng, h=40, w=50):
    # multiples of 2^-8 in [0, 0.75]: closed under *0.5 + 0.125 in float32
    vals = rng.integers(0, 193, (h, w)).astype(np.float32) / 256.0
    return Band(0, vals)


def test_fit_exact_linear_transform():
    rng = np.random.default_rng(20)
    ref = dyadic_band(rng)
    cap = Band(0, ref.samples * np.float32(0.5) + np.float32(0.125))
    fit = fit_illumination(cap, ref)
    assert fit.k == pytest.approx(0.5, abs=1e-12)
    assert fit.d == pytest.approx(0.125, abs=1e-12)
    assert fit.residual_rms < 1e-9
    assert fit.n == 40 * 50


def test_fit_identity():
    rng = np.random.default_rng(21)
    ref = Band(0, rng.random((30, 30), dtype=np.float32))
    fit = fit_illumination(ref, ref)
    assert fit.k == 1.0
    assert fit.d == 0.0
    assert fit.residual_rms == 0.0


def test_fit_float32_rounding_case():
    rng = np.random.default_rng(22)
    ref = Band(0, rng.random((64, 64), dtype=np.float32) * np.float32(0.8))
    cap = Band(0, ref.samples * np.float32(0.8) + np.float32(0.1))
    fit = fit_illumination(cap, ref)
    assert fit.k == pytest.approx(0.8, abs=1e-5)
    assert fit.d == pytest.approx(0.1, abs=1e-5)
    assert fit.residual_rms < 1e-6


def test_fit_noisy_matches_lstsq_oracle():
    rng = np.random.default_rng(23)
    ref_vals = rng.uniform(0.1, 0.9, (100, 100)).astype(np.float32)
    noise = rng.normal(0.0, 0.01, (100, 100))
    cap_vals = np.clip(0.9 * ref_vals + 0.05 + noise, 0, 1).astype(np.float32)
    clear = rng.random((100, 100)) > 0.2
    fit = fit_illumination(Band(0, cap_vals), Band(0, ref_vals), clear)
    assert fit.k == pytest.approx(0.9, abs=0.02)
    assert fit.d == pytest.approx(0.05, abs=0.01)
    assert fit.n == int(clear.sum())
    # independent solver on the same pixels
    a = np.column_stack(
        [ref_vals[clear].astype(np.float64), np.ones(int(clear.sum()))]
    )
    b = cap_vals[clear].astype(np.float64)
    (k_ref, d_ref), *_ = np.linalg.lstsq(a, b, rcond=None)
    assert fit.k == pytest.approx(k_ref, rel=1e-9)
    assert fit.d == pytest.approx(d_ref, rel=1e-9)
    resid = b - (k_ref * a[:, 0] + d_ref)
    assert fit.residual_rms == pytest.approx(
        float(np.sqrt(np.mean(resid**2))), rel=1e-9
    )


def test_fit_degenerate_cases():
    ref = Band(0, np.full((8, 8), 0.4, dtype=np.float32))
    cap = Band(0, np.full((8, 8), 0.6, dtype=np.float32))
    with pytest.raises(DegenerateFitError):
        fit_illumination(cap, ref)
    rng = np.random.default_rng(24)
    varied = Band(0, rng.random((8, 8), dtype=np.float32))
    one_pixel = np.zeros((8, 8), dtype=bool)
    one_pixel[0, 0] = True
    with pytest.raises(DegenerateFitError):
        fit_illumination(cap, varied, one_pixel)
    with pytest.raises(InvalidArgumentError):
        fit_illumination(cap, Band(0, np.zeros((4, 4), dtype=np.float32)))


# ------------------------------------------------------------------ align


def test_align_identity_and_constant():
    rng = np.random.default_rng(25)
    ref = Band(3, rng.random((16, 16), dtype=np.float32))
    same = align(ref, IDENTITY_FIT)
    assert same.band_id == 3
    assert np.array_equal(same.samples, ref.samples)
    from satref.preprocess import IlluminationFit

    const = align(ref, IlluminationFit(k=0.0, d=0.5, n=2, residual_rms=0.0))
    assert np.all(const.samples == np.float32(0.5))


def test_align_clamps_to_unit_interval():
    from satref.preprocess import IlluminationFit

    ref = Band(0, np.array([[0.0, 0.5, 1.0]], dtype=np.float32))
    out = align(ref, IlluminationFit(k=2.0, d=-0.2, n=2, residual_rms=0.0))
    assert out.samples.min() >= 0.0
    assert out.samples.max() <= 1.0
    assert out.samples[0, 1] == np.float32(0.8)


def test_align_round_trip_on_exact_transform():
    rng = np.random.default_rng(26)
    ref = dyadic_band(rng, 128, 128)
    cap = Band(0, ref.samples * np.float32(0.5) + np.float32(0.125))
    fit = fit_illumination(cap, ref)
    aligned = align(ref, fit)
    grid = TileGrid(128, 128, 64)
    diff = tile_mean_abs_diff(cap, aligned, grid)
    assert np.all(diff < 1e-7)


# ------------------------------------------------------------- tile means


def test_tile_band_means_matches_bruteforce():
    rng = np.random.default_rng(27)
    for h, w, t in ((128, 128, 64), (130, 97, 64), (40, 40, 16), (7, 5, 3)):
        img = Image(
            0,
            0.0,
            [Band(i, rng.random((h, w), dtype=np.float32)) for i in range(2)],
        )
        feats, grid = tile_band_means(img, t)
        assert feats.shape == (grid.tile_count, 2)
        for r in range(grid.rows):
            for c in range(grid.cols):
                ys, xs = grid.tile_slices(r, c)
                for b in range(2):
                    want = float(
                        np.mean(img.bands[b].samples[ys, xs].astype(np.float64))
                    )
                    got = feats[grid.tile_index(r, c), b]
                    assert got == pytest.approx(want, rel=1e-12)


# ------------------------------------------------------------------ trees


def test_train_separable_threshold():
    rng = np.random.default_rng(28)
    labeled = []
    for _ in range(6):
        img, truth = cloudy_scene(rng, 0.4)
        labeled.append((img, truth))
    tree = train_cloud_tree(labeled)
    assert tree.depth() == 1
    # behaviorally a single IR threshold inside the separation gap
    split = next(n for n in tree.nodes if not n.is_leaf)
    assert split.band == 1
    assert 0.7 < split.threshold < 0.85
    for img, truth in labeled:
        got = detect_clouds_onboard(img, tree)
        assert np.array_equal(got.tiles, truth)


def test_train_single_class_sets():
    rng = np.random.default_rng(29)
    img, _ = cloudy_scene(rng, 0.0)
    all_clear = train_cloud_tree([(img, np.zeros((4, 4), dtype=bool))])
    assert len(all_clear.nodes) == 1
    assert detect_clouds_onboard(img, all_clear).coverage == 0.0
    img2, _ = cloudy_scene(rng, 1.0)
    all_cloudy = train_cloud_tree([(img2, np.ones((4, 4), dtype=bool))])
    assert detect_clouds_onboard(img2, all_cloudy).coverage == 1.0


def test_train_depth_limited_on_alternating_labels():
    # alternating intervals cannot be split perfectly within the limit
    rng = np.random.default_rng(30)
    vals = rng.random((8, 8)).astype(np.float32)
    img = Image(0, 0.0, [Band(0, np.repeat(np.repeat(vals, 4, 0), 4, 1))])
    labels = (np.floor(vals * 32) % 2).astype(bool)
    tree = train_cloud_tree([(img, labels)], tile_size=4)
    assert tree.depth() <= CLOUD_TREE_MAX_DEPTH


def test_train_precision_over_recall_on_overlap():
    rng = np.random.default_rng(31)

    def overlapping(n_tiles):
        truth = rng.random(n_tiles) < 0.3
        ir = np.where(
            truth, rng.uniform(0.72, 1.0, n_tiles), rng.uniform(0.0, 0.74, n_tiles)
        )
        return ir.astype(np.float32), truth

    train_ir, train_truth = overlapping(4096)
    img = Image(
        0,
        0.0,
        [
            Band(0, np.repeat(np.repeat(train_ir.reshape(64, 64), 4, 0), 4, 1)),
        ],
    )
    tree = train_cloud_tree([(img, train_truth)], tile_size=4)
    held_ir, held_truth = overlapping(20000)
    flags = tree.evaluate(held_ir.reshape(-1, 1))
    assert flags.sum() > 0
    precision = (flags & held_truth).sum() / flags.sum()
    assert precision >= 0.99


def test_detect_trivial_scenes():
    rng = np.random.default_rng(32)
    labeled = [cloudy_scene(rng, 0.4) for _ in range(6)]
    tree = train_cloud_tree(labeled)
    clear_img, _ = cloudy_scene(rng, 0.0)
    assert detect_clouds_onboard(clear_img, tree).coverage == 0.0
    full_img, _ = cloudy_scene(rng, 1.0)
    assert detect_clouds_onboard(full_img, tree).coverage == 1.0
    part_img, part_truth = cloudy_scene(rng, 0.3)
    got = detect_clouds_onboard(part_img, tree)
    flagged = got.tiles
    assert flagged.sum() > 0
    assert (flagged & part_truth).sum() / flagged.sum() >= 0.99


def test_detect_missing_band_rejected():
    tree = CloudDecisionTree(
        [
            TreeNode(band=2, threshold=0.5, left=1, right=2),
            TreeNode(cloudy=False),
            TreeNode(cloudy=True),
        ]
    )
    rng = np.random.default_rng(33)
    img = Image(0, 0.0, [Band(0, rng.random((64, 64), dtype=np.float32))])
    with pytest.raises(InvalidModelError):
        detect_clouds_onboard(img, tree)


def test_tree_json_round_trip():
    rng = np.random.default_rng(34)
    labeled = [cloudy_scene(rng, 0.4) for _ in range(4)]
    tree = train_cloud_tree(labeled)
    back = CloudDecisionTree.from_json(tree.to_json())
    assert back.nodes == tree.nodes
    feats = rng.random((50, 2))
    assert np.array_equal(back.evaluate(feats), tree.evaluate(feats))


def test_tree_json_rejects_bad_input():
    with pytest.raises(FormatError):
        CloudDecisionTree.from_json("{not json")
    with pytest.raises(FormatError):
        CloudDecisionTree.from_json('{"nodes": []}')
    # self-referencing node
    with pytest.raises(FormatError):
        CloudDecisionTree.from_json(
            '{"nodes": [{"band": 0, "threshold": 0.5, "left": 0, "right": 0}]}'
        )
    # child index out of range
    with pytest.raises(FormatError):
        CloudDecisionTree.from_json(
            '{"nodes": [{"band": 0, "threshold": 0.5, "left": 1, "right": 9}, '
            '{"cloudy": true}]}'
        )


def test_tree_depth_cap_enforced():
    import json

    # right-leaning chain of 5 splits is one deeper than the limit;
    # split i sits at index 2i, its left child is a leaf, its right child
    # the next split (the last one points at the final leaf)
    chain = []
    for i in range(5):
        chain.append(
            {
                "band": 0,
                "threshold": 0.1 * (i + 1),
                "left": 2 * i + 1,
                "right": 2 * i + 2,
            }
        )
        chain.append({"cloudy": False})
    chain.append({"cloudy": True})
    with pytest.raises(FormatError):
        CloudDecisionTree.from_json(json.dumps({"nodes": chain}))


def test_unreachable_nodes_rejected():
    with pytest.raises(InvalidModelError):
        CloudDecisionTree(
            [TreeNode(cloudy=True), TreeNode(cloudy=False)]
        )
