"""Onboard preprocessing: cloud masking and illumination alignment.

Cloud detection runs on a 64x downsampled view of the capture, one
decision per 64x64 tile, using a small depth-limited decision tree over
the per-tile band means. Illumination differences between a capture and
its reference are removed with a per-image linear model C = k*R + d
fitted by ordinary least squares on clear pixels.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateFitError,
    FormatError,
    InvalidArgumentError,
    InvalidModelError,
)
from .raster import TILE_SIZE_DEFAULT, Band, Image, PixelMask, TileGrid

CLOUD_TREE_MAX_DEPTH = 4
CLOUDY_LEAF_PURITY = 0.99
DROP_COVERAGE = 0.5


@dataclass
class CloudMask:
    """Per-tile cloud flags for one capture."""

    tiles: np.ndarray
    tile_size: int = TILE_SIZE_DEFAULT

    def __post_init__(self):
        self.tiles = np.asarray(self.tiles, dtype=bool)
        if self.tiles.ndim != 2 or self.tiles.size == 0:
            raise InvalidArgumentError("cloud mask needs a nonempty 2-D tile grid")
        if self.tile_size < 1:
            raise InvalidArgumentError("tile_size must be positive")

    @property
    def coverage(self) -> float:
        return float(np.count_nonzero(self.tiles) / self.tiles.size)

    def clear_pixels(self, height: int, width: int) -> PixelMask:
        """Expand the tile flags to a full-resolution clear-pixel mask."""
        t = self.tile_size
        grid = TileGrid(height, width, t)
        if (grid.rows, grid.cols) != self.tiles.shape:
            raise InvalidArgumentError(
                f"mask grid {self.tiles.shape} does not tile {height}x{width}"
            )
        full = np.repeat(np.repeat(~self.tiles, t, axis=0), t, axis=1)
        return full[:height, :width]


@dataclass(frozen=True)
class IlluminationFit:
    """Linear illumination model capture = k*reference + d.

    Fits produced by fit_illumination always have n >= 2; n == 0 marks
    the identity fallback used when no fit was possible.
    """

    k: float
    d: float
    n: int
    residual_rms: float

    def __post_init__(self):
        if self.n < 0:
            raise InvalidArgumentError("pixel count cannot be negative")
        if self.residual_rms < 0:
            raise InvalidArgumentError("residual_rms must be nonnegative")


IDENTITY_FIT = IlluminationFit(k=1.0, d=0.0, n=0, residual_rms=0.0)


@dataclass(frozen=True)
class TreeNode:
    """One node of a cloud decision tree.

    Split nodes test one band's tile mean against a threshold (<= goes
    left); leaves have band < 0 and carry the cloudy flag.
    """

    band: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    cloudy: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.band < 0


class CloudDecisionTree:
    def __init__(self, nodes):
        self.nodes = list(nodes)
        self._validate()

    def _validate(self):
        if not self.nodes:
            raise InvalidModelError("tree has no nodes")
        seen = set()
        deepest = 0
        stack = [(0, 0)]
        while stack:
            idx, depth = stack.pop()
            if not 0 <= idx < len(self.nodes):
                raise InvalidModelError(f"child index {idx} out of range")
            if idx in seen:
                raise InvalidModelError("tree nodes form a cycle or a DAG")
            seen.add(idx)
            deepest = max(deepest, depth)
            node = self.nodes[idx]
            if not node.is_leaf:
                stack.append((node.left, depth + 1))
                stack.append((node.right, depth + 1))
        if len(seen) != len(self.nodes):
            raise InvalidModelError("tree has unreachable nodes")
        if deepest > CLOUD_TREE_MAX_DEPTH:
            raise InvalidModelError(
                f"tree depth {deepest} exceeds limit {CLOUD_TREE_MAX_DEPTH}"
            )

    def depth(self) -> int:
        out = 0
        stack = [(0, 0)]
        while stack:
            idx, depth = stack.pop()
            out = max(out, depth)
            node = self.nodes[idx]
            if not node.is_leaf:
                stack.append((node.left, depth + 1))
                stack.append((node.right, depth + 1))
        return out

    def max_band(self) -> int:
        return max((n.band for n in self.nodes), default=-1)

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        """Classify feature rows (one row per tile, one column per band)."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise InvalidArgumentError("features must be a 2-D array")
        if self.max_band() >= feats.shape[1]:
            raise InvalidModelError(
                f"tree tests band {self.max_band()} but features have "
                f"{feats.shape[1]} bands"
            )
        out = np.zeros(feats.shape[0], dtype=bool)
        stack = [(0, np.arange(feats.shape[0]))]
        while stack:
            idx, rows = stack.pop()
            if rows.size == 0:
                continue
            node = self.nodes[idx]
            if node.is_leaf:
                out[rows] = node.cloudy
            else:
                go_left = feats[rows, node.band] <= node.threshold
                stack.append((node.left, rows[go_left]))
                stack.append((node.right, rows[~go_left]))
        return out

    def to_json(self) -> str:
        items = []
        for node in self.nodes:
            if node.is_leaf:
                items.append({"cloudy": bool(node.cloudy)})
            else:
                items.append(
                    {
                        "band": node.band,
                        "threshold": node.threshold,
                        "left": node.left,
                        "right": node.right,
                    }
                )
        return json.dumps({"nodes": items}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CloudDecisionTree":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad tree JSON: {exc}") from None
        items = doc.get("nodes") if isinstance(doc, dict) else None
        if not isinstance(items, list) or not items:
            raise FormatError("tree JSON needs a nonempty 'nodes' list")
        nodes = []
        for item in items:
            if "cloudy" in item:
                nodes.append(TreeNode(cloudy=bool(item["cloudy"])))
            else:
                try:
                    nodes.append(
                        TreeNode(
                            band=int(item["band"]),
                            threshold=float(item["threshold"]),
                            left=int(item["left"]),
                            right=int(item["right"]),
                        )
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise FormatError(f"bad tree node {item!r}: {exc}") from None
        try:
            return cls(nodes)
        except InvalidModelError as exc:
            raise FormatError(str(exc)) from None


def tile_band_means(image: Image, tile_size: int = TILE_SIZE_DEFAULT):
    """Per-tile mean of every band, flattened row-major.

    Returns (features, grid) where features has one row per tile and one
    column per band. This is the downsampled view the cloud detector and
    the change detector's calibration both run on.
    """
    grid = TileGrid(image.height, image.width, tile_size)
    row_starts = np.arange(0, image.height, tile_size)
    col_starts = np.arange(0, image.width, tile_size)
    row_spans = np.minimum(row_starts + tile_size, image.height) - row_starts
    col_spans = np.minimum(col_starts + tile_size, image.width) - col_starts
    counts = np.outer(row_spans, col_spans)
    cols = []
    for band in image.bands:
        sums = np.add.reduceat(band.samples.astype(np.float64), row_starts, axis=0)
        sums = np.add.reduceat(sums, col_starts, axis=1)
        cols.append((sums / counts).reshape(-1))
    return np.column_stack(cols), grid


def detect_clouds_onboard(image: Image, tree: CloudDecisionTree) -> CloudMask:
    """Flag cloudy 64x64 tiles by evaluating the tree on tile means."""
    if tree.max_band() >= image.band_count:
        raise InvalidModelError(
            f"tree tests band {tree.max_band()} but the image has "
            f"{image.band_count} bands"
        )
    features, grid = tile_band_means(image)
    flags = tree.evaluate(features).reshape(grid.rows, grid.cols)
    return CloudMask(flags)


def should_drop(mask: CloudMask) -> bool:
    """True when cloud coverage is strictly above 50%."""
    return mask.coverage > DROP_COVERAGE


def fit_illumination(
    capture: Band, reference: Band, clear: PixelMask | None = None
) -> IlluminationFit:
    """Least-squares fit of capture = k*reference + d over clear pixels."""
    if capture.samples.shape != reference.samples.shape:
        raise InvalidArgumentError(
            f"capture {capture.samples.shape} and reference "
            f"{reference.samples.shape} dimensions differ"
        )
    if clear is None:
        cap = capture.samples.reshape(-1).astype(np.float64)
        ref = reference.samples.reshape(-1).astype(np.float64)
    else:
        clear = np.asarray(clear, dtype=bool)
        if clear.shape != capture.samples.shape:
            raise InvalidArgumentError("clear mask dimensions differ from bands")
        cap = capture.samples[clear].astype(np.float64)
        ref = reference.samples[clear].astype(np.float64)
    n = cap.size
    if n < 2:
        raise DegenerateFitError(f"need at least 2 clear pixels, have {n}")
    ref_mean = ref.mean()
    centered = ref - ref_mean
    var = float(np.dot(centered, centered))
    if var == 0.0:
        raise DegenerateFitError("reference is constant over clear pixels")
    cap_mean = cap.mean()
    k = float(np.dot(centered, cap - cap_mean) / var)
    d = float(cap_mean - k * ref_mean)
    resid = cap - (k * ref + d)
    rms = float(np.sqrt(np.mean(resid * resid)))
    return IlluminationFit(k=k, d=d, n=int(n), residual_rms=rms)


def align(reference: Band, fit: IlluminationFit) -> Band:
    """Map the reference through the fit, clamped to [0, 1]."""
    mapped = np.clip(fit.k * reference.samples.astype(np.float64) + fit.d, 0.0, 1.0)
    return Band(reference.band_id, mapped.astype(np.float32))


def train_cloud_tree(labeled, tile_size: int = TILE_SIZE_DEFAULT) -> CloudDecisionTree:
    """Grow a depth-limited tree on per-tile band means.

    labeled is a list of (Image, per-tile bool cloud labels) pairs. Splits
    greedily maximize information gain; a leaf is labeled cloudy only when
    at least 99% of its training tiles are cloudy, which trades recall for
    the precision the downstream drop rule depends on.
    """
    if not labeled:
        raise InvalidArgumentError("training set is empty")
    feature_rows = []
    label_rows = []
    band_count = labeled[0][0].band_count
    for image, truth in labeled:
        if image.band_count != band_count:
            raise InvalidArgumentError("training images disagree on band count")
        feats, grid = tile_band_means(image, tile_size)
        y = np.asarray(truth, dtype=bool).reshape(-1)
        if y.size != grid.tile_count:
            raise InvalidArgumentError(
                f"got {y.size} labels for {grid.tile_count} tiles"
            )
        feature_rows.append(feats)
        label_rows.append(y)
    X = np.concatenate(feature_rows, axis=0)
    y = np.concatenate(label_rows, axis=0)
    nodes = []
    _grow(X, y, 0, nodes)
    return CloudDecisionTree(nodes)


def _leaf(y) -> TreeNode:
    purity = float(np.count_nonzero(y) / y.size)
    return TreeNode(cloudy=purity >= CLOUDY_LEAF_PURITY)


def _entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        nz = q > 0
        out[nz] -= q[nz] * np.log2(q[nz])
    return out


def _best_split(X, y):
    """(band, threshold) with the highest information gain, or None.

    Ties resolve to the lowest band, then the lowest threshold, so
    training is deterministic for a given input order.
    """
    n = y.size
    total_pos = int(np.count_nonzero(y))
    parent = float(_entropy(np.array([total_pos / n]))[0])
    best_gain = 1e-12
    best = None
    for band in range(X.shape[1]):
        order = np.argsort(X[:, band], kind="stable")
        xs = X[order, band]
        cum = np.cumsum(y[order])
        cuts = np.nonzero(np.diff(xs))[0] + 1
        if cuts.size == 0:
            continue
        n_left = cuts.astype(np.float64)
        n_right = n - n_left
        p_left = cum[cuts - 1] / n_left
        p_right = (total_pos - cum[cuts - 1]) / n_right
        gains = parent - (n_left * _entropy(p_left) + n_right * _entropy(p_right)) / n
        j = int(np.argmax(gains))
        if gains[j] > best_gain:
            best_gain = float(gains[j])
            best = (band, float((xs[cuts[j] - 1] + xs[cuts[j]]) / 2.0))
    return best


def _grow(X, y, depth, nodes):
    idx = len(nodes)
    pos = int(np.count_nonzero(y))
    if depth >= CLOUD_TREE_MAX_DEPTH or pos == 0 or pos == y.size:
        nodes.append(_leaf(y))
        return idx
    split = _best_split(X, y)
    if split is None:
        nodes.append(_leaf(y))
        return idx
    band, threshold = split
    nodes.append(None)
    go_left = X[:, band] <= threshold
    left = _grow(X[go_left], y[go_left], depth + 1, nodes)
    right = _grow(X[~go_left], y[~go_left], depth + 1, nodes)
    nodes[idx] = TreeNode(band=band, threshold=threshold, left=left, right=right)
    return idx
