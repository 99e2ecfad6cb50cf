"""Graph-based spectrogram segmentation (Felzenszwalb-Huttenlocher style).

Pixels are graph nodes, 8-connected; edge weight is the absolute intensity
difference after Gaussian pre-smoothing. Edges are scanned in ascending
weight order and two components merge when the edge is no heavier than
``min(Int(C) + scale/|C|)`` over the two, where Int(C) is the largest weight
already absorbed into C. A second pass merges any component smaller than
``min_size`` into its nearest neighbour (by edge order). Labels are then
compacted to 0..K-1 in row-major order of each segment's first pixel, so
results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .dsp import SCALE_DB, Spectrogram
from .errors import ConfigError, InputTooSmallError, ScaleMismatchError, ShapeMismatchError


@dataclass(frozen=True)
class SegmentationConfig:
    scale: float = 25.0
    min_size: int = 40
    sigma: float = 0.8

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.min_size < 1:
            raise ConfigError(f"min_size must be >= 1, got {self.min_size}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SegmentMap:
    """Dense label image; labels are exactly 0..segment_count-1, all present."""

    labels: np.ndarray
    segment_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeMismatchError(f"labels must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
        labels = labels.astype(np.int32)
        if labels.size == 0:
            raise ShapeMismatchError("label image is empty")
        counts = np.bincount(labels.ravel(), minlength=max(self.segment_count, 1))
        if labels.min() < 0 or labels.max() != self.segment_count - 1:
            raise ValueError(
                f"labels must cover 0..{self.segment_count - 1}, "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        if len(counts) != self.segment_count or (counts == 0).any():
            raise ValueError("every label in 0..segment_count-1 must occur")
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class SegmentStats:
    label: int
    area: int
    bbox: tuple[int, int, int, int]  # (row0, row1, col0, col1), half-open
    mean_value: float


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication; sigma 0 is a copy."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError(f"image must be 2-D, got shape {image.shape}")
    if not (np.isfinite(sigma) and sigma >= 0):
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = correlate1d(image, kernel, axis=0, mode="nearest")
    return correlate1d(out, kernel, axis=1, mode="nearest")


# Edge direction offsets, in tie-break order: E, S, SE, SW. Each pixel owns
# the edges it originates, so every undirected edge appears exactly once.
_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _build_edges(img: np.ndarray):
    h, w = img.shape
    flat = img.ravel()
    origins, targets, weights, dirs = [], [], [], []
    for d, (dr, dc) in enumerate(_DIRECTIONS):
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        p = (rr * w + cc).ravel()
        q = ((rr + dr) * w + (cc + dc)).ravel()
        origins.append(p)
        targets.append(q)
        weights.append(np.abs(flat[p] - flat[q]))
        dirs.append(np.full(p.shape, d, dtype=np.int8))
    p = np.concatenate(origins)
    q = np.concatenate(targets)
    wts = np.concatenate(weights)
    ds = np.concatenate(dirs)
    # Ascending weight; ties broken by origin row, column, then direction so
    # the scan order is fully deterministic.
    order = np.lexsort((ds, p % w, p // w, wts))
    return p[order], q[order], wts[order]


def felzenszwalb_segment(spec: Spectrogram, config: SegmentationConfig) -> SegmentMap:
    """Segment a dB spectrogram into contiguous regions."""
    if spec.scale != SCALE_DB:
        raise ScaleMismatchError(f"expected a dB spectrogram, got scale '{spec.scale}'")
    img = spec.values
    h, w = img.shape
    n = h * w
    if n < config.min_size:
        raise InputTooSmallError(
            f"{n} pixels cannot hold a segment of min_size {config.min_size}"
        )
    smoothed = gaussian_smooth(img, config.sigma)
    p_arr, q_arr, w_arr = _build_edges(smoothed)

    parent = list(range(n))
    size = [1] * n
    internal = [0.0] * n
    k = float(config.scale)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(ra: int, rb: int, weight: float) -> None:
        if size[ra] < size[rb]:
            ra, rb = rb, ra
        parent[rb] = ra
        size[ra] += size[rb]
        internal[ra] = weight

    edges = list(zip(p_arr.tolist(), q_arr.tolist(), w_arr.tolist()))
    for p, q, weight in edges:
        ra, rb = find(p), find(q)
        if ra == rb:
            continue
        if weight <= min(internal[ra] + k / size[ra], internal[rb] + k / size[rb]):
            union(ra, rb, weight)

    # Post-merge: absorb undersized components, revisiting edges in the same
    # ascending order.
    min_size = config.min_size
    for p, q, weight in edges:
        ra, rb = find(p), find(q)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb, weight)

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    # Compact labels in order of first appearance (row-major scan).
    _, first_index, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_index))
    labels = rank[inverse].astype(np.int32).reshape(h, w)
    return SegmentMap(labels=labels, segment_count=int(labels.max()) + 1)


def segment_stats(seg_map: SegmentMap, spec: Spectrogram) -> list[SegmentStats]:
    """Per-segment area, bounding box and mean intensity."""
    if seg_map.labels.shape != spec.values.shape:
        raise ShapeMismatchError(
            f"segment map {seg_map.labels.shape} does not match "
            f"spectrogram {spec.values.shape}"
        )
    h, w = seg_map.labels.shape
    flat = seg_map.labels.ravel()
    n = seg_map.segment_count
    areas = np.bincount(flat, minlength=n)
    sums = np.bincount(flat, weights=spec.values.ravel(), minlength=n)
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    row_min = np.full(n, h)
    row_max = np.full(n, -1)
    col_min = np.full(n, w)
    col_max = np.full(n, -1)
    np.minimum.at(row_min, flat, rows)
    np.maximum.at(row_max, flat, rows)
    np.minimum.at(col_min, flat, cols)
    np.maximum.at(col_max, flat, cols)
    return [
        SegmentStats(
            label=i,
            area=int(areas[i]),
            bbox=(int(row_min[i]), int(row_max[i]) + 1, int(col_min[i]), int(col_max[i]) + 1),
            mean_value=float(sums[i] / areas[i]),
        )
        for i in range(n)
    ]


def write_segment_csv(seg_map: SegmentMap, path) -> None:
    """Dense per-pixel dump: one `row,col,label` line per pixel."""
    h, w = seg_map.labels.shape
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    table = np.column_stack([rows, cols, seg_map.labels.ravel()])
    np.savetxt(path, table, fmt="%d", delimiter=",", header="row,col,label", comments="")


def segment_map_to_rle(seg_map: SegmentMap) -> str:
    """Compact text form: header, dimensions, then per-row `label:runlength` runs."""
    h, w = seg_map.labels.shape
    lines = ["rle v1", f"{h} {w} {seg_map.segment_count}"]
    for r in range(h):
        row = seg_map.labels[r]
        boundaries = np.flatnonzero(np.diff(row)) + 1
        starts = np.concatenate(([0], boundaries))
        ends = np.concatenate((boundaries, [w]))
        lines.append(" ".join(
            f"{int(row[s])}:{int(e - s)}" for s, e in zip(starts, ends)
        ))
    return "\n".join(lines) + "\n"


def segment_map_from_rle(text: str) -> SegmentMap:
    """Inverse of segment_map_to_rle."""
    lines = text.strip().split("\n")
    if not lines or lines[0].strip() != "rle v1":
        raise ValueError("not an rle v1 payload")
    h, w, count = (int(f) for f in lines[1].split())
    if len(lines) != 2 + h:
        raise ValueError(f"expected {h} row lines, got {len(lines) - 2}")
    labels = np.empty((h, w), dtype=np.int32)
    for r in range(h):
        col = 0
        for run in lines[2 + r].split():
            label_s, length_s = run.split(":")
            length = int(length_s)
            labels[r, col:col + length] = int(label_s)
            col += length
        if col != w:
            raise ValueError(f"row {r} spans {col} columns, expected {w}")
    return SegmentMap(labels=labels, segment_count=count)
