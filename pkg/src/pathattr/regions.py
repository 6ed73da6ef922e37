"""XRAI-style region ranking on top of a multi-scale graph segmentation.

Segmentation follows Felzenszwalb & Huttenlocher on the 4-connected pixel
grid. The scales are run coarse-after-fine: each scale resumes merging from
the previous scale's components, so the region family is nested. On a nested
family the greedy density ranking yields non-increasing gains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ShapeError

DEFAULT_SCALES = (50, 100, 150, 250)
REFERENCE_AREA = 32 * 32
REFERENCE_MIN_SIZE = 20


@dataclass
class Region:
    pixels: np.ndarray  # sorted flat indices
    scale: float

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class RegionSet:
    regions: list[Region]
    shape: tuple[int, int]

    def __post_init__(self):
        n = self.shape[0] * self.shape[1]
        for r in self.regions:
            if len(r.pixels) == 0:
                raise ValueError("regions must be non-empty")
            if r.pixels.min() < 0 or r.pixels.max() >= n:
                raise ValueError("region pixel index out of range")

    def __len__(self) -> int:
        return len(self.regions)

    def membership(self) -> np.ndarray:
        """Boolean ``(R, n)`` matrix; row r marks the pixels of region r."""
        n = self.shape[0] * self.shape[1]
        m = np.zeros((len(self.regions), n), dtype=bool)
        for i, r in enumerate(self.regions):
            m[i, r.pixels] = True
        return m

    def scales(self) -> list[float]:
        return sorted({r.scale for r in self.regions})

    @classmethod
    def from_labels(cls, labels: np.ndarray, scale: float = 0) -> "RegionSet":
        """One region per distinct label value, ordered by first pixel."""
        flat = np.asarray(labels).reshape(-1)
        _, first = np.unique(flat, return_index=True)
        regions = [Region(np.flatnonzero(flat == flat[i]), scale) for i in np.sort(first)]
        return cls(regions, tuple(np.shape(labels)))


@dataclass
class RankMap:
    ranks: np.ndarray  # (H, W), 1 = most salient
    order: list[int]  # region indices in selection order
    gains: list[float]
    new_pixels: list[int]
    base: np.ndarray = field(repr=False, default=None)

    def table(self) -> list[dict]:
        return [
            {"rank": i + 1, "region": r, "gain": g, "new_pixels": k}
            for i, (r, g, k) in enumerate(zip(self.order, self.gains, self.new_pixels))
        ]

    def pixel_order(self) -> np.ndarray:
        """Flat pixel indices, most salient first.

        Sorted by rank, then descending base attribution, then index.
        """
        ranks = self.ranks.reshape(-1)
        base = self.base.reshape(-1) if self.base is not None else np.zeros(ranks.shape)
        return np.lexsort((np.arange(ranks.size), -base, ranks))


# ---------------------------------------------------------------------------
# segmentation


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int, weight: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], weight)
        return a


def grid_edges(shape: tuple[int, int], values: np.ndarray):
    """4-connected edges sorted by (weight, source, target)."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    src = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    dst = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = values.reshape(-1)
    weight = np.abs(flat[src] - flat[dst])
    order = np.lexsort((dst, src, weight))
    return src[order], dst[order], weight[order]


def min_region_size(shape: tuple[int, int]) -> int:
    """20 px on a 32x32 image, scaled with image area."""
    return max(1, int(round(REFERENCE_MIN_SIZE * shape[0] * shape[1] / REFERENCE_AREA)))


def _labels(ds: _DisjointSet, n: int) -> np.ndarray:
    return np.array([ds.find(i) for i in range(n)])


def oversegment(image, scales=DEFAULT_SCALES, min_size: int | None = None) -> RegionSet:
    """Graph-based oversegmentation at each scale ``k`` (intensities on a 0-255 scale).

    Two components merge across an edge of weight ``w`` when
    ``w <= min(Int(C1) + k/|C1|, Int(C2) + k/|C2|)``; afterwards components
    smaller than ``min_size`` are absorbed along the cheapest edges. Scales are
    processed in increasing order, each starting from the previous partition.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"oversegment needs a single-channel image, got {img.shape}")
    if img.shape[0] < 4 or img.shape[1] < 4:
        raise ShapeError(f"image {img.shape} is smaller than 4x4")
    if min_size is None:
        min_size = min_region_size(img.shape)
    n = img.size
    src, dst, weight = grid_edges(img.shape, img * 255.0)
    src, dst, weight = src.tolist(), dst.tolist(), weight.tolist()
    ds = _DisjointSet(n)
    regions: list[Region] = []
    for k in sorted(scales):
        for a, b, w in zip(src, dst, weight):
            ra, rb = ds.find(a), ds.find(b)
            if ra == rb:
                continue
            if w <= min(ds.internal[ra] + k / ds.size[ra], ds.internal[rb] + k / ds.size[rb]):
                ds.union(ra, rb, w)
        for a, b, w in zip(src, dst, weight):
            ra, rb = ds.find(a), ds.find(b)
            if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
                ds.union(ra, rb, w)
        labels = _labels(ds, n)
        regions.extend(RegionSet.from_labels(labels.reshape(img.shape), k).regions)
    return RegionSet(regions, img.shape)


# ---------------------------------------------------------------------------
# ranking


def xrai_rank(base_map, regions: RegionSet) -> RankMap:
    """Greedy ranking by positive attribution density over uncovered pixels.

    Each round picks the region maximising ``sum(max(a, 0)) / count`` over its
    not-yet-covered pixels (ties: lowest region index); those pixels take the
    current rank. Regions with nothing new to add are skipped.
    """
    values = np.asarray(getattr(base_map, "values", base_map), dtype=np.float64)
    if values.ndim == 3:
        values = values.sum(axis=0)
    if values.shape != tuple(regions.shape):
        raise ShapeError(f"base map {values.shape} does not match regions {regions.shape}")
    if len(regions) == 0:
        raise ValueError("empty region set")
    member = regions.membership().astype(np.float64)
    positive = np.maximum(values.reshape(-1), 0.0)
    n = positive.size
    if not member.any(axis=0).all():
        raise ValueError("regions do not cover every pixel")

    uncovered = np.ones(n)
    ranks = np.zeros(n, dtype=np.int64)
    order, gains, counts = [], [], []
    rank = 0
    while uncovered.any():
        count = member @ uncovered
        mass = member @ (positive * uncovered)
        gain = np.full(len(regions), -np.inf)
        live = count > 0
        gain[live] = mass[live] / count[live]
        best = int(np.argmax(gain))
        rank += 1
        fresh = (member[best] > 0) & (uncovered > 0)
        ranks[fresh] = rank
        uncovered[fresh] = 0.0
        order.append(best)
        gains.append(float(gain[best]))
        counts.append(int(fresh.sum()))
    return RankMap(ranks.reshape(regions.shape), order, gains, counts, values.copy())


def top_fraction_mask(rank_map: RankMap, fraction: float) -> np.ndarray:
    """Boolean mask of the ``ceil(fraction * n)`` most salient pixels.

    Whole regions enter in rank order; the last one is cut by descending
    per-pixel attribution.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = rank_map.ranks.size
    # round first so 0.3 * 100 counts as 30, not 31
    k = min(n, math.ceil(round(fraction * n, 9)))
    mask = np.zeros(n, dtype=bool)
    mask[rank_map.pixel_order()[:k]] = True
    return mask.reshape(rank_map.ranks.shape)


def xrai(base_map, image, scales=DEFAULT_SCALES, min_size: int | None = None) -> tuple[RankMap, RegionSet]:
    regions = oversegment(image, scales, min_size)
    return xrai_rank(base_map, regions), regions
