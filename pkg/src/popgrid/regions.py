"""Region polygons, rasterized region maps, region merging and IoU matching."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .grid import Grid

log = logging.getLogger(__name__)

NODATA = 0xFFFFFFFF


@dataclass(frozen=True)
class Region:
    region_id: int
    # each polygon: exterior ring followed by its holes
    polygons: tuple[tuple[tuple[tuple[float, float], ...], ...], ...]

    def rings(self):
        for poly in self.polygons:
            yield from poly


@dataclass(frozen=True)
class RegionPartition:
    regions: tuple[Region, ...]

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate region_id")
        for r in self.regions:
            for poly in r.polygons:
                for k, ring in enumerate(poly):
                    if len(ring) < 4 or ring[0] != ring[-1]:
                        raise DataError(f"region {r.region_id}: ring {k} not closed or too short")

    @property
    def ids(self) -> list[int]:
        return sorted(r.region_id for r in self.regions)


@dataclass(frozen=True, eq=False)
class RegionMap:
    """Per-pixel region ids; ``NODATA`` marks pixels outside every region."""

    indices: np.ndarray
    transform: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    ids: tuple[int, ...] | None = None

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.uint32, copy=True)
        if idx.ndim != 2:
            raise DataError("region map must be 2-D")
        present = np.unique(idx[idx != NODATA])
        if self.ids is None:
            ids = tuple(int(i) for i in present)
        else:
            ids = tuple(sorted(int(i) for i in self.ids))
            if len(set(ids)) != len(ids):
                raise DataError("duplicate region_id")
            missing = np.setdiff1d(present, np.asarray(ids, dtype=np.uint32))
            if missing.size:
                raise DataError(f"region ids {missing[:5].tolist()} not in id list")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "transform", tuple(float(t) for t in self.transform))
        object.__setattr__(self, "ids", ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    def counts(self) -> dict[int, int]:
        """Pixel count per region id (regions without pixels report 0)."""
        codes, inverse = self.compact()
        n = np.bincount(inverse[inverse >= 0], minlength=len(codes))
        return {int(i): int(c) for i, c in zip(codes, n)}

    def compact(self) -> tuple[np.ndarray, np.ndarray]:
        """``(ids, position)`` where position maps each pixel to its index in ``ids`` or -1."""
        ids = np.asarray(self.ids, dtype=np.int64)
        flat = self.indices.ravel().astype(np.int64)
        pos = np.searchsorted(ids, flat)
        pos = np.clip(pos, 0, max(len(ids) - 1, 0))
        hit = (flat != NODATA) & (len(ids) > 0)
        if len(ids):
            hit &= ids[pos] == flat
        return ids, np.where(hit, pos, -1)

    def to_grid(self) -> Grid:
        return Grid(self.indices[None], (self.indices != NODATA)[None], self.transform,
                    ["region_id"], ["AUX"])

    @classmethod
    def from_grid(cls, grid: Grid) -> "RegionMap":
        if grid.bands != 1 or grid.values.dtype != np.uint32:
            raise DataError("region map grids must have a single u32 band")
        idx = np.where(grid.valid[0], grid.values[0], NODATA)
        return cls(idx, grid.transform)


# ---------------------------------------------------------------------------
# GeoJSON subset
# ---------------------------------------------------------------------------

def _ring(coords) -> tuple[tuple[float, float], ...]:
    try:
        ring = tuple((float(p[0]), float(p[1])) for p in coords)
    except (TypeError, ValueError, IndexError):
        raise DataError("malformed coordinates") from None
    if len(ring) and ring[0] != ring[-1]:
        ring = ring + (ring[0],)
    if len(ring) < 4:
        raise DataError("ring needs at least 3 distinct vertices")
    return ring


def parse_regions(text: str) -> RegionPartition:
    """Parse a FeatureCollection of Polygon/MultiPolygon features keyed by ``region_id``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise DataError("malformed JSON: expected a FeatureCollection")
    regions = []
    seen = set()
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        rid = props.get("region_id")
        if rid is None or isinstance(rid, bool) or not isinstance(rid, int):
            raise DataError("missing region_id")
        if not 0 <= rid < NODATA:
            raise DataError(f"region_id {rid} out of u32 range")
        if rid in seen:
            raise DataError(f"duplicate region_id {rid}")
        seen.add(rid)
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            polys = [coords]
        elif gtype == "MultiPolygon":
            polys = coords
        else:
            raise DataError(f"unsupported geometry {gtype!r}")
        polygons = tuple(tuple(_ring(r) for r in poly) for poly in polys)
        regions.append(Region(rid, polygons))
    return RegionPartition(tuple(regions))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def _edges(region: Region) -> np.ndarray:
    segs = []
    for ring in region.rings():
        pts = np.asarray(ring, dtype=np.float64)
        segs.append(np.hstack([pts[:-1], pts[1:]]))
    return np.vstack(segs)


def _region_mask(edges: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pixel centers inside (even-odd) or exactly on the boundary of a ring set."""
    x1, y1, x2, y2 = edges.T
    inside = np.zeros((len(ys), len(xs)), dtype=bool)
    ylo, yhi = np.minimum(y1, y2), np.maximum(y1, y2)
    for r, y in enumerate(ys):
        # half-open rule: an edge counts when y lies in [ylo, yhi)
        active = (ylo <= y) & (y < yhi)
        if active.any():
            ax1, ay1, ax2, ay2 = x1[active], y1[active], x2[active], y2[active]
            xc = np.sort(ax1 + (y - ay1) * (ax2 - ax1) / (ay2 - ay1))
            n_right = len(xc) - np.searchsorted(xc, xs, side="right")
            row = (n_right % 2) == 1
            row |= np.isin(xs, xc)
        else:
            row = np.zeros(len(xs), dtype=bool)
        # boundary hits missed by the half-open rule: horizontal edges and top vertices
        touch = (ylo <= y) & (y <= yhi) & ((y1 == y2) | (yhi == y))
        for e in np.flatnonzero(touch):
            if y1[e] == y2[e]:
                lo, hi = min(x1[e], x2[e]), max(x1[e], x2[e])
                row |= (xs >= lo) & (xs <= hi)
            elif y == yhi[e]:
                row |= xs == (x1[e] if y1[e] == y else x2[e])
        inside[r] = row
    return inside


def pixel_centers(transform, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ox, oy, px, py = transform
    xs = ox + (np.arange(width) + 0.5) * px
    ys = oy - (np.arange(height) + 0.5) * py
    return xs, ys


def rasterize(partition: RegionPartition, transform, width: int, height: int) -> RegionMap:
    """Assign each pixel to the region containing its center.

    Points on a shared boundary go to the lowest region id.
    """
    if width <= 0 or height <= 0:
        raise DataError("zero-area raster")
    xs, ys = pixel_centers(transform, width, height)
    out = np.full((height, width), NODATA, dtype=np.uint32)
    # descending ids so that lower ids overwrite on ties
    for region in sorted(partition.regions, key=lambda r: -r.region_id):
        edges = _edges(region)
        ex = edges[:, [0, 2]]
        ey = edges[:, [1, 3]]
        cols = (xs >= ex.min()) & (xs <= ex.max())
        rows = (ys >= ey.min()) & (ys <= ey.max())
        if not cols.any() or not rows.any():
            continue
        ci, ri = np.flatnonzero(cols), np.flatnonzero(rows)
        sub = _region_mask(edges, xs[ci], ys[ri])
        block = out[ri[0]:ri[-1] + 1, ci[0]:ci[-1] + 1]
        block[sub] = region.region_id
    return RegionMap(out, tuple(transform), partition.ids)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

class MergeStep(NamedTuple):
    kept: int
    absorbed: int
    kept_count: int
    fallback: bool


def adjacency(rmap: RegionMap) -> dict[int, set[int]]:
    """Rook (4-connected) adjacency between regions."""
    idx = rmap.indices
    pairs = []
    for a, b in ((idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])):
        sel = (a != b) & (a != NODATA) & (b != NODATA)
        pairs.append(np.stack([a[sel], b[sel]], axis=1))
    pairs = np.unique(np.vstack(pairs).astype(np.int64), axis=0) if pairs else np.empty((0, 2))
    adj = {i: set() for i in rmap.ids}
    for a, b in pairs:
        adj[int(a)].add(int(b))
        adj[int(b)].add(int(a))
    return adj


def _centroids(rmap: RegionMap) -> dict[int, tuple[float, float]]:
    ids, pos = rmap.compact()
    rows, cols = np.divmod(np.arange(pos.size), rmap.width)
    sel = pos >= 0
    n = np.bincount(pos[sel], minlength=len(ids)).astype(np.float64)
    sr = np.bincount(pos[sel], weights=rows[sel], minlength=len(ids))
    sc = np.bincount(pos[sel], weights=cols[sel], minlength=len(ids))
    with np.errstate(invalid="ignore", divide="ignore"):
        return {int(i): (sr[k] / n[k], sc[k] / n[k]) for k, i in enumerate(ids)}


def merge_smallest(rmap: RegionMap, target_count: int) -> tuple[RegionMap, list[MergeStep]]:
    """Repeatedly merge the smallest region into its smallest rook neighbour.

    Ties are broken by the lower region id, and the merged region keeps the
    lower of the two ids. A region with no neighbour merges into the region
    with the nearest pixel centroid instead; such steps are flagged in the log.
    """
    n0 = len(rmap.ids)
    if not 1 <= target_count <= n0:
        raise DataError(f"target_count {target_count} must lie in [1, {n0}]")
    counts = rmap.counts()
    adj = adjacency(rmap)
    cents = _centroids(rmap)
    parent = {i: i for i in rmap.ids}
    steps: list[MergeStep] = []
    alive = set(rmap.ids)
    while len(alive) > target_count:
        small = min(alive, key=lambda i: (counts[i], i))
        nbrs = adj[small]
        fallback = not nbrs
        if fallback:
            cy, cx = cents[small]

            def dist(j):
                ry, rx = cents[j]
                d = (ry - cy) ** 2 + (rx - cx) ** 2
                return (d if np.isfinite(d) else np.inf, j)

            other = min(alive - {small}, key=dist)
            log.warning("region %d has no neighbour; merging with nearest centroid %d", small, other)
        else:
            other = min(nbrs, key=lambda i: (counts[i], i))
        keep, gone = min(small, other), max(small, other)
        total = counts[keep] + counts[gone]
        nk, ng = counts[keep], counts[gone]
        ck, cg = cents[keep], cents[gone]
        if nk + ng > 0:
            cents[keep] = tuple(
                (a * nk + b * ng) / (nk + ng) if nk and ng else (a if nk else b) for a, b in zip(ck, cg))
        counts[keep] = total
        merged = (adj[keep] | adj[gone]) - {keep, gone}
        for j in adj[gone]:
            adj[j].discard(gone)
        for j in merged:
            adj[j].add(keep)
        adj[keep] = merged
        del adj[gone], counts[gone], cents[gone]
        alive.discard(gone)
        parent[gone] = keep
        steps.append(MergeStep(keep, gone, total, fallback))

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    ids = np.asarray(rmap.ids, dtype=np.int64)
    roots = np.asarray([root(int(i)) for i in ids], dtype=np.uint32)
    _, pos = rmap.compact()
    flat = np.full(pos.size, NODATA, dtype=np.uint32)
    flat[pos >= 0] = roots[pos[pos >= 0]]
    out = RegionMap(flat.reshape(rmap.shape), rmap.transform, sorted(alive))
    return out, steps


def merge_groups(steps: list[MergeStep], ids) -> dict[int, list[int]]:
    """Surviving id -> sorted list of original ids it absorbed (itself included)."""
    parent = {int(i): int(i) for i in ids}
    for s in steps:
        parent[s.absorbed] = s.kept
    groups: dict[int, list[int]] = {}
    for i in parent:
        r = i
        while parent[r] != r:
            r = parent[r]
        groups.setdefault(r, []).append(i)
    return {k: sorted(v) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# IoU matching
# ---------------------------------------------------------------------------

def iou_match(a: RegionMap, b: RegionMap, threshold: float = 0.7) -> list[tuple[int, int, float]]:
    """Best-IoU partner in ``b`` for each region of ``a``, kept when IoU >= threshold."""
    if a.shape != b.shape or not np.allclose(a.transform, b.transform, rtol=0, atol=1e-9):
        raise DataError("misaligned rasters")
    if not 0 < threshold <= 1:
        raise DataError("threshold must lie in (0, 1]")
    ia = a.indices.ravel().astype(np.uint64)
    ib = b.indices.ravel().astype(np.uint64)
    both = (ia != NODATA) & (ib != NODATA)
    codes, inter = np.unique((ia[both] << np.uint64(32)) | ib[both], return_counts=True)
    na, nb = a.counts(), b.counts()
    best: dict[int, tuple[float, int]] = {}
    for code, n in zip(codes, inter):
        ra, rb = int(code >> np.uint64(32)), int(code & np.uint64(0xFFFFFFFF))
        iou = n / (na[ra] + nb[rb] - n)
        cur = best.get(ra)
        if cur is None or iou > cur[0] or (iou == cur[0] and rb < cur[1]):
            best[ra] = (iou, rb)
    return [(ra, rb, float(iou)) for ra, (iou, rb) in sorted(best.items()) if iou >= threshold]
