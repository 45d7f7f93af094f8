import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrid.errors import DataError
from popgrid.regions import (
    NODATA,
    Region,
    RegionMap,
    RegionPartition,
    adjacency,
    iou_match,
    merge_groups,
    merge_smallest,
    parse_regions,
    pixel_centers,
    rasterize,
)


def feature(rid, geom_type, coords):
    return {"type": "Feature", "properties": {"region_id": rid}, "geometry": {"type": geom_type, "coordinates": coords}}


def collection(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def square(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))


def convex_hull(points):
    pts = sorted(map(tuple, points))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return lower[:-1] + upper[:-1]


def cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def inside_convex(hull, x, y):
    # counter-clockwise hull: inside or on boundary iff no edge has the point strictly to its right
    n = len(hull)
    return all(cross(hull[i], hull[(i + 1) % n], (x, y)) >= 0 for i in range(n))


class TestParse:
    def test_unit_square(self):
        part = parse_regions(collection(feature(7, "Polygon", [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]])))
        assert part.ids == [7]
        (region,) = part.regions
        assert len(region.polygons) == 1 and len(region.polygons[0]) == 1
        assert len(region.polygons[0][0]) == 5

    def test_multipolygon_with_hole(self):
        coords = [[[[0, 0], [4, 0], [4, 4], [0, 4], [0, 0]], [[1, 1], [2, 1], [2, 2], [1, 1]]],
                  [[[10, 10], [11, 10], [11, 11], [10, 10]]]]
        part = parse_regions(collection(feature(1, "MultiPolygon", coords)))
        assert [len(p) for p in part.regions[0].polygons] == [2, 1]

    def test_duplicate_id(self):
        sq = [[[0, 0], [1, 0], [1, 1], [0, 0]]]
        with pytest.raises(DataError, match="duplicate region_id"):
            parse_regions(collection(feature(3, "Polygon", sq), feature(3, "Polygon", sq)))

    def test_unsupported_geometry(self):
        with pytest.raises(DataError, match="unsupported geometry"):
            parse_regions(collection(feature(1, "LineString", [[0, 0], [1, 1]])))

    def test_missing_id(self):
        doc = {"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {}, "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [0, 1]]]}}]}
        with pytest.raises(DataError, match="missing region_id"):
            parse_regions(json.dumps(doc))

    def test_malformed_json(self):
        with pytest.raises(DataError, match="malformed JSON"):
            parse_regions("{nope")

    def test_open_ring_is_closed(self):
        part = parse_regions(collection(feature(1, "Polygon", [[[0, 0], [1, 0], [1, 1]]])))
        ring = part.regions[0].polygons[0][0]
        assert ring[0] == ring[-1] and len(ring) == 4

    def test_partition_rejects_open_ring(self):
        with pytest.raises(DataError):
            RegionPartition((Region(1, ((((0, 0), (1, 0), (1, 1), (0, 1)),),)),))


class TestRasterize:
    # 10x10 raster, unit pixels, origin top-left at (0, 10)
    T = (0.0, 10.0, 1.0, 1.0)

    def test_block_of_six(self):
        # centres x in {2.5, 3.5, 4.5}, y in {6.5, 7.5}
        part = RegionPartition((Region(5, ((square(2.2, 6.2, 4.8, 7.8),),)),))
        rmap = rasterize(part, self.T, 10, 10)
        expect = np.full((10, 10), NODATA, np.uint32)
        expect[2:4, 2:5] = 5
        np.testing.assert_array_equal(rmap.indices, expect)

    def test_polygon_between_centres(self):
        part = RegionPartition((Region(1, ((square(2.6, 3.6, 3.4, 4.4),),)),))
        rmap = rasterize(part, self.T, 10, 10)
        assert np.all(rmap.indices == NODATA)
        assert rmap.ids == (1,)

    def test_shared_edge_goes_to_lower_id(self):
        # shared edge x = 3.5 runs through a column of pixel centres
        part = RegionPartition((Region(9, ((square(3.5, 0, 10, 10),),)), Region(4, ((square(0, 0, 3.5, 10),),))))
        rmap = rasterize(part, self.T, 10, 10)
        assert np.all(rmap.indices[:, 3] == 4)
        assert np.all(rmap.indices[:, :3] == 4)
        assert np.all(rmap.indices[:, 4:] == 9)

    def test_hole_subtracts(self):
        part = RegionPartition((Region(1, ((square(0, 0, 10, 10), square(4, 4, 6, 6)),),),))
        rmap = rasterize(part, self.T, 10, 10)
        assert np.all(rmap.indices[4:6, 4:6] == NODATA)
        assert np.count_nonzero(rmap.indices == 1) == 96

    def test_zero_area(self):
        with pytest.raises(DataError, match="zero-area"):
            rasterize(RegionPartition(()), self.T, 0, 5)

    def test_concave_polygon_matches_even_odd(self):
        # U shape
        ring = ((1, 1), (9, 1), (9, 9), (6, 9), (6, 4), (4, 4), (4, 9), (1, 9), (1, 1))
        rmap = rasterize(RegionPartition((Region(2, ((ring,),)),)), self.T, 10, 10)
        xs, ys = pixel_centers(self.T, 10, 10)
        for r, y in enumerate(ys):
            for c, x in enumerate(xs):
                crossings = 0
                for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
                    if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
                        crossings += 1
                assert (rmap.indices[r, c] == 2) == bool(crossings % 2)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_convex_polygons_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-2, 22, size=(rng.integers(3, 12), 2))
        hull = convex_hull(pts)
        if len(hull) < 3:
            return
        ring = tuple(hull) + (hull[0],)
        transform = (0.0, 20.0, 1.0, 1.0)
        rmap = rasterize(RegionPartition((Region(1, ((ring,),)),)), transform, 20, 20)
        xs, ys = pixel_centers(transform, 20, 20)
        oracle = np.array([[inside_convex(hull, x, y) for x in xs] for y in ys])
        np.testing.assert_array_equal(rmap.indices == 1, oracle)


class TestRegionMap:
    def test_round_trip_through_grid(self):
        idx = np.array([[1, 1, NODATA], [2, 2, 3]], np.uint32)
        rmap = RegionMap(idx, (0, 2, 1, 1))
        back = RegionMap.from_grid(rmap.to_grid())
        np.testing.assert_array_equal(back.indices, idx)
        assert back.ids == (1, 2, 3)

    def test_counts_include_empty_ids(self):
        rmap = RegionMap(np.array([[1, 1]], np.uint32), ids=(1, 5))
        assert rmap.counts() == {1: 2, 5: 0}

    def test_unknown_index_rejected(self):
        with pytest.raises(DataError):
            RegionMap(np.array([[1, 2]], np.uint32), ids=(1,))


def row_map(counts):
    cells = []
    for rid, n in enumerate(counts, start=1):
        cells += [rid] * n
    return RegionMap(np.array([cells], np.uint32))


class TestMerge:
    def test_four_in_a_row(self):
        merged, steps = merge_smallest(row_map([1, 2, 3, 4]), 3)
        assert merged.counts() == {1: 3, 3: 3, 4: 4}
        assert steps == [(1, 2, 3, False)]

    def test_identity(self):
        rmap = row_map([1, 2, 3])
        merged, steps = merge_smallest(rmap, 3)
        assert steps == []
        np.testing.assert_array_equal(merged.indices, rmap.indices)

    def test_to_one(self):
        rmap = row_map([3, 1, 4, 1, 5])
        merged, steps = merge_smallest(rmap, 1)
        assert merged.ids == (1,)
        assert merged.counts() == {1: 14}
        assert len(steps) == 4

    def test_keeps_lower_id(self):
        # region 2 (one pixel) is smallest, neighbours 1 (3 px) and 3 (2 px): merges with 3, keeps id 2
        merged, steps = merge_smallest(row_map([3, 1, 2]), 2)
        assert steps[0].kept == 2 and steps[0].absorbed == 3
        assert merged.counts() == {1: 3, 2: 3}

    def test_disconnected_region_falls_back_to_nearest_centroid(self):
        idx = np.full((5, 9), NODATA, np.uint32)
        idx[0, 0:3] = 1
        idx[0, 3:6] = 2
        idx[4, 8] = 3
        merged, steps = merge_smallest(RegionMap(idx), 2)
        assert steps[0].fallback
        assert steps[0].absorbed == 3 and steps[0].kept == 2
        assert merged.counts() == {1: 3, 2: 4}

    def test_bad_target(self):
        with pytest.raises(DataError):
            merge_smallest(row_map([1, 2]), 3)
        with pytest.raises(DataError):
            merge_smallest(row_map([1, 2]), 0)

    def test_adjacency_is_rook(self):
        idx = np.array([[1, 2], [3, 4]], np.uint32)
        adj = adjacency(RegionMap(idx))
        assert adj[1] == {2, 3} and adj[4] == {2, 3}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_conservation_and_refinement(self, seed, target):
        rng = np.random.default_rng(seed)
        n = 12
        h, w = 16, 16
        pts = rng.uniform(0, 16, size=(n, 2))
        rr, cc = np.mgrid[0:h, 0:w]
        d = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
        idx = (np.argmin(d, axis=-1) + 1).astype(np.uint32)
        idx[rng.random((h, w)) < 0.05] = NODATA
        rmap = RegionMap(idx)
        target = min(target, len(rmap.ids))
        merged, steps = merge_smallest(rmap, target)
        assert len(merged.ids) == target
        assert len(steps) == len(rmap.ids) - target
        assert np.count_nonzero(merged.indices != NODATA) == np.count_nonzero(idx != NODATA)
        groups = merge_groups(steps, rmap.ids)
        assert sorted(groups) == list(merged.ids)
        for keep, members in groups.items():
            assert keep == min(members)
            np.testing.assert_array_equal(np.isin(idx, members), merged.indices == keep)


class TestIoU:
    def test_identity(self):
        rmap = row_map([2, 3, 4])
        assert iou_match(rmap, rmap) == [(1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0)]

    def test_disjoint(self):
        a = RegionMap(np.array([[1, 1, NODATA, NODATA]], np.uint32))
        b = RegionMap(np.array([[NODATA, NODATA, 2, 2]], np.uint32))
        assert iou_match(a, b, 0.01) == []

    def test_half_overlap_is_one_third(self):
        a = np.full((10, 15), NODATA, np.uint32)
        b = a.copy()
        a[:, 0:10] = 1
        b[:, 5:15] = 2
        ra, rb = RegionMap(a), RegionMap(b)
        assert iou_match(ra, rb, 0.7) == []
        ((ia, ib, iou),) = iou_match(ra, rb, 0.3)
        assert (ia, ib) == (1, 2)
        assert abs(iou - 1 / 3) < 1e-12

    def test_misaligned(self):
        with pytest.raises(DataError, match="misaligned"):
            iou_match(row_map([1, 2]), RegionMap(np.ones((2, 3), np.uint32)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_values_in_unit_interval_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = RegionMap(rng.integers(1, 5, size=(8, 8)).astype(np.uint32))
        b = RegionMap(rng.integers(1, 5, size=(8, 8)).astype(np.uint32))
        for _, _, iou in iou_match(a, b, 1e-9):
            assert 0 < iou <= 1
        assert iou_match(a, a) == [(i, i, 1.0) for i in a.ids]
        ab = {(x, y): v for x, y, v in iou_match(a, b, 1e-9)}
        ba = {(y, x): v for x, y, v in iou_match(b, a, 1e-9)}
        for k in set(ab) & set(ba):
            assert ab[k] == ba[k]
