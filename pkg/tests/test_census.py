import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrid.census import (
    CensusTable,
    difficulty,
    load_census_csv,
    map_difficulty,
    parse_census_csv,
    write_census_csv,
    zonal_sum,
)
from popgrid.errors import DataError
from popgrid.grid import Grid
from popgrid.regions import NODATA, RegionMap


class TestCensusTable:
    def test_parse(self):
        t = parse_census_csv("region_id,count\n3,10.5")
        assert t.entries == {3: 10.5}

    def test_negative(self):
        with pytest.raises(DataError, match="negative count"):
            parse_census_csv("region_id,count\n3,-1")

    def test_duplicate(self):
        with pytest.raises(DataError, match="duplicate region_id"):
            parse_census_csv("region_id,count\n3,1\n3,2\n")

    @pytest.mark.parametrize("text", ["id,count\n1,2", "region_id,count\n1", "region_id,count\nx,2",
                                      "region_id,count\n1,nan"])
    def test_malformed(self, text):
        with pytest.raises(DataError, match="malformed row"):
            parse_census_csv(text)

    def test_constructor_rejects_negative(self):
        with pytest.raises(DataError, match="negative count"):
            CensusTable({1: -0.5})

    def test_csv_round_trip(self, tmp_path):
        t = CensusTable({5: 1.25, 2: 0.1, 9: 1e6 / 3})
        write_census_csv(t, tmp_path / "c.csv")
        back = load_census_csv(tmp_path / "c.csv")
        assert back.entries == t.entries
        assert list(back.entries) == [2, 5, 9]
        assert (tmp_path / "c.csv").read_bytes().startswith(b"region_id,count\n2,")

    def test_total_is_exact_sum(self):
        assert CensusTable({1: 0.1, 2: 0.2, 3: 0.3}).total() == 0.6


class TestZonalSum:
    def test_two_by_two(self):
        g = Grid(np.array([[1.0, 2.0], [3.0, 4.0]]))
        rmap = RegionMap(np.array([[0, 0], [1, 1]], np.uint32))
        assert zonal_sum(g, rmap) == {0: 3.0, 1: 7.0}

    def test_all_invalid(self):
        g = Grid(np.ones((2, 2)), np.zeros((2, 2), bool))
        rmap = RegionMap(np.array([[0, 0], [1, 1]], np.uint32))
        sums = zonal_sum(g, rmap)
        assert sums == {0: 0.0, 1: 0.0}
        assert sums.empty == {0, 1}

    def test_misaligned(self):
        with pytest.raises(DataError, match="misaligned"):
            zonal_sum(Grid(np.ones((2, 3))), RegionMap(np.zeros((2, 2), np.uint32)))
        with pytest.raises(DataError, match="misaligned"):
            zonal_sum(Grid(np.ones((2, 2)), transform=(0, 0, 2, 2)), RegionMap(np.zeros((2, 2), np.uint32)))

    def test_random_matches_loop(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(64, 64)) * 100
        valid = rng.random((64, 64)) > 0.1
        idx = rng.integers(0, 5, size=(64, 64)).astype(np.uint32)
        idx[rng.random((64, 64)) < 0.05] = NODATA
        sums = zonal_sum(Grid(vals, valid), RegionMap(idx))
        expect = {}
        for r in range(64):
            for c in range(64):
                if idx[r, c] != NODATA and valid[r, c]:
                    expect[int(idx[r, c])] = expect.get(int(idx[r, c]), 0.0) + vals[r, c]
        for k, v in expect.items():
            assert abs(sums[k] - v) <= 1e-9 * max(1.0, abs(v))

    def test_one_region_equals_global_sum(self):
        rng = np.random.default_rng(1)
        vals = rng.random((10, 10))
        sums = zonal_sum(Grid(vals), RegionMap(np.zeros((10, 10), np.uint32)))
        assert abs(sums[0] - vals.sum()) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 10))
    def test_partition_additivity(self, seed, n):
        rng = np.random.default_rng(seed)
        vals = rng.random((12, 9)) * 1000
        valid = rng.random((12, 9)) > 0.2
        idx = rng.integers(0, n, size=(12, 9)).astype(np.uint32)
        sums = zonal_sum(Grid(vals, valid), RegionMap(idx))
        total = vals[valid].sum()
        assert abs(sum(sums.values()) - total) <= 1e-12 * max(1.0, total)


class TestDifficulty:
    @pytest.mark.parametrize("side,n,expected", [(42, 2318, 0.8), (83, 381, 18), (38, 945, 1.5), (136, 1377, 14)])
    def test_reference_values(self, side, n, expected):
        d = difficulty(side**2, 1.0, n)
        assert d.upscaling == side**2
        assert abs(d.difficulty - expected) <= 0.6

    def test_rwanda(self):
        assert abs(difficulty(83**2, 1.0, 381).difficulty - 18.08) < 0.01

    def test_s_equals_n(self):
        assert difficulty(50.0, 1.0, 50).difficulty == 1.0

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0), (-1, 1, 1)])
    def test_invalid(self, args):
        with pytest.raises(DataError):
            difficulty(*args)

    def test_map_difficulty_uses_mean_area(self):
        idx = np.zeros((20, 30), np.uint32)
        idx[:, 10:] = 1
        idx[:, 25:] = 2
        d = map_difficulty(RegionMap(idx, (0, 200, 10, 10)), 100)
        assert d.n_regions == 3
        assert d.upscaling == pytest.approx(2.0)
        assert d.difficulty == pytest.approx(2.0 / 3)
