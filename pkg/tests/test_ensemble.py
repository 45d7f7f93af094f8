import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrid.ensemble import Bag, _mean, bag_predict, load_bag
from popgrid.errors import DataError
from popgrid.grid import Grid, GridStack, write_gridpack
from popgrid.predictor import init_branch, init_predictor, population_forward, save_params

SEASONS = ("spring", "summer", "autumn", "winter")


def composites(n=4, seed=0, h=6, w=7):
    rng = np.random.default_rng(seed)
    grids = tuple(Grid(rng.normal(size=(3, h, w)), None, (0, h, 1, 1), ["a", "b", "c"], ["S1", "S2", "S2"])
                  for _ in range(n))
    return GridStack(grids, SEASONS[:n] if n <= 4 else tuple(f"t{i}" for i in range(n)))


def members(n=5, seed=0):
    out = []
    for k in range(n):
        rng = np.random.default_rng(100 + k + seed)
        p = init_predictor("factored", 3, seed=k, builtup=init_branch(3, (4, 4), "sigmoid", rng), hidden=(4, 4))
        p.occupancy.head_w = rng.normal(size=4)
        out.append(p)
    return out


class TestBagPredict:
    def test_estimate_count(self):
        _, n = bag_predict(Bag(members(5), composites(4)))
        assert n == 20

    @pytest.mark.parametrize("mode,count", [("single", 1), ("seasons_only", 4), ("members_only", 5), ("full", 20)])
    def test_modes(self, mode, count):
        assert bag_predict(Bag(members(5), composites(4), mode))[1] == count

    def test_one_by_one_equals_forward(self):
        p = members(1)[0]
        comp = composites(1)
        out, n = bag_predict(Bag([p], comp))
        assert n == 1
        np.testing.assert_array_equal(out.values[:3], population_forward(comp[0], p).values)
        assert np.all(out.values[3] == 0.0)

    def test_identical_members(self):
        p = members(1)[0]
        comp = composites(4)
        full, _ = bag_predict(Bag([p.with_trainable(p.trainable()) for _ in range(3)], comp))
        seasons, _ = bag_predict(Bag([p], comp, "seasons_only"))
        np.testing.assert_array_equal(full.values[0], seasons.values[0])

    def test_permutation_invariant(self):
        ms = members(4)
        comp = composites(3)
        a, _ = bag_predict(Bag(ms, comp))
        rev = GridStack(tuple(reversed(comp.members)), tuple(reversed(comp.timestamps)))
        b, _ = bag_predict(Bag(list(reversed(ms)), rev))
        assert a.equals(b)

    def test_within_member_range(self):
        ms, comp = members(5), composites(4)
        out, _ = bag_predict(Bag(ms, comp))
        preds = np.stack([population_forward(g, p).values[0] for p in ms for g in comp])
        assert np.all(out.values[0] >= preds.min(axis=0))
        assert np.all(out.values[0] <= preds.max(axis=0))
        np.testing.assert_allclose(out.values[0], preds.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(out.values[3], preds.std(axis=0), rtol=1e-12)

    def test_jensen(self):
        ms, comp = members(5), composites(4)
        truth = np.random.default_rng(9).random((6, 7))
        out, _ = bag_predict(Bag(ms, comp, "members_only"))
        member_mse = [np.mean((population_forward(comp[0], p).values[0] - truth) ** 2) for p in ms]
        assert np.mean((out.values[0] - truth) ** 2) <= np.mean(member_mse) + 1e-12

    def test_invalid_bags(self):
        with pytest.raises(DataError):
            Bag([], composites(1))
        with pytest.raises(DataError):
            Bag(members(1), composites(1), "half")


class TestMean:
    def test_identical_arrays_bit_exact(self):
        a = np.random.default_rng(0).normal(size=50)
        assert np.array_equal(_mean([a, a.copy(), a.copy()]), a)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), min_size=1, max_size=8))
    def test_bounded_by_extremes(self, rows):
        arrs = [np.asarray(r) for r in rows]
        m = _mean(arrs)
        stack = np.stack(arrs)
        assert np.all(m >= stack.min(axis=0)) and np.all(m <= stack.max(axis=0))


class TestLoadBag:
    def test_manifest(self, tmp_path):
        ms, comp = members(2), composites(2)
        for i, p in enumerate(ms):
            save_params(p, tmp_path / f"m{i}.json")
        for lab, g in zip(comp.timestamps, comp):
            write_gridpack(g, tmp_path / f"{lab}.gpk")
        doc = {"params": ["m0.json", "m1.json"], "mode": "full",
               "composites": [{"label": lab, "path": f"{lab}.gpk"} for lab in comp.timestamps]}
        (tmp_path / "bag.json").write_text(json.dumps(doc))
        bag = load_bag(tmp_path / "bag.json")
        out, n = bag_predict(bag)
        assert n == 4
        ref, _ = bag_predict(Bag(ms, GridStack(tuple(g.replace(values=g.values.astype(np.float32)) for g in comp),
                                                comp.timestamps)))
        np.testing.assert_allclose(out.values, ref.values, rtol=1e-12)

    def test_malformed(self, tmp_path):
        (tmp_path / "bag.json").write_text("{}")
        with pytest.raises(DataError):
            load_bag(tmp_path / "bag.json")
