"""Bagging: averaging predictions over model instances and seasonal composites."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import Grid, GridStack, read_gridpack
from .predictor import FeatureConfig, PredictorParams, load_params, params_to_dict, population_forward

MODES = ("single", "seasons_only", "members_only", "full")


@dataclass(frozen=True)
class Bag:
    members: tuple[PredictorParams, ...]
    composites: GridStack
    mode: str = "full"

    def __post_init__(self):
        if not self.members:
            raise DataError("a bag needs at least one member")
        if len(self.composites) == 0:
            raise DataError("a bag needs at least one composite")
        if self.mode not in MODES:
            raise DataError(f"unknown bag mode {self.mode!r}")
        object.__setattr__(self, "members", tuple(self.members))


def member_key(p: PredictorParams) -> tuple:
    """Canonical sort key: seed, then a digest of the serialized parameters."""
    digest = hashlib.sha256(json.dumps(params_to_dict(p), sort_keys=True).encode()).hexdigest()
    return (int(p.provenance.get("seed", 0)), digest)


def _mean(arrays: list[np.ndarray]) -> np.ndarray:
    # offset by the first array: identical inputs reproduce it bit for bit
    ref = arrays[0]
    acc = np.zeros_like(ref)
    for a in arrays[1:]:
        acc += a - ref
    out = ref + acc / len(arrays)
    stack = np.stack(arrays)
    return np.clip(out, stack.min(axis=0), stack.max(axis=0))


def bag_predict(bag: Bag, config: FeatureConfig | None = None) -> tuple[Grid, int]:
    """Average the selected member x composite predictions.

    Returns a grid with bands population, builtup, occupancy (the latter two are
    averages of non-physical intermediate quantities, kept for inspection) and
    population_std (spread over all selected predictions), plus the number of
    averaged estimates.
    """
    members = sorted(bag.members, key=member_key)
    order = sorted(range(len(bag.composites)), key=lambda i: bag.composites.timestamps[i])
    composites = [bag.composites[i] for i in order]
    if bag.mode in ("single", "members_only"):
        composites = composites[:1]
    if bag.mode in ("single", "seasons_only"):
        members = members[:1]
    if not members or not composites:
        raise DataError("empty selection")

    per_member = []
    all_pop = []
    valid = None
    for p in members:
        preds = [population_forward(g, p, config) for g in composites]
        all_pop += [pr.values[0] for pr in preds]
        per_member.append(_mean([pr.values for pr in preds]))
        v = np.logical_and.reduce([pr.valid for pr in preds])
        valid = v if valid is None else valid & v
    mean = _mean(per_member)
    std = np.stack(all_pop).std(axis=0)
    ref = composites[0]
    out = np.concatenate([mean, std[None]])
    mask = np.concatenate([valid, valid[:1]])
    grid = Grid(out, mask, ref.transform, ["population", "builtup", "occupancy", "population_std"], ["AUX"] * 4)
    return grid, len(members) * len(composites)


def load_bag(manifest_path, stack: GridStack | None = None) -> Bag:
    """Read a bag manifest ``{"params": [...], "composites": [{"label", "path"}], "mode"}``.

    Relative paths resolve against the manifest's directory. ``stack`` overrides
    the composites listed in the manifest.
    """
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        members = tuple(load_params(base / p) for p in doc["params"])
        if stack is None:
            comps = doc["composites"]
            stack = GridStack(tuple(read_gridpack(base / c["path"]) for c in comps),
                              tuple(c["label"] for c in comps))
        return Bag(members, stack, doc.get("mode", "full"))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed bag manifest: {exc}") from None
