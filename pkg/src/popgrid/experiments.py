"""Experiment harnesses on synthetic worlds: architecture, bagging, modality and
census-coarsening studies.

Every harness returns plain dicts so results can be dumped to JSON directly.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import replace
from typing import Sequence

import numpy as np

from .dasymetric import dasymetric_rescale
from .ensemble import Bag, bag_predict
from .evaluation import evaluate_grid
from .grid import GridStack
from .predictor import (
    BranchParams,
    FeatureConfig,
    PredictorParams,
    init_predictor,
    n_features,
    pretrain_builtup,
)
from .synth import World, coarsen_census
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# Weight init from the built-up detector / separate occupancy factor
CASES = {
    "A": ("factored", True),
    "B": ("direct", True),
    "C": ("factored", False),
    "D": ("direct", False),
}


def pretrained_builtup(world: World, epochs: int = 200, seed: int = 0,
                       config: FeatureConfig | None = None) -> BranchParams:
    return pretrain_builtup(world.inputs, world.builtup_labels, epochs, seed=seed, config=config)


def fit_case(world: World, regions, census, case: str, seed: int, builtup: BranchParams,
             config: TrainConfig, features: FeatureConfig | None = None) -> PredictorParams:
    """Train one architecture case on (possibly coarsened) census data."""
    variant, transfer = CASES[case]
    features = features or FeatureConfig()
    nf = n_features(world.inputs[0], features)
    p0 = init_predictor(variant, nf, seed=seed, builtup=builtup if variant == "factored" else None,
                        feature_config=features)
    cfg = replace(config, seed=seed, transfer_hidden=transfer)
    params, _ = train(world.inputs, regions, census, p0, cfg, transfer_source=builtup)
    return params


def season_prediction(params: PredictorParams, stack: GridStack):
    """Average prediction of one model over all composites."""
    return bag_predict(Bag((params,), stack, "seasons_only"))[0]


def score(params: PredictorParams, world: World, regions, census) -> dict:
    """Pixel-level R²/MAE/RMSE of the raw and census-rescaled prediction."""
    pred = season_prediction(params, world.inputs)
    raw = evaluate_grid(pred, world.truth_population)
    adj, _ = dasymetric_rescale(pred, regions, census)
    resc = evaluate_grid(adj, world.truth_population)
    return {"r2": raw.r2, "mae": raw.mae, "rmse": raw.rmse,
            "r2_rescaled": resc.r2, "mae_rescaled": resc.mae, "rmse_rescaled": resc.rmse}


def architecture_ablation(world: World, n_regions: int = 16, seeds: Sequence[int] = range(5),
                          config: TrainConfig | None = None, builtup: BranchParams | None = None,
                          cases: Sequence[str] = ("A", "B", "C", "D"), pretrain_epochs: int = 200) -> dict:
    config = config or TrainConfig()
    builtup = builtup or pretrained_builtup(world, pretrain_epochs)
    regions, census = coarsen_census(world.regions, world.census, n_regions)
    out = {"n_regions": n_regions, "cases": {}}
    for case in cases:
        runs = []
        for seed in seeds:
            res = score(fit_case(world, regions, census, case, seed, builtup, config), world, regions, census)
            res["seed"] = int(seed)
            log.info("case %s seed %d: r2 %.3f", case, seed, res["r2"])
            runs.append(res)
        out["cases"][case] = {"runs": runs, "median_r2": statistics.median(r["r2"] for r in runs),
                              "median_r2_rescaled": statistics.median(r["r2_rescaled"] for r in runs)}
    return out


def scalability_ladder(world: World, ladder: Sequence[int] = (100, 64, 32, 16), seeds: Sequence[int] = range(5),
                       config: TrainConfig | None = None, builtup: BranchParams | None = None,
                       case: str = "A", pretrain_epochs: int = 200) -> dict:
    """Coarsen the census step by step and retrain at every level.

    Weight decay follows the difficulty of each level (``lambda_wd=None``).
    """
    config = replace(config or TrainConfig(), lambda_wd=None)
    builtup = builtup or pretrained_builtup(world, pretrain_epochs)
    regions, census = world.regions, world.census
    levels = []
    for n in ladder:
        regions, census = coarsen_census(regions, census, n)
        runs = []
        for seed in seeds:
            params = fit_case(world, regions, census, case, seed, builtup, config)
            res = score(params, world, regions, census)
            res["seed"] = int(seed)
            res["lambda_wd"] = params.provenance.get("lambda_wd")
            runs.append(res)
            log.info("ladder %d seed %d: r2 %.3f", n, seed, res["r2"])
        levels.append({"n_regions": n, "runs": runs,
                       "median_r2": statistics.median(r["r2"] for r in runs),
                       "median_r2_rescaled": statistics.median(r["r2_rescaled"] for r in runs)})
    return {"case": case, "levels": levels}


def _mse(pred, truth) -> float:
    d = pred.values[0].astype(np.float64) - truth.values[0].astype(np.float64)
    return float(np.mean(d * d))


def ensemble_ablation(world: World, n_members: int = 5, config: TrainConfig | None = None,
                      builtup: BranchParams | None = None, members: Sequence[PredictorParams] | None = None,
                      pretrain_epochs: int = 200) -> dict:
    """Single model / seasons only / members only / full bag, each averaged over repeats."""
    config = config or TrainConfig()
    if members is None:
        builtup = builtup or pretrained_builtup(world, pretrain_epochs)
        members = [fit_case(world, world.regions, world.census, "A", s, builtup, config) for s in range(n_members)]
    stack = world.inputs
    truth = world.truth_population
    rows = {}

    def run(bag):
        grid, count = bag_predict(bag)
        return evaluate_grid(grid, truth), count, grid

    single = [run(Bag((m,), GridStack((g,), (t,)), "single")) for m in members
              for g, t in zip(stack.members, stack.timestamps)]
    seasons = [run(Bag((m,), stack, "seasons_only")) for m in members]
    member_bags = [run(Bag(tuple(members), GridStack((g,), (t,)), "members_only"))
                   for g, t in zip(stack.members, stack.timestamps)]
    full = [run(Bag(tuple(members), stack, "full"))]
    for name, results in (("small", single), ("medium_seasons", seasons), ("medium_members", member_bags),
                          ("large", full)):
        rows[name] = {
            "estimates": results[0][1],
            "repeats": [{"r2": r.r2, "mae": r.mae, "rmse": r.rmse} for r, _, _ in results],
            "mean_r2": float(np.mean([r.r2 for r, _, _ in results])),
            "mean_mae": float(np.mean([r.mae for r, _, _ in results])),
            "mean_rmse": float(np.mean([r.rmse for r, _, _ in results])),
        }
    member_mse = [_mse(season_prediction(m, stack), truth) for m in members]
    rows["jensen"] = {"bag_mse": _mse(full[0][2], truth), "mean_member_mse": float(np.mean(member_mse))}
    return rows


def modality_ablation(world: World, masks: Sequence[Sequence[str]] = (("S1",), ("S2",), ("S1", "S2")),
                      seeds: Sequence[int] = (0,), config: TrainConfig | None = None,
                      pretrain_epochs: int = 200) -> dict:
    """Train the factored model with only some feature groups enabled.

    The built-up branch is pretrained on the same feature subset.
    """
    config = config or TrainConfig()
    out = {}
    for mask in masks:
        features = FeatureConfig(0, tuple(mask))
        builtup = pretrained_builtup(world, pretrain_epochs, config=features)
        runs = []
        for seed in seeds:
            params = fit_case(world, world.regions, world.census, "A", seed, builtup, config, features)
            res = score(params, world, world.regions, world.census)
            res["seed"] = int(seed)
            runs.append(res)
        out["+".join(mask)] = {"runs": runs, "median_r2": statistics.median(r["r2"] for r in runs)}
    return out


__all__ = ["CASES", "architecture_ablation", "ensemble_ablation", "fit_case", "modality_ablation",
           "pretrained_builtup", "scalability_ladder", "score", "season_prediction"]
