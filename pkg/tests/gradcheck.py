"""Central finite-difference check of the training objective's gradient."""

from __future__ import annotations

import numpy as np

from popgrid.grid import Grid
from popgrid.predictor import (
    FeatureConfig,
    PredictorParams,
    branch_forward,
    feature_matrix,
    forward_pixels,
    init_branch,
    init_predictor,
    n_features,
)
from popgrid.training import batch_objective

H = 1e-4
# only guards 0/0 for components that are exactly zero on both sides
DENOM_FLOOR = 1e-12
KINK_MARGIN = 1e-3
GROUP_MASKS = (("S1",), ("S2",), ("S1", "S2"), ("S1", "S2", "AUX"), ("AUX",))
VARIANTS = ("factored", "factored_trainable", "direct", "external_weights")


def make_instance(seed: int, variant: str | None = None, window_radius: int | None = None,
                  group_mask=None, hidden=(5, 4)):
    """A random small grid, region batch and model, or ``None`` if it sits near a kink."""
    rng = np.random.default_rng(seed)
    variant = variant or VARIANTS[seed % len(VARIANTS)]
    r = int(rng.integers(0, 2)) if window_radius is None else window_radius
    mask = GROUP_MASKS[int(rng.integers(len(GROUP_MASKS)))] if group_mask is None else group_mask
    h, w = 5, 6
    names = ["s1a", "s1b", "s2a", "s2b", "aux", "ext"]
    groups = ["S1", "S1", "S2", "S2", "AUX", "AUX"]
    vals = rng.normal(size=(6, h, w))
    vals[5] = rng.uniform(0.0, 1.0, size=(h, w))
    valid = rng.random((6, h, w)) > 0.1
    valid[5] = True
    grid = Grid(vals, valid, (0, h, 1, 1), names, groups)
    config = FeatureConfig(r, mask)
    exclude = ("ext",)
    nf = n_features(grid, config, exclude)
    fm = feature_matrix(grid, config, exclude)
    if len(fm.pixels) < 6:
        return None
    gain = rng.normal(1.0, 0.1, size=6)
    offset = rng.normal(0.0, 0.1, size=6)
    X = fm.jittered(gain, offset)
    ext = vals[5].ravel()[fm.pixels]
    n_regions = int(rng.integers(1, 4))
    region_index = rng.integers(0, n_regions, size=len(fm.pixels))
    region_index[:n_regions] = np.arange(n_regions)

    builtup = None
    if variant.startswith("factored"):
        builtup = init_branch(nf, hidden, "sigmoid", rng)
    base = "factored" if variant.startswith("factored") else variant
    params = init_predictor(base, nf, seed=int(rng.integers(2**31)), builtup=builtup, hidden=hidden,
                            external_weight_band="ext" if base == "external_weights" else None,
                            feature_config=config)
    occ = params.occupancy
    occ.head_w = rng.normal(0.0, 0.5, size=occ.head_w.shape)
    occ.head_b = rng.normal(0.0, 1.0, size=1)
    if variant == "factored_trainable":
        params = PredictorParams("factored", occ, params.builtup, False, None, config)
    external = ext if base == "external_weights" else None

    # reject instances whose ReLU pre-activations or log differences are near a kink
    for branch in ([params.occupancy] + ([params.builtup] if params.builtup is not None else [])):
        pre = branch_forward(X, branch)[2][1]
        scale = max(1.0, float(np.abs(X).max()))
        if any(np.min(np.abs(a)) < KINK_MARGIN * scale for a in pre):
            return None
    pop = forward_pixels(X, params, external)[0]
    sums = np.bincount(region_index, weights=pop, minlength=n_regions)
    log_c = np.log1p(sums) + rng.choice([-1, 1], n_regions) * rng.uniform(0.2, 2.0, n_regions)
    counts = np.maximum(np.expm1(log_c), 0.0)
    if np.any(np.abs(np.log1p(counts) - np.log1p(sums)) < KINK_MARGIN):
        return None
    return {"X": X, "region_index": region_index, "counts": counts, "params": params,
            "external": external, "variant": variant, "window_radius": r, "group_mask": mask}


def objective(inst, params) -> float:
    return batch_objective(inst["X"], inst["region_index"], inst["counts"], params, 0.01,
                           inst["external"], with_grad=False)[0].loss


def check(inst) -> tuple[float, int]:
    """Worst relative error over all trainable components, and the number checked."""
    params = inst["params"]
    _, grads = batch_objective(inst["X"], inst["region_index"], inst["counts"], params, 0.01, inst["external"])
    arrays = params.trainable()
    assert set(grads) == set(arrays)
    worst, n = 0.0, 0
    for name, arr in arrays.items():
        g = grads[name]
        assert g.shape == arr.shape
        for k in np.ndindex(arr.shape):
            plus = {key: a.copy() for key, a in arrays.items()}
            minus = {key: a.copy() for key, a in arrays.items()}
            plus[name][k] += H
            minus[name][k] -= H
            num = (objective(inst, params.with_trainable(plus)) - objective(inst, params.with_trainable(minus))) / (2 * H)
            ana = float(g[k])
            rel = abs(ana - num) / max(abs(ana), abs(num), DENOM_FLOOR)
            worst = max(worst, rel)
            n += 1
    return worst, n


def instances(count: int, start: int = 0):
    """``count`` accepted instances from consecutive seeds."""
    out, seed = [], start
    while len(out) < count:
        inst = make_instance(seed)
        if inst is not None:
            inst["seed"] = seed
            out.append(inst)
        seed += 1
    return out
