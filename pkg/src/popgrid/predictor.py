"""Per-pixel population model: built-up score times occupancy rate.

Both factors come from small MLPs (ReLU hidden layers, scalar head) evaluated on
the band values of a pixel, optionally over its 3x3 neighbourhood. The built-up
head ends in a sigmoid, the occupancy head in a softplus. Three variants exist:

``factored``
    population = builtup(x) * occupancy(x), built-up branch normally frozen.
``direct``
    population = softplus head of a single branch (stored in ``occupancy``).
``external_weights``
    population = band[external_weight_band] * occupancy(x).

Gradients are derived by hand; :func:`backward` consumes the cache produced by
:func:`forward_pixels`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .grid import GROUPS, Grid, GridStack

VARIANTS = ("factored", "direct", "external_weights")


@dataclass(frozen=True)
class FeatureConfig:
    window_radius: int = 0
    group_mask: tuple[str, ...] = GROUPS

    def __post_init__(self):
        if self.window_radius not in (0, 1):
            raise DataError("window_radius must be 0 or 1")
        mask = tuple(g for g in GROUPS if g in set(self.group_mask))
        if not mask or len(mask) != len(set(self.group_mask)):
            raise DataError(f"invalid group mask {self.group_mask}")
        object.__setattr__(self, "group_mask", mask)

    @property
    def window(self) -> int:
        return (2 * self.window_radius + 1) ** 2


def feature_bands(grid: Grid, config: FeatureConfig, exclude: Sequence[str] = ()) -> list[int]:
    """Band indices feeding the features: group order S1, S2, AUX, then grid order."""
    out = []
    for g in config.group_mask:
        out += [b for b in range(grid.bands) if grid.groups[b] == g and grid.band_names[b] not in exclude]
    return out


def n_features(grid: Grid, config: FeatureConfig, exclude: Sequence[str] = ()) -> int:
    return len(feature_bands(grid, config, exclude)) * config.window


def _mirror(i: int, n: int) -> int:
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def extract_features(grid: Grid, config: FeatureConfig, pixel_index: tuple[int, int],
                     exclude: Sequence[str] = ()) -> np.ndarray:
    """Feature vector of one pixel, ordered (group, band, window row-major).

    Window cells are mirror-padded at the raster border; invalid window cells
    read as 0. The pixel must be valid in every feature band.
    """
    row, col = pixel_index
    bands = feature_bands(grid, config, exclude)
    if not bands:
        raise DataError("no bands selected by the group mask")
    if not all(grid.valid[b, row, col] for b in bands):
        raise DataError(f"pixel {pixel_index} is invalid")
    r = config.window_radius
    h, w = grid.shape
    out = []
    for b in bands:
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                y, x = _mirror(row + dy, h), _mirror(col + dx, w)
                out.append(float(grid.values[b, y, x]) if grid.valid[b, y, x] else 0.0)
    return np.asarray(out)


@dataclass
class FeatureMatrix:
    """Features of all valid pixels of a grid.

    ``pixels`` are flat (row-major) pixel indices, ``X`` has one row per pixel,
    ``feature_band`` maps each column to its grid band and ``window_valid``
    (``None`` when everything is valid) marks columns read from valid cells.
    """

    pixels: np.ndarray
    X: np.ndarray
    feature_band: np.ndarray
    window_valid: np.ndarray | None

    def jittered(self, gain: np.ndarray, offset: np.ndarray, rows=slice(None)) -> np.ndarray:
        """Features after the per-band affine map ``a*x + b`` was applied to the grid."""
        X = self.X[rows] * gain[self.feature_band] + offset[self.feature_band]
        if self.window_valid is not None:
            X = np.where(self.window_valid[rows], X, 0.0)
        return X


def feature_matrix(grid: Grid, config: FeatureConfig, exclude: Sequence[str] = (),
                   pixel_mask: np.ndarray | None = None) -> FeatureMatrix:
    bands = feature_bands(grid, config, exclude)
    if not bands:
        raise DataError("no bands selected by the group mask")
    r = config.window_radius
    h, w = grid.shape
    valid = grid.valid[bands]
    vals = np.where(valid, grid.values[bands].astype(np.float64), 0.0)
    center_ok = valid.all(axis=0)
    if pixel_mask is not None:
        center_ok &= pixel_mask
    pixels = np.flatnonzero(center_ok)
    if r:
        vals = np.pad(vals, ((0, 0), (r, r), (r, r)), mode="symmetric")
        valid = np.pad(valid, ((0, 0), (r, r), (r, r)), mode="symmetric")
    cols, vcols, fband = [], [], []
    for k, b in enumerate(bands):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                sl = (k, slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
                cols.append(vals[sl].ravel()[pixels])
                vcols.append(valid[sl].ravel()[pixels])
                fband.append(b)
    X = np.stack(cols, axis=1)
    wv = np.stack(vcols, axis=1)
    return FeatureMatrix(pixels, X, np.asarray(fband), None if wv.all() else wv)


# ---------------------------------------------------------------------------
# Branches
# ---------------------------------------------------------------------------

def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inverse(y: float) -> float:
    """Bias ``b`` with ``softplus(b) == y``."""
    if y <= 0:
        raise DataError("softplus target must be positive")
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class BranchParams:
    hidden: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in ("sigmoid", "softplus"):
            raise DataError(f"unknown head activation {self.activation!r}")
        self.hidden = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in self.hidden]
        self.head_w = np.asarray(self.head_w, dtype=np.float64).reshape(-1)
        self.head_b = np.asarray(self.head_b, dtype=np.float64).reshape(1)
        width = self.hidden[0][0].shape[0] if self.hidden else self.head_w.shape[0]
        for W, b in self.hidden:
            if W.ndim != 2 or W.shape[0] != width or b.shape != (W.shape[1],):
                raise DataError("inconsistent hidden layer shapes")
            width = W.shape[1]
        if self.head_w.shape != (width,):
            raise DataError("head weight does not match last hidden width")

    @property
    def n_inputs(self) -> int:
        return self.hidden[0][0].shape[0] if self.hidden else self.head_w.shape[0]

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.hidden):
            out[f"{prefix}.W{i}"] = W
            out[f"{prefix}.b{i}"] = b
        out[f"{prefix}.head_w"] = self.head_w
        out[f"{prefix}.head_b"] = self.head_b
        return out

    def with_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> "BranchParams":
        hidden = [(arrays.get(f"{prefix}.W{i}", W), arrays.get(f"{prefix}.b{i}", b))
                  for i, (W, b) in enumerate(self.hidden)]
        return BranchParams(hidden, arrays.get(f"{prefix}.head_w", self.head_w),
                            arrays.get(f"{prefix}.head_b", self.head_b), self.activation)

    def copy(self) -> "BranchParams":
        return BranchParams([(W.copy(), b.copy()) for W, b in self.hidden], self.head_w.copy(),
                            self.head_b.copy(), self.activation)


def init_branch(n_inputs: int, hidden: Sequence[int] = (64, 64), activation: str = "softplus",
                rng: np.random.Generator | int = 0, head_scale: float | None = None) -> BranchParams:
    """He-initialised hidden layers; the head is scaled by ``head_scale`` (0 gives a constant output)."""
    rng = np.random.default_rng(rng)
    layers = []
    width = n_inputs
    for h in hidden:
        layers.append((rng.normal(0.0, np.sqrt(2.0 / width), size=(width, h)), np.zeros(h)))
        width = h
    scale = np.sqrt(1.0 / width) if head_scale is None else head_scale
    head_w = rng.normal(0.0, 1.0, size=width) * scale
    return BranchParams(layers, head_w, np.zeros(1), activation)


def branch_forward(X: np.ndarray, branch: BranchParams):
    """Return ``(output, logits, cache)`` for a batch of feature rows."""
    if X.ndim != 2 or X.shape[1] != branch.n_inputs:
        raise DataError(f"shape mismatch: features {X.shape}, branch expects {branch.n_inputs} inputs")
    acts, pre = [X], []
    h = X
    for W, b in branch.hidden:
        a = h @ W + b
        pre.append(a)
        h = np.maximum(a, 0.0)
        acts.append(h)
    z = h @ branch.head_w + branch.head_b[0]
    out = sigmoid(z) if branch.activation == "sigmoid" else softplus(z)
    return out, z, (acts, pre, z, out)


def branch_backward(branch: BranchParams, cache, dout: np.ndarray, prefix: str,
                    wrt_logits: bool = False) -> dict[str, np.ndarray]:
    acts, pre, z, out = cache
    if wrt_logits:
        dz = dout
    elif branch.activation == "sigmoid":
        dz = dout * out * (1.0 - out)
    else:
        dz = dout * sigmoid(z)
    grads = {f"{prefix}.head_w": acts[-1].T @ dz, f"{prefix}.head_b": np.array([dz.sum()])}
    dh = np.outer(dz, branch.head_w)
    for i in range(len(branch.hidden) - 1, -1, -1):
        W, _ = branch.hidden[i]
        da = np.where(pre[i] > 0, dh, 0.0)
        grads[f"{prefix}.W{i}"] = acts[i].T @ da
        grads[f"{prefix}.b{i}"] = da.sum(axis=0)
        if i:
            dh = da @ W.T
    return grads


def builtup_forward(features: np.ndarray, params: BranchParams) -> np.ndarray:
    """Built-up score in (0, 1) for one feature vector or a matrix of them."""
    X = np.atleast_2d(features)
    out = branch_forward(X, params)[0]
    return out if np.ndim(features) == 2 else float(out[0])


def occupancy_forward(features: np.ndarray, params: BranchParams) -> np.ndarray:
    """Occupancy rate (> 0) for one feature vector or a matrix of them."""
    X = np.atleast_2d(features)
    out = branch_forward(X, params)[0]
    return out if np.ndim(features) == 2 else float(out[0])


# ---------------------------------------------------------------------------
# Full predictor
# ---------------------------------------------------------------------------

@dataclass
class PredictorParams:
    variant: str
    occupancy: BranchParams
    builtup: BranchParams | None = None
    builtup_frozen: bool = True
    external_weight_band: str | None = None
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")
        if self.variant == "factored" and self.builtup is None:
            raise DataError("factored variant needs a built-up branch")
        if self.variant != "factored" and self.builtup is not None:
            raise DataError(f"{self.variant} variant has no built-up branch")
        if self.variant == "external_weights" and not self.external_weight_band:
            raise DataError("external_weights variant needs external_weight_band")
        if self.builtup is not None and self.builtup.activation != "sigmoid":
            raise DataError("built-up branch must end in a sigmoid")
        if self.occupancy.activation != "softplus":
            raise DataError("occupancy branch must end in a softplus")

    @property
    def exclude(self) -> tuple[str, ...]:
        return (self.external_weight_band,) if self.external_weight_band else ()

    def trainable(self) -> dict[str, np.ndarray]:
        out = self.occupancy.arrays("occupancy")
        if self.builtup is not None and not self.builtup_frozen:
            out.update(self.builtup.arrays("builtup"))
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        if self.builtup is not None and self.builtup_frozen:
            return self.builtup.arrays("builtup")
        return {}

    def with_trainable(self, arrays: dict[str, np.ndarray]) -> "PredictorParams":
        occ = self.occupancy.with_arrays("occupancy", arrays)
        bu = self.builtup
        if bu is not None and not self.builtup_frozen:
            bu = bu.with_arrays("builtup", arrays)
        return replace(self, occupancy=occ, builtup=bu, provenance=dict(self.provenance))


def init_predictor(variant: str, n_inputs: int, seed: int = 0, builtup: BranchParams | None = None,
                   hidden: Sequence[int] = (64, 64), external_weight_band: str | None = None,
                   feature_config: FeatureConfig | None = None) -> PredictorParams:
    """Fresh parameters; the occupancy head starts with zero weights (constant output)."""
    rng = np.random.default_rng(seed)
    occ = init_branch(n_inputs, hidden, "softplus", rng, head_scale=0.0)
    return PredictorParams(
        variant, occ, builtup.copy() if builtup is not None else None,
        external_weight_band=external_weight_band,
        feature_config=feature_config or FeatureConfig(),
        provenance={"seed": int(seed)},
    )


def transfer_hidden(src: BranchParams, dst: BranchParams) -> BranchParams:
    """``dst`` with its hidden layers replaced by copies of ``src``'s; the head is kept."""
    if [W.shape for W, _ in src.hidden] != [W.shape for W, _ in dst.hidden]:
        raise DataError("hidden layer shapes differ; cannot transfer weights")
    return BranchParams([(W.copy(), b.copy()) for W, b in src.hidden], dst.head_w.copy(),
                        dst.head_b.copy(), dst.activation)


@dataclass
class ForwardCache:
    params: PredictorParams
    builtup: np.ndarray | None
    occupancy: np.ndarray
    occ_cache: tuple
    bu_cache: tuple | None


def forward_pixels(X: np.ndarray, params: PredictorParams, external: np.ndarray | None = None):
    """Population, built-up and occupancy for feature rows ``X``.

    Returns ``(population, builtup, occupancy, cache)``; ``builtup`` is ``None``
    for the direct variant.
    """
    bu_cache = None
    if params.variant == "factored":
        bu, _, bu_cache = branch_forward(X, params.builtup)
    elif params.variant == "external_weights":
        if external is None:
            raise DataError(f"missing external band {params.external_weight_band!r}")
        bu = np.asarray(external, dtype=np.float64)
    else:
        bu = None
    occ, _, occ_cache = branch_forward(X, params.occupancy)
    pop = occ if bu is None else bu * occ
    return pop, bu, occ, ForwardCache(params, bu, occ, occ_cache, bu_cache)


def backward(cache: ForwardCache | None, dpop: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar objective w.r.t. the trainable parameters.

    ``dpop`` is d(objective)/d(population) per pixel. Frozen parameters are not
    part of the result (their gradient is zero by definition).
    """
    if cache is None:
        raise DataError("backward called without a forward cache")
    p = cache.params
    docc = dpop if cache.builtup is None else dpop * cache.builtup
    grads = branch_backward(p.occupancy, cache.occ_cache, docc, "occupancy")
    if p.variant == "factored" and not p.builtup_frozen:
        grads.update(branch_backward(p.builtup, cache.bu_cache, dpop * cache.occupancy, "builtup"))
    return grads


def population_forward(grid: Grid, params: PredictorParams, config: FeatureConfig | None = None) -> Grid:
    """Per-pixel prediction as a grid with bands population, builtup, occupancy."""
    config = config or params.feature_config
    pixel_mask = None
    ext = None
    if params.variant == "external_weights":
        b = grid.band(params.external_weight_band)
        pixel_mask = grid.valid[b]
    fm = feature_matrix(grid, config, params.exclude, pixel_mask)
    if params.variant == "external_weights":
        ext = grid.values[b].ravel()[fm.pixels].astype(np.float64)
    pop, bu, occ, _ = forward_pixels(fm.X, params, ext)
    h, w = grid.shape
    out = np.zeros((3, h * w))
    valid = np.zeros((3, h * w), dtype=bool)
    out[0, fm.pixels] = pop
    out[2, fm.pixels] = occ
    valid[0, fm.pixels] = True
    valid[2, fm.pixels] = True
    if bu is not None:
        out[1, fm.pixels] = bu
        valid[1, fm.pixels] = True
    return Grid(out.reshape(3, h, w), valid.reshape(3, h, w), grid.transform,
                ["population", "builtup", "occupancy"], ["AUX"] * 3)


# ---------------------------------------------------------------------------
# Built-up pretraining
# ---------------------------------------------------------------------------

def pretrain_builtup(grids: GridStack | Sequence[Grid] | Grid, builtup_labels: Grid, epochs: int,
                     seed: int = 0, config: FeatureConfig | None = None, hidden: Sequence[int] = (64, 64),
                     lr: float = 1e-2, batch_pixels: int = 512, pixels_per_epoch: int | None = 8192,
                     init: BranchParams | None = None) -> BranchParams:
    """Fit a sigmoid-headed branch to binary built-up labels with binary cross-entropy.

    Each epoch visits ``pixels_per_epoch`` labelled pixels (all of them when
    ``None``) of one randomly chosen stack member, in minibatches of
    ``batch_pixels``, using Adam with a constant learning rate.
    """
    from .training import OptimState, TrainConfig, adam_step

    config = config or FeatureConfig()
    if isinstance(grids, Grid):
        grids = [grids]
    grids = list(grids)
    if any(g.shape != builtup_labels.shape for g in grids):
        raise DataError("labels not aligned with input grids")
    lab = builtup_labels.values[0].astype(np.float64)
    lab_ok = builtup_labels.valid[0]
    if np.any((lab[lab_ok] != 0) & (lab[lab_ok] != 1)):
        raise DataError("built-up labels must be 0, 1 or invalid")
    rng = np.random.default_rng(seed)
    mats = [feature_matrix(g, config, pixel_mask=lab_ok) for g in grids]
    branch = init.copy() if init is not None else init_branch(mats[0].X.shape[1], hidden, "sigmoid", rng)
    if epochs <= 0:
        return branch
    targets = [lab.ravel()[m.pixels] for m in mats]
    tc = TrainConfig(base_lr=lr, lambda_wd=0.0)
    state = OptimState()
    arrays = branch.arrays("builtup")
    for _ in range(epochs):
        k = int(rng.integers(len(mats)))
        fm, y = mats[k], targets[k]
        order = rng.permutation(len(y))
        if pixels_per_epoch is not None:
            order = order[:pixels_per_epoch]
        for start in range(0, len(order), batch_pixels):
            rows = order[start:start + batch_pixels]
            out, _, cache = branch_forward(fm.X[rows], branch)
            # d(mean BCE)/d(logit) = (p - y) / n
            grads = branch_backward(branch, cache, (out - y[rows]) / len(rows), "builtup", wrt_logits=True)
            arrays, state = adam_step(arrays, grads, state, lr, tc)
            branch = branch.with_arrays("builtup", arrays)
    return branch


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _branch_to_dict(b: BranchParams) -> dict:
    return {
        "activation": b.activation,
        "layers": [{"shape": list(W.shape), "W": W.ravel().tolist(), "b": bb.tolist()} for W, bb in b.hidden],
        "head": {"w": b.head_w.tolist(), "b": b.head_b.tolist()},
    }


def _branch_from_dict(d: dict) -> BranchParams:
    hidden = [(np.asarray(layer["W"], dtype=np.float64).reshape(layer["shape"]), np.asarray(layer["b"]))
              for layer in d["layers"]]
    return BranchParams(hidden, d["head"]["w"], d["head"]["b"], d["activation"])


def params_to_dict(p: PredictorParams) -> dict:
    return {
        "format": "popgrid-params/1",
        "variant": p.variant,
        "feature_config": {"window_radius": p.feature_config.window_radius,
                           "group_mask": list(p.feature_config.group_mask)},
        "external_weight_band": p.external_weight_band,
        "builtup_frozen": p.builtup_frozen,
        "builtup": _branch_to_dict(p.builtup) if p.builtup is not None else None,
        "occupancy": _branch_to_dict(p.occupancy),
        "provenance": p.provenance,
    }


def params_from_dict(d: dict) -> PredictorParams:
    try:
        fc = d["feature_config"]
        return PredictorParams(
            d["variant"], _branch_from_dict(d["occupancy"]),
            _branch_from_dict(d["builtup"]) if d.get("builtup") else None,
            bool(d.get("builtup_frozen", True)), d.get("external_weight_band"),
            FeatureConfig(int(fc["window_radius"]), tuple(fc["group_mask"])),
            dict(d.get("provenance", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed params document: {exc}") from None


def save_params(p: PredictorParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(p), indent=1) + "\n", encoding="utf-8")


def load_params(path) -> PredictorParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed params document: {exc}") from None
    return params_from_dict(doc)


def save_branch(b: BranchParams, path, provenance: dict | None = None) -> None:
    doc = {"format": "popgrid-branch/1", "branch": _branch_to_dict(b), "provenance": provenance or {}}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_branch(path) -> BranchParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return _branch_from_dict(doc["branch"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed branch document: {exc}") from None
