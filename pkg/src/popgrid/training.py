"""Weakly supervised training against census counts.

The objective for a batch of regions is the log-L1 disagreement between each
region's census count and the sum of its pixel predictions, plus a small
penalty on the mean predicted value. Parameters are updated with Adam; the
learning rate decays by a constant factor every few epochs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .census import CensusTable, map_difficulty
from .errors import DataError, NumericalError
from .grid import GridStack, jitter_coefficients
from .predictor import (
    BranchParams,
    PredictorParams,
    backward,
    branch_forward,
    feature_matrix,
    forward_pixels,
    softplus_inverse,
    transfer_hidden,
)
from .regions import RegionMap

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_regions: int = 2
    # None: derived from the dataset difficulty of the training regions
    lambda_wd: float | None = None
    decoupled_wd: bool = False
    sparsity_weight: float = 0.01
    seed: int = 0
    lr_decay: float = 0.75
    lr_decay_every: int = 5
    brightness_sigma: float = 0.1
    contrast_sigma: float = 0.1
    init_occupancy_bias: bool = True
    transfer_hidden: bool = False
    target_cell_pixels: int = 100

    def __post_init__(self):
        if self.batch_regions < 1:
            raise DataError("batch_regions must be >= 1")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.base_lr <= 0 or self.epsilon <= 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise DataError("learning-rate settings must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DataError("Adam betas must lie in [0, 1)")
        if self.lambda_wd is not None and self.lambda_wd < 0:
            raise DataError("lambda_wd must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed config: {exc}") from None


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def loss_logL1(census: CensusTable | dict, region_sums: dict) -> float:
    """Sum over regions of |log(1 + c_j) - log(1 + S_j)|."""
    counts = census.entries if isinstance(census, CensusTable) else census
    total = 0.0
    for rid, c in counts.items():
        if rid not in region_sums:
            raise DataError(f"missing region sum for region {rid}")
        s = region_sums[rid]
        if s < 0:
            raise DataError(f"negative predicted sum for region {rid}")
        total += abs(math.log1p(c) - math.log1p(s))
    return total


def sparsity_penalty(outputs, weight: float = 0.01) -> float:
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.size == 0:
        raise DataError("empty batch")
    return weight * float(outputs.mean())


def weight_decay_from_difficulty(D: float) -> float:
    """Weight decay strength with 5 * lambda = D * 1e-6."""
    if not D > 0:
        raise DataError("difficulty must be positive")
    return D / 5 * 1e-6


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.base_lr * config.lr_decay ** (epoch // config.lr_decay_every)


class BatchLoss(NamedTuple):
    loss: float
    log_l1: float
    sparsity: float


def batch_objective(X: np.ndarray, region_index: np.ndarray, counts: np.ndarray, params: PredictorParams,
                    sparsity_weight: float = 0.01, external: np.ndarray | None = None,
                    with_grad: bool = True):
    """Objective of one batch and, optionally, its gradient.

    ``region_index[k]`` is the position (into ``counts``) of the region that
    feature row ``k`` belongs to. Returns ``(BatchLoss, grads)``; ``grads`` is
    ``None`` unless ``with_grad``.
    """
    pop, _, _, cache = forward_pixels(X, params, external)
    sums = np.bincount(region_index, weights=pop, minlength=len(counts))
    diff = np.log1p(counts) - np.log1p(sums)
    log_l1 = float(np.abs(diff).sum())
    sparsity = sparsity_weight * float(pop.mean())
    loss = BatchLoss(log_l1 + sparsity, log_l1, sparsity)
    if not with_grad:
        return loss, None
    # np.sign(0) == 0 gives the zero subgradient of |x| at the kink
    dsum = -np.sign(diff) / (1.0 + sums)
    dpop = dsum[region_index] + sparsity_weight / len(pop)
    return loss, backward(cache, dpop)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, lr: float,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], OptimState]:
    """One Adam update with bias correction.

    Weight decay ``config.lambda_wd`` is added to the gradient (classic L2)
    unless ``config.decoupled_wd`` is set, in which case it shrinks the weights
    directly as in AdamW.
    """
    if set(params) != set(grads):
        raise DataError("shape mismatch: parameter and gradient names differ")
    wd = config.lambda_wd or 0.0
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        if wd and not config.decoupled_wd:
            g = g + wd * p
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
        if wd and config.decoupled_wd:
            step = step + lr * wd * p
        new_p[name] = p - step
        new_m[name], new_v[name] = m, v
    return new_p, OptimState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class HistoryRow(NamedTuple):
    epoch: int
    batch: int
    loss: float
    log_l1: float
    sparsity: float
    lr: float


def history_csv(history: list[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HistoryRow._fields)
    for row in history:
        w.writerow([row.epoch, row.batch, repr(row.loss), repr(row.log_l1), repr(row.sparsity), repr(row.lr)])
    return buf.getvalue()


def epoch_losses(history: list[HistoryRow]) -> list[float]:
    """Mean batch loss per epoch."""
    per: dict[int, list[float]] = {}
    for row in history:
        per.setdefault(row.epoch, []).append(row.loss)
    return [float(np.mean(per[e])) for e in sorted(per)]


@dataclass
class _MemberData:
    features: object  # FeatureMatrix
    rows_by_region: list[np.ndarray]
    external: np.ndarray | None


def _prepare(stack: GridStack, rmap: RegionMap, region_ids: list[int], params: PredictorParams):
    ids, pos = rmap.compact()
    id_to_k = {int(i): k for k, i in enumerate(ids)}
    wanted = np.full(len(ids), -1)
    for j, rid in enumerate(region_ids):
        wanted[id_to_k[rid]] = j
    members = []
    for grid in stack:
        in_region = (pos >= 0)
        in_region[in_region] = wanted[pos[in_region]] >= 0
        mask = in_region.reshape(rmap.shape)
        ext = None
        if params.variant == "external_weights":
            b = grid.band(params.external_weight_band)
            mask = mask & grid.valid[b]
        fm = feature_matrix(grid, params.feature_config, params.exclude, mask)
        region_of_row = wanted[pos[fm.pixels]]
        order = np.argsort(region_of_row, kind="stable")
        bounds = np.searchsorted(region_of_row[order], np.arange(len(region_ids) + 1))
        rows = [order[bounds[j]:bounds[j + 1]] for j in range(len(region_ids))]
        if params.variant == "external_weights":
            ext = grid.values[b].ravel()[fm.pixels].astype(np.float64)
        members.append(_MemberData(fm, rows, ext))
    return members


def _initial_occupancy(params: PredictorParams, members: list[_MemberData], census_total: float) -> float:
    """Average occupancy: census total over the mean predicted built-up mass."""
    masses = []
    for md in members:
        if params.variant == "factored":
            masses.append(float(branch_forward(md.features.X, params.builtup)[0].sum()))
        elif params.variant == "external_weights":
            masses.append(float(md.external.sum()))
        else:
            masses.append(float(len(md.features.pixels)))
    mass = float(np.mean(masses))
    if mass <= 0 or census_total <= 0:
        raise DataError("cannot initialise occupancy: zero built-up mass or census total")
    return census_total / mass


def train(stack: GridStack, regions: RegionMap, census: CensusTable, params0: PredictorParams,
          config: TrainConfig, transfer_source: BranchParams | None = None
          ) -> tuple[PredictorParams, list[HistoryRow]]:
    """Fit the trainable parameters to census counts.

    Each epoch visits the census regions in a seeded random order, ``batch_regions``
    at a time. A batch uses one randomly chosen stack member with photometric
    jitter applied. With ``config.transfer_hidden`` the occupancy branch's hidden
    layers start from ``transfer_source`` (default: the model's built-up branch).
    """
    if len(stack) == 0:
        raise DataError("empty stack")
    if stack[0].shape != regions.shape:
        raise DataError("misaligned inputs: stack and region map differ in size")
    region_ids = [rid for rid in census.ids]
    missing = set(region_ids) - set(regions.ids)
    if missing:
        raise DataError(f"census/region mismatch: census ids {sorted(missing)[:5]} not in region map")
    if config.epochs == 0:
        return params0, []

    params = params0
    if config.transfer_hidden:
        src = transfer_source if transfer_source is not None else params.builtup
        if src is None:
            raise DataError("transfer_hidden requested but no source branch available")
        params = PredictorParams(params.variant, transfer_hidden(src, params.occupancy), params.builtup,
                                 params.builtup_frozen, params.external_weight_band, params.feature_config,
                                 dict(params.provenance))

    members = _prepare(stack, regions, region_ids, params)
    counts = np.asarray([census[r] for r in region_ids], dtype=np.float64)
    if config.init_occupancy_bias:
        factor = _initial_occupancy(params, members, math.fsum(counts))
        occ = params.occupancy.copy()
        occ.head_b = np.array([softplus_inverse(factor)])
        params = PredictorParams(params.variant, occ, params.builtup, params.builtup_frozen,
                                 params.external_weight_band, params.feature_config, dict(params.provenance))

    lambda_wd = config.lambda_wd
    if lambda_wd is None:
        sub = np.where(np.isin(regions.indices, np.asarray(region_ids, dtype=np.uint32)), regions.indices,
                       np.uint32(0xFFFFFFFF))
        d = map_difficulty(RegionMap(sub, regions.transform), config.target_cell_pixels)
        lambda_wd = weight_decay_from_difficulty(d.difficulty)
    opt_cfg = TrainConfig(**{**asdict(config), "lambda_wd": lambda_wd})

    rng = np.random.default_rng(config.seed)
    n_bands = stack[0].bands
    arrays = params.trainable()
    state = OptimState()
    history: list[HistoryRow] = []
    nreg = len(region_ids)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(nreg)
        for bi, start in enumerate(range(0, nreg, config.batch_regions)):
            batch = order[start:start + config.batch_regions]
            md = members[int(rng.integers(len(members)))]
            gain, offset = jitter_coefficients(n_bands, config.brightness_sigma, config.contrast_sigma,
                                               int(rng.integers(2**32)))
            rows = [md.rows_by_region[j] for j in batch]
            if sum(len(r) for r in rows) == 0:
                continue
            idx = np.concatenate(rows)
            local = np.repeat(np.arange(len(batch)), [len(r) for r in rows])
            X = md.features.jittered(gain, offset, idx)
            ext = md.external[idx] if md.external is not None else None
            loss, grads = batch_objective(X, local, counts[batch], params, config.sparsity_weight, ext)
            if not math.isfinite(loss.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {bi}")
            arrays, state = adam_step(arrays, grads, state, lr, opt_cfg)
            params = params.with_trainable(arrays)
            history.append(HistoryRow(epoch, bi, loss.loss, loss.log_l1, loss.sparsity, lr))

    params.provenance.update({"seed": int(config.seed), "epochs": int(config.epochs),
                              "dataset": census.label, "lambda_wd": lambda_wd})
    return params, history


def save_history(history: list[HistoryRow], path) -> None:
    Path(path).write_text(history_csv(history), encoding="utf-8")

