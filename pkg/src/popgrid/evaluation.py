"""Accuracy metrics (R², MAE, RMSE) on grids and census blocks, and scatter export."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .census import CensusTable, zonal_sum
from .errors import DataError
from .grid import Grid, block_aggregate
from .regions import RegionMap


@dataclass
class EvalReport:
    r2: float
    mae: float
    rmse: float
    n: int
    unit: str = "cell"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def metrics(truth, pred, unit: str = "cell") -> EvalReport:
    """R² = 1 - SS_res / SS_tot (population variance), MAE and RMSE."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise DataError(f"length mismatch: {truth.size} truth vs {pred.size} predicted values")
    if truth.size < 2:
        raise DataError("zero variance: need at least two evaluation units")
    resid = truth - pred
    ss_res = float(np.dot(resid, resid))
    dev = truth - truth.mean()
    ss_tot = float(np.dot(dev, dev))
    if ss_tot == 0:
        raise DataError("zero variance in truth values; R² undefined")
    return EvalReport(1.0 - ss_res / ss_tot, float(np.abs(resid).mean()), float(np.sqrt(ss_res / truth.size)),
                      int(truth.size), unit)


def evaluate_grid(pred: Grid, truth: Grid, aggregate_factor: int = 1) -> EvalReport:
    """Block-aggregate both grids, then compare band 0 over jointly valid cells."""
    if not pred.aligned_with(truth):
        raise DataError("misaligned grids")
    p = block_aggregate(pred.select([0]), aggregate_factor)
    t = block_aggregate(truth.select([0]), aggregate_factor)
    both = p.valid[0] & t.valid[0]
    if not both.any():
        raise DataError("no jointly valid cells")
    unit = "pixel" if aggregate_factor == 1 else f"{aggregate_factor}x{aggregate_factor} block"
    return metrics(t.values[0][both], p.values[0][both], unit)


def evaluate_blocks(pred: Grid, blocks: RegionMap, truth_table: CensusTable) -> EvalReport:
    """Compare per-block sums of the prediction with reference block counts."""
    missing = [b for b in blocks.ids if b not in truth_table]
    if missing:
        raise DataError(f"block missing truth: {missing[:5]}")
    sums = zonal_sum(pred, blocks)
    ids = list(blocks.ids)
    return metrics([truth_table[b] for b in ids], [sums[b] for b in ids], "census block")


def scatter_export(truth, pred, floor: float = 0.5) -> str:
    """CSV ``truth,pred``; with ``floor > 0`` values below it are reported as the floor."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise DataError("length mismatch")
    if floor > 0:
        truth = np.where(truth < floor, floor, truth)
        pred = np.where(pred < floor, floor, pred)
    buf = io.StringIO()
    buf.write("truth,pred\n")
    for t, p in zip(truth.tolist(), pred.tolist()):
        buf.write(f"{t!r},{p!r}\n")
    return buf.getvalue()
