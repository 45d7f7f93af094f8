"""Dasymetric rescaling of predicted maps to census totals."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .census import CensusTable, zonal_sum
from .errors import DataError
from .grid import Grid
from .regions import RegionMap


@dataclass
class ScaleFactorReport:
    predicted: dict[int, float]
    census: dict[int, float]
    # None where the predicted sum is zero
    factors: dict[int, float | None]
    p10: float
    median: float
    p90: float
    national_estimate: float
    national_census: float
    unallocated: float

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("predicted", "census", "factors"):
            d[k] = {str(i): v for i, v in d[k].items()}
        return json.dumps(d, indent=1)

    def factors_csv(self) -> str:
        buf = io.StringIO()
        buf.write("region_id,predicted_sum,census,factor\n")
        for rid in sorted(self.census):
            f = self.factors[rid]
            buf.write(f"{rid},{self.predicted[rid]!r},{self.census[rid]!r},{'' if f is None else repr(f)}\n")
        return buf.getvalue()


def _region_table(pop: Grid, rmap: RegionMap, census: CensusTable):
    missing = [r for r in rmap.ids if r not in census]
    if missing:
        raise DataError(f"region missing from census: {missing[:5]}")
    sums = zonal_sum(pop, rmap)
    ids = sorted(set(rmap.ids) | set(census.ids))
    return ids, {r: sums.get(r, 0.0) for r in ids}


def scale_factors(pop: Grid, rmap: RegionMap, census: CensusTable) -> ScaleFactorReport:
    """Per-region census/prediction ratios with linear-interpolated 10/50/90 % quantiles."""
    ids, predicted = _region_table(pop, rmap, census)
    factors: dict[int, float | None] = {}
    for r in ids:
        s = predicted[r]
        factors[r] = census[r] / s if s > 0 else None
    vals = np.asarray([f for f in factors.values() if f is not None])
    if vals.size:
        p10, med, p90 = (float(q) for q in np.quantile(vals, [0.1, 0.5, 0.9]))
    else:
        p10 = med = p90 = float("nan")
    unallocated = math.fsum(census[r] for r in ids if predicted[r] <= 0)
    return ScaleFactorReport(
        predicted, {r: census[r] for r in ids}, factors, p10, med, p90,
        math.fsum(predicted.values()), math.fsum(census[r] for r in ids), unallocated)


def dasymetric_rescale(pop: Grid, rmap: RegionMap, census: CensusTable) -> tuple[Grid, ScaleFactorReport]:
    """Scale band 0 of ``pop`` so that each region sums to its census count.

    Regions whose predicted sum is zero stay zero; their census count is
    reported as unallocated. Pixels outside every region are left unchanged.
    """
    report = scale_factors(pop, rmap, census)
    ids, pos = rmap.compact()
    factor = np.asarray([report.factors[int(r)] if report.factors[int(r)] is not None else 1.0 for r in ids])
    flat = pop.values[0].astype(np.float64).ravel()
    scaled = flat.copy()
    inside = pos >= 0
    scaled[inside] = flat[inside] * factor[pos[inside]]
    scaled = np.where(pop.valid[0].ravel(), scaled, flat)
    values = pop.values.astype(np.float64).copy()
    values[0] = scaled.reshape(pop.shape)
    return pop.replace(values=values), report
