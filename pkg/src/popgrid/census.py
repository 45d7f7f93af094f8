"""Census tables, zonal sums and the dataset difficulty score."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import Grid
from .regions import NODATA, RegionMap


@dataclass
class CensusTable:
    entries: dict[int, float]
    label: str = ""

    def __post_init__(self):
        entries = {}
        for k, v in self.entries.items():
            k, v = int(k), float(v)
            if not 0 <= k < NODATA:
                raise DataError(f"region_id {k} out of u32 range")
            if not math.isfinite(v) or v < 0:
                raise DataError(f"negative count for region {k}: {v}")
            entries[k] = v
        self.entries = dict(sorted(entries.items()))

    def __getitem__(self, rid: int) -> float:
        return self.entries[rid]

    def __contains__(self, rid) -> bool:
        return rid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return list(self.entries)

    def total(self) -> float:
        return math.fsum(self.entries.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("region_id,count\n")
        for k, v in self.entries.items():
            buf.write(f"{k},{v!r}\n")
        return buf.getvalue()


def parse_census_csv(text: str, label: str = "") -> CensusTable:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or [h.strip() for h in header] != ["region_id", "count"]:
        raise DataError('malformed row: header must be "region_id,count"')
    entries: dict[int, float] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"malformed row at line {lineno}: {row}")
        try:
            rid, count = int(row[0]), float(row[1])
        except ValueError:
            raise DataError(f"malformed row at line {lineno}: {row}") from None
        if not math.isfinite(count):
            raise DataError(f"malformed row at line {lineno}: non-finite count")
        if count < 0:
            raise DataError(f"negative count at line {lineno}")
        if rid in entries:
            raise DataError(f"duplicate region_id {rid} at line {lineno}")
        entries[rid] = count
    return CensusTable(entries, label)


def load_census_csv(path) -> CensusTable:
    path = Path(path)
    return parse_census_csv(path.read_text(encoding="utf-8"), label=path.stem)


def write_census_csv(table: CensusTable, path) -> None:
    Path(path).write_text(table.to_csv(), encoding="utf-8", newline="\n")


class ZonalSums(dict):
    """Region id -> sum of valid cell values; ``empty`` lists regions without valid cells."""

    def __init__(self, sums, empty=frozenset()):
        super().__init__(sums)
        self.empty = frozenset(empty)


def _check_aligned(grid: Grid, rmap: RegionMap):
    if grid.shape != rmap.shape or not np.allclose(grid.transform, rmap.transform, rtol=0, atol=1e-9):
        raise DataError("misaligned inputs: grid and region map differ in size or transform")


def zonal_sum(grid: Grid, rmap: RegionMap, band: int = 0) -> ZonalSums:
    _check_aligned(grid, rmap)
    ids, pos = rmap.compact()
    valid = grid.valid[band].ravel()
    sel = (pos >= 0) & valid
    vals = grid.values[band].ravel().astype(np.float64)
    sums = np.bincount(pos[sel], weights=vals[sel], minlength=len(ids))
    n = np.bincount(pos[sel], minlength=len(ids))
    return ZonalSums({int(i): float(s) for i, s in zip(ids, sums)},
                     {int(i) for i, c in zip(ids, n) if c == 0})


@dataclass(frozen=True)
class DatasetDifficulty:
    upscaling: float
    n_regions: int
    difficulty: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "difficulty", self.upscaling / self.n_regions)


def difficulty(avg_region_area: float, cell_area: float, n_regions: int) -> DatasetDifficulty:
    """Upscaling factor S (mean region area over target cell area) and D = S / N."""
    if avg_region_area <= 0 or cell_area <= 0:
        raise DataError("areas must be positive")
    if n_regions < 1:
        raise DataError("need at least one region")
    return DatasetDifficulty(avg_region_area / cell_area, int(n_regions))


def map_difficulty(rmap: RegionMap, target_cell_pixels: int = 100) -> DatasetDifficulty:
    """Difficulty of a region map whose target cell spans ``target_cell_pixels`` pixels.

    The default of 100 corresponds to a 1 ha cell on a 10 m grid.
    """
    counts = rmap.counts()
    px, py = rmap.transform[2], rmap.transform[3]
    mean_area = np.mean(list(counts.values())) * px * py
    return difficulty(mean_area, target_cell_pixels * px * py, len(counts))
