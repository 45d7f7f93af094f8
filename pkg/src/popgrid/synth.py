"""Synthetic worlds with known built-up, occupancy and population fields.

Built-up scores are quantised to multiples of 1/1024 and occupancy rates to
multiples of 1/64. Their product is then exact in float32, and every sum of
up to 2**16 such products is exact in float64, so census totals are conserved
bit for bit by any regrouping of regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .census import CensusTable, zonal_sum
from .errors import DataError
from .grid import Grid, GridStack
from .regions import RegionMap, merge_groups, merge_smallest

SEASONS = ("spring", "summer", "autumn", "winter")
COARSENING_LADDER = (512, 156, 128, 64, 32, 16)


@dataclass(frozen=True)
class WorldConfig:
    width: int = 256
    height: int = 256
    n_regions: int = 100
    n_blobs: int = 40
    occupancy_range: tuple[float, float] = (2.0, 12.0)
    noise_sigma: float = 0.05
    n_s1: int = 2
    n_s2: int = 4
    n_seasons: int = 4
    pixel_size: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError("world dimensions must be positive")
        if not 1 <= self.n_regions <= self.width * self.height:
            raise DataError("n_regions must lie in [1, width*height]")
        lo, hi = self.occupancy_range
        if not 0 < lo <= hi or hi > 64:
            raise DataError("occupancy range must satisfy 0 < min <= max <= 64")
        if self.noise_sigma < 0 or self.n_s1 + self.n_s2 < 1 or self.n_seasons < 1:
            raise DataError("invalid noise or band configuration")
        if self.width * self.height > 2**16:
            raise DataError("synthetic worlds are limited to 65536 pixels (exact census sums)")


@dataclass(frozen=True)
class World:
    inputs: GridStack
    truth_population: Grid
    truth_builtup: Grid
    truth_occupancy: Grid
    regions: RegionMap
    census: CensusTable
    builtup_labels: Grid
    config: WorldConfig


def voronoi_regions(width: int, height: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Label each pixel with 1 + index of its nearest seed pixel (ties to the lower index)."""
    seeds = rng.choice(width * height, size=n, replace=False)
    sr, sc = np.divmod(seeds, width)
    rows, cols = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    label = np.zeros((height, width), dtype=np.uint32)
    for k in range(n):
        d = (rows - sr[k]) ** 2 + (cols - sc[k]) ** 2
        closer = d < best
        best[closer] = d[closer]
        label[closer] = k + 1
    return label


def generate_world(config: WorldConfig = WorldConfig()) -> World:
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)

    field = np.zeros((h, w))
    for _ in range(config.n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(2.0, 10.0)
        amp = rng.uniform(1.0, 3.0)
        field += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma**2))
    # steep ramp: mostly 0 or 1 with a narrow transition at settlement edges
    builtup = np.round(np.clip((field - 0.5) * 4.0 + 0.5, 0.0, 1.0) * 1024) / 1024

    theta = rng.uniform(0, 2 * np.pi)
    proj = np.cos(theta) * cols / max(w - 1, 1) + np.sin(theta) * rows / max(h - 1, 1)
    ramp = (proj - proj.min()) / (np.ptp(proj) or 1.0)
    lo, hi = config.occupancy_range
    occupancy = np.round((lo + (hi - lo) * ramp) * 64) / 64

    b32, o32 = builtup.astype(np.float32), occupancy.astype(np.float32)
    population = b32 * o32

    # inputs: monotone, mildly nonlinear mixtures of the two latent fields
    n_bands = config.n_s1 + config.n_s2
    a = np.empty(n_bands)
    b = np.empty(n_bands)
    a[:config.n_s1] = rng.uniform(0.6, 1.0, config.n_s1)
    b[:config.n_s1] = rng.uniform(-0.3, 0.3, config.n_s1)
    a[config.n_s1:] = rng.uniform(0.2, 1.0, config.n_s2) * rng.choice([-1, 1], config.n_s2)
    b[config.n_s1:] = rng.uniform(0.2, 1.0, config.n_s2) * rng.choice([-1, 1], config.n_s2)
    c = rng.uniform(-0.2, 0.2, n_bands)
    clean = np.empty((n_bands, h, w))
    for k in range(n_bands):
        u = a[k] * builtup + b[k] * ramp
        clean[k] = u + 0.2 * u * u + c[k]
    names = [f"S1_{i}" for i in range(config.n_s1)] + [f"S2_{i}" for i in range(config.n_s2)]
    groups = ["S1"] * config.n_s1 + ["S2"] * config.n_s2
    transform = (0.0, h * config.pixel_size, config.pixel_size, config.pixel_size)
    stamps = SEASONS if config.n_seasons == 4 else tuple(f"t{i}" for i in range(config.n_seasons))
    members = []
    for _ in range(config.n_seasons):
        noisy = clean + rng.normal(0.0, 1.0, clean.shape) * config.noise_sigma
        members.append(Grid(noisy.astype(np.float32), None, transform, names, groups))

    regions = RegionMap(voronoi_regions(w, h, config.n_regions, rng), transform)
    truth = Grid(population, None, transform, ["population"], ["AUX"])
    census = CensusTable(dict(zonal_sum(truth, regions)), label=f"synthetic seed={config.seed}")
    return World(
        inputs=GridStack(tuple(members), stamps),
        truth_population=truth,
        truth_builtup=Grid(b32, None, transform, ["builtup"], ["AUX"]),
        truth_occupancy=Grid(o32, None, transform, ["occupancy"], ["AUX"]),
        regions=regions,
        census=census,
        builtup_labels=Grid((builtup > 0.5).astype(np.float32), None, transform, ["builtup_label"], ["AUX"]),
        config=config,
    )


def coarsen_census(rmap: RegionMap, census: CensusTable, target_count: int) -> tuple[RegionMap, CensusTable]:
    """Merge regions down to ``target_count`` and sum the census counts of merged regions."""
    if target_count > len(rmap.ids):
        raise DataError(f"target {target_count} exceeds current region count {len(rmap.ids)}")
    merged, steps = merge_smallest(rmap, target_count)
    groups = merge_groups(steps, rmap.ids)
    entries = {}
    for keep, members in groups.items():
        entries[keep] = math.fsum(census.entries.get(m, 0.0) for m in members)
    return merged, CensusTable(entries, census.label)
