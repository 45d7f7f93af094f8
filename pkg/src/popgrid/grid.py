"""Raster data model, the GridPack container, compositing and block aggregation.

A :class:`Grid` stores values band-sequential as a ``(bands, height, width)``
array together with a per-cell validity mask of the same shape. The geotransform
is ``(origin_x, origin_y, pixel_size_x, pixel_size_y)`` with the origin at the
upper-left corner; rows grow southwards, so the center of pixel ``(row, col)``
sits at ``(ox + (col + 0.5) * px, oy - (row + 0.5) * py)``.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, GridPackError

MAGIC = b"GPK1"
GROUPS = ("S1", "S2", "AUX")

_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


@dataclass(frozen=True, eq=False)
class Grid:
    values: np.ndarray
    valid: np.ndarray | None = None
    transform: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    band_names: tuple[str, ...] | None = None
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise DataError(f"grid values must be 2-D or 3-D, got shape {values.shape}")
        if values.dtype.kind not in "fu":
            values = values.astype(np.float64)
        if self.valid is None:
            valid = np.ones(values.shape, dtype=bool)
        else:
            valid = np.array(self.valid, dtype=bool, copy=True)
            if valid.ndim == 2:
                valid = np.broadcast_to(valid[None], values.shape).copy()
        if valid.shape != values.shape:
            raise DataError(f"mask shape {valid.shape} does not match values {values.shape}")
        transform = tuple(float(t) for t in self.transform)
        if len(transform) != 4 or transform[2] <= 0 or transform[3] <= 0:
            raise DataError(f"invalid transform {self.transform}")
        nb = values.shape[0]
        names = tuple(self.band_names) if self.band_names is not None else tuple(
            f"band{i}" for i in range(nb))
        groups = tuple(self.groups) if self.groups is not None else ("AUX",) * nb
        if len(names) != nb or len(groups) != nb:
            raise DataError("band_names and groups must have one entry per band")
        if any(g not in GROUPS for g in groups):
            raise DataError(f"unknown feature group in {groups}")
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "transform", transform)
        object.__setattr__(self, "band_names", names)
        object.__setattr__(self, "groups", groups)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def band(self, name: str) -> int:
        try:
            return self.band_names.index(name)
        except ValueError:
            raise DataError(f"band {name!r} not present in grid") from None

    def select(self, bands: Sequence[int]) -> "Grid":
        bands = list(bands)
        return Grid(self.values[bands], self.valid[bands], self.transform,
                    [self.band_names[b] for b in bands], [self.groups[b] for b in bands])

    def replace(self, values=None, valid=None, band_names=None, groups=None, transform=None) -> "Grid":
        """Copy of the grid with some fields swapped out."""
        return Grid(
            self.values if values is None else values,
            self.valid if valid is None else valid,
            self.transform if transform is None else transform,
            self.band_names if band_names is None else band_names,
            self.groups if groups is None else groups,
        )

    def with_band(self, name: str, values, valid=None, group: str = "AUX") -> "Grid":
        """Copy of the grid with one band appended."""
        values = np.asarray(values)[None]
        valid = np.ones(values.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)[None]
        dtype = np.result_type(self.values.dtype, values.dtype)
        return Grid(np.concatenate([self.values.astype(dtype), values.astype(dtype)]),
                    np.concatenate([self.valid, valid]), self.transform,
                    self.band_names + (name,), self.groups + (group,))

    def aligned_with(self, other) -> bool:
        return self.shape == tuple(other.shape) and np.allclose(self.transform, other.transform, rtol=0, atol=1e-9)

    def equals(self, other: "Grid") -> bool:
        """Bitwise equality of values, mask and metadata."""
        return (
            self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.valid, other.valid)
            and self.transform == other.transform
            and self.band_names == other.band_names
            and self.groups == other.groups
        )


@dataclass(frozen=True)
class GridStack:
    """Dimensionally identical grids, one per acquisition window (e.g. season)."""

    members: tuple[Grid, ...]
    timestamps: tuple[str, ...] = field(default=())

    def __post_init__(self):
        members = tuple(self.members)
        stamps = tuple(self.timestamps) or tuple(f"t{i}" for i in range(len(members)))
        if len(stamps) != len(members):
            raise DataError("one timestamp per stack member is required")
        if len(set(stamps)) != len(stamps):
            raise DataError("stack timestamps must be unique")
        if members:
            ref = members[0]
            for m in members[1:]:
                if (m.values.shape != ref.values.shape or m.transform != ref.transform
                        or m.band_names != ref.band_names or m.groups != ref.groups):
                    raise DataError("stack members differ in size, transform or band layout")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "timestamps", stamps)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]


# ---------------------------------------------------------------------------
# GridPack I/O
# ---------------------------------------------------------------------------

def _mask_bytes(valid: np.ndarray) -> bytes:
    return b"".join(np.packbits(band.ravel(), bitorder="little").tobytes() for band in valid)


def encode_gridpack(grid: Grid) -> bytes:
    if grid.values.dtype == np.uint32:
        dtype = "u32"
    elif grid.values.dtype.kind == "f":
        dtype = "f32"
    else:
        raise GridPackError(f"unsupported dtype {grid.values.dtype}")
    header = {
        "width": grid.width,
        "height": grid.height,
        "bands": grid.bands,
        "dtype": dtype,
        "transform": list(grid.transform),
        "band_names": list(grid.band_names),
        "groups": list(grid.groups),
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(grid.values, dtype=_DTYPES[dtype]).tobytes()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload + _mask_bytes(grid.valid)


def decode_gridpack(data: bytes) -> Grid:
    if len(data) < 8 or data[:4] != MAGIC:
        raise GridPackError("bad magic")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise GridPackError("truncated header")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        width, height, bands = int(header["width"]), int(header["height"]), int(header["bands"])
        dtype_name = header["dtype"]
        transform = header["transform"]
        names, groups = header["band_names"], header["groups"]
    except (ValueError, KeyError, TypeError) as exc:
        raise GridPackError(f"malformed header: {exc}") from None
    if dtype_name not in _DTYPES:
        raise GridPackError(f"unsupported dtype {dtype_name!r}")
    if min(width, height, bands) < 1:
        raise GridPackError("header/payload size mismatch: empty raster")
    ncell = width * height
    payload_len = ncell * bands * 4
    mask_len = bands * ((ncell + 7) // 8)
    body = memoryview(data)[8 + hlen:]
    if len(body) < payload_len:
        raise GridPackError("truncated payload")
    if len(body) != payload_len + mask_len:
        raise GridPackError(
            f"header/payload size mismatch: expected {payload_len + mask_len} bytes after header, got {len(body)}")
    values = np.frombuffer(body[:payload_len], dtype=_DTYPES[dtype_name]).reshape(bands, height, width)
    per_band = (ncell + 7) // 8
    bits = np.frombuffer(body[payload_len:], dtype=np.uint8).reshape(bands, per_band)
    valid = np.unpackbits(bits, axis=1, count=ncell, bitorder="little").astype(bool).reshape(bands, height, width)
    values = values.astype(values.dtype.newbyteorder("="))
    try:
        return Grid(values, valid, tuple(transform), names, groups)
    except DataError as exc:
        raise GridPackError(f"header/payload size mismatch: {exc}") from None


def write_gridpack(grid: Grid, path) -> None:
    """Write ``grid`` to ``path``. Float grids are stored as little-endian f32."""
    Path(path).write_bytes(encode_gridpack(grid))


def read_gridpack(path) -> Grid:
    return decode_gridpack(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Raster operations
# ---------------------------------------------------------------------------

def composite(stack: GridStack, method: str = "median") -> Grid:
    """Per-cell median or mean over the stack members that are valid there."""
    if len(stack) == 0:
        raise DataError("empty stack")
    if method not in ("median", "mean"):
        raise DataError(f"unknown composite method {method!r}")
    vals = np.stack([m.values.astype(np.float64) for m in stack])
    valid = np.stack([m.valid for m in stack])
    masked = np.where(valid, vals, np.nan)
    any_valid = valid.any(axis=0)
    # all-NaN cells warn; they are overwritten below
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if method == "median":
            out = np.nanmedian(masked, axis=0)
        else:
            out = np.nanmean(masked, axis=0)
    out = np.where(any_valid, out, 0.0)
    ref = stack[0]
    return ref.replace(values=out, valid=any_valid)


def block_aggregate(grid: Grid, factor: int) -> Grid:
    """Sum ``factor x factor`` blocks, invalid cells counting as zero.

    An output cell is invalid only when its whole block is invalid.
    """
    factor = int(factor)
    if factor < 1:
        raise DataError("aggregation factor must be >= 1")
    h, w = grid.shape
    if h % factor or w % factor:
        raise DataError(f"grid {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return grid
    b = grid.bands
    vals = np.where(grid.valid, grid.values.astype(np.float64), 0.0)
    vals = vals.reshape(b, h // factor, factor, w // factor, factor)
    out = vals.sum(axis=(2, 4))
    valid = grid.valid.reshape(b, h // factor, factor, w // factor, factor).any(axis=(2, 4))
    ox, oy, px, py = grid.transform
    return Grid(out, valid, (ox, oy, px * factor, py * factor), grid.band_names, grid.groups)


def jitter_coefficients(bands: int, brightness_sigma: float, contrast_sigma: float,
                        rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-band gain and offset drawn for :func:`photometric_augment`."""
    if brightness_sigma < 0 or contrast_sigma < 0:
        raise DataError("jitter sigmas must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    gain = rng.normal(1.0, contrast_sigma, size=bands)
    offset = rng.normal(0.0, brightness_sigma, size=bands)
    return gain, offset


def photometric_augment(grid: Grid, brightness_sigma: float = 0.1, contrast_sigma: float = 0.1,
                        rng_seed: int = 0) -> Grid:
    """Random per-band linear contrast and brightness jitter ``x -> a*x + b``."""
    gain, offset = jitter_coefficients(grid.bands, brightness_sigma, contrast_sigma, rng_seed)
    vals = grid.values.astype(np.float64) * gain[:, None, None] + offset[:, None, None]
    if grid.values.dtype.kind == "f":
        vals = vals.astype(grid.values.dtype)
    return grid.replace(values=vals)
