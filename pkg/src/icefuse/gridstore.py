"""Raster persistence, chip extraction, mosaic reassembly, mean downsampling.

Grids are 2-D float64 rasters where nodata cells hold the canonical quiet
NaN. Files use the SICG layout: magic ``SICG``, u16 version, u8 dtype code
(0=f32, 1=f64), u8 reserved, u32 height, u32 width, then the row-major
little-endian payload.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SICG"
VERSION = 1
_HEADER = struct.Struct("<4sHBBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


class FormatError(ValueError):
    """Malformed SICG payload or header."""


class DimensionError(ValueError):
    """Operands with incompatible raster extents."""


class Grid:
    """A height x width raster with an implicit NaN nodata mask."""

    __slots__ = ("values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"grid must be 2-D with positive extents, got {v.shape}")
        bad = np.isinf(v)
        if bad.any():
            raise ValueError("grid values must be finite or NaN")
        v[np.isnan(v)] = np.nan  # canonicalize nodata payload bits
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def mask(self):
        """True where the cell is valid."""
        return np.isfinite(self.values)

    @classmethod
    def full(cls, height, width, value=np.nan):
        return cls(np.full((height, width), value, dtype=np.float64))

    def equals(self, other):
        """Bitwise equality of valid values plus identical nodata masks."""
        if self.shape != other.shape:
            return False
        m = self.mask
        if not np.array_equal(m, other.mask):
            return False
        return np.array_equal(self.values[m], other.values[m])


def write_grid(grid, path, dtype="f64"):
    if dtype not in _CODES:
        raise ValueError(f"dtype must be f32 or f64, got {dtype!r}")
    code = _CODES[dtype]
    payload = grid.values.astype(_DTYPES[code], copy=True)
    payload[~grid.mask] = np.nan
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, grid.height, grid.width))
        fh.write(payload.tobytes(order="C"))


def read_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, code, _, height, width = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if height < 1 or width < 1:
        raise FormatError(f"{path}: non-positive extents {height}x{width}")
    dt = _DTYPES[code]
    expected = _HEADER.size + height * width * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(height, width)
    if np.isinf(values).any():
        raise FormatError(f"{path}: payload contains infinities")
    return Grid(values)


@dataclass(frozen=True)
class ChipIndex:
    size: int
    stride: int
    origins: tuple  # (row, col) pairs in row-major order


def _axis_origins(extent, size, stride):
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)  # clamp the last chip to the edge
    return origins


def chip_extract(grid, size, overlap_fraction):
    """Plan chip origins covering the grid at the requested overlap."""
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0,1), got {overlap_fraction}")
    if size < 1 or size > min(grid.height, grid.width):
        raise DimensionError(
            f"chip size {size} exceeds grid extents {grid.height}x{grid.width}"
        )
    stride = max(1, int(np.floor(size * (1.0 - overlap_fraction) + 0.5)))
    rows = _axis_origins(grid.height, size, stride)
    cols = _axis_origins(grid.width, size, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return ChipIndex(size=size, stride=stride, origins=origins)


def cut_chips(grid, index):
    """Materialize (origin, Grid) pairs for a chip plan."""
    s = index.size
    return [((r, c), Grid(grid.values[r:r + s, c:c + s])) for r, c in index.origins]


def reassemble(chips, height, width):
    """Mosaic chips back into one grid; overlaps average, gaps stay nodata."""
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for (r, c), chip in chips:
        h, w = chip.shape
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise DimensionError(f"chip at ({r},{c}) of shape {chip.shape} out of bounds")
        valid = chip.mask
        total[r:r + h, c:c + w] += np.where(valid, chip.values, 0.0)
        count[r:r + h, c:c + w] += valid
    with np.errstate(invalid="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return Grid(out)


def downsample_mean(grid, factor):
    """Block means of valid cells; all-nodata blocks become nodata."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return Grid(grid.values)
    h, w = grid.shape
    ph = (factor - h % factor) % factor
    pw = (factor - w % factor) % factor
    v = grid.values
    if ph or pw:
        v = np.pad(v, ((0, ph), (0, pw)), constant_values=np.nan)
    bh, bw = v.shape[0] // factor, v.shape[1] // factor
    blocks = v.reshape(bh, factor, bw, factor).transpose(0, 2, 1, 3).reshape(bh, bw, -1)
    finite = np.isfinite(blocks)
    counts = finite.sum(axis=-1)
    sums = np.where(finite, blocks, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Grid(out)


def upsample_nearest(grid, factor):
    """Inverse of block downsampling: repeat each cell factor x factor."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return Grid(np.repeat(np.repeat(grid.values, factor, axis=0), factor, axis=1))
