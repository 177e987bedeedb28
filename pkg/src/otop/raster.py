"""Multiband raster model, BSQF file I/O, reflectance scaling and tiling.

BSQF layout (little endian)::

    b"BSQF" | u32 bands | u32 height | u32 width | f32[bands*height*width]

Values are band-major then row-major.  NaN marks nodata.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, TruncationError

BSQF_MAGIC = b"BSQF"
_HEADER = struct.Struct("<4sIII")
SR_SCALE = 10000.0


class Raster:
    """Immutable band-major float32 grid of shape (bands, height, width)."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ArgumentError(f"raster needs shape (bands>=1, h>=1, w>=1), got {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def bands(self) -> int:
        return self._data.shape[0]

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    def band(self, i: int) -> np.ndarray:
        return self._data[i]

    def __eq__(self, other):
        # bitwise comparison, so NaN == NaN
        if not isinstance(other, Raster):
            return NotImplemented
        return self.shape == other.shape and self._data.tobytes() == other._data.tobytes()

    def __repr__(self):
        return f"Raster(bands={self.bands}, height={self.height}, width={self.width})"


@dataclass(frozen=True)
class BandSemantics:
    """Band roles. Default order is blue, green, red, NIR, SWIR1, SWIR2."""

    blue_idx: int = 0
    green_idx: int = 1
    red_idx: int = 2
    nir_idx: int = 3
    swir1_idx: int = 4
    swir2_idx: int = 5

    def indices(self):
        return (self.blue_idx, self.green_idx, self.red_idx,
                self.nir_idx, self.swir1_idx, self.swir2_idx)

    def validate(self, bands: int) -> None:
        idx = self.indices()
        if len(set(idx)) != len(idx):
            raise ArgumentError(f"band indices must be distinct: {idx}")
        if min(idx) < 0 or max(idx) >= bands:
            raise ArgumentError(f"band indices {idx} out of range for {bands} bands")


@dataclass(frozen=True)
class TilePair:
    image: Raster
    mask: Raster
    origin: tuple

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:] or self.mask.bands != 1:
            raise ArgumentError("tile image/mask dimensions differ")

    def has_nodata(self) -> bool:
        return bool(np.isnan(self.image.data).any() or np.isnan(self.mask.data).any())


def encode_raster(raster: Raster) -> bytes:
    header = _HEADER.pack(BSQF_MAGIC, raster.bands, raster.height, raster.width)
    return header + raster.data.astype("<f4", copy=False).tobytes()


def decode_raster(buf: bytes) -> Raster:
    if len(buf) < _HEADER.size:
        raise TruncationError(f"BSQF header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, bands, height, width = _HEADER.unpack_from(buf)
    if magic != BSQF_MAGIC:
        raise FormatError(f"bad BSQF magic {magic!r}")
    if min(bands, height, width) < 1:
        raise FormatError(f"BSQF dimensions must be positive: {bands}x{height}x{width}")
    n = bands * height * width
    payload = len(buf) - _HEADER.size
    if payload < 4 * n:
        raise TruncationError(f"BSQF payload has {payload} bytes, header declares {4 * n}")
    if payload > 4 * n:
        raise FormatError(f"BSQF payload has {payload - 4 * n} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return Raster(data.reshape(bands, height, width))


def write_raster(raster: Raster, path) -> None:
    Path(path).write_bytes(encode_raster(raster))


def read_raster(path) -> Raster:
    return decode_raster(Path(path).read_bytes())


def normalize_sr(raster: Raster) -> Raster:
    """Scale surface reflectance (x 10^4) to [0, 1], clamping out-of-range values."""
    with np.errstate(invalid="ignore"):
        out = np.clip(raster.data / np.float32(SR_SCALE), 0.0, 1.0)
    return Raster(out)


def looks_sr_scaled(raster: Raster) -> bool:
    """True when the raster still carries x10^4 reflectance values."""
    finite = raster.data[np.isfinite(raster.data)]
    return finite.size > 0 and float(finite.max()) > 1.0


def tile_pairs(image: Raster, mask: Raster, size: int = 256, skip_nodata: bool = False):
    """Cut non-overlapping size x size tiles in row-major order.

    Partial edge strips are dropped.  With ``skip_nodata`` tiles containing NaN
    in either raster are omitted.
    """
    if image.shape[1:] != mask.shape[1:]:
        raise ArgumentError(f"image {image.shape[1:]} and mask {mask.shape[1:]} differ in size")
    if mask.bands != 1:
        raise ArgumentError("mask must have exactly one band")
    if size < 1:
        raise ArgumentError("tile size must be positive")
    tiles = []
    for i in range(image.height // size):
        for j in range(image.width // size):
            r, c = i * size, j * size
            pair = TilePair(
                Raster(image.data[:, r:r + size, c:c + size]),
                Raster(mask.data[:, r:r + size, c:c + size]),
                (r, c),
            )
            if skip_nodata and pair.has_nodata():
                continue
            tiles.append(pair)
    return tiles
