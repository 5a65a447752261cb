"""Sparse bitmap storage for activations, plus closed-form footprint formulas.

A :class:`BitmapTensor` keeps one presence bit per element and a packed
sequence of the non-zero values in row-major order. Bits are packed
LSB-first: element ``i`` lives in byte ``i >> 3`` at bit ``i & 7``.

Byte counts reported here are the formula bytes of the payload, not Python
object sizes; the memory ledger charges exactly these numbers.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .errors import CorruptStashError, InvalidInputError

MIB = 2**20


class Precision(enum.Enum):
    """Storage precision of activation values."""

    FP16 = "fp16"
    FP32 = "fp32"
    # only used by the finite-difference oracle runs
    FP64 = "fp64"

    @property
    def nbytes(self) -> int:
        return _PRECISION_BYTES[self]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_PRECISION_DTYPES[self])

    @classmethod
    def from_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        for p, d in _PRECISION_DTYPES.items():
            if np.dtype(d) == dtype:
                return p
        raise InvalidInputError(f"no storage precision for dtype {dtype}")


_PRECISION_BYTES = {Precision.FP16: 2, Precision.FP32: 4, Precision.FP64: 8}
_PRECISION_DTYPES = {Precision.FP16: np.float16, Precision.FP32: np.float32, Precision.FP64: np.float64}
_PRECISION_TAGS = {Precision.FP32: 0, Precision.FP16: 1, Precision.FP64: 2}


class IndexWidth(enum.Enum):
    """Width of one coordinate in a COO index tuple."""

    INT32 = 4
    INT64 = 8


@dataclass(frozen=True, eq=False)
class BitmapTensor:
    shape: tuple
    bitmap: np.ndarray  # packed uint8, ceil(n/8) bytes
    values: np.ndarray
    precision: Precision = Precision.FP32

    @property
    def n(self) -> int:
        return math.prod(self.shape)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def nbytes(self) -> int:
        """Formula footprint of this payload."""
        return footprint_bitmap(self.nnz, self.n, self.precision)

    def mask(self) -> np.ndarray:
        return np.unpackbits(self.bitmap, count=self.n, bitorder="little").astype(bool)

    def popcount(self) -> int:
        return int(np.count_nonzero(self.mask()))

    def validate(self) -> None:
        if any(d <= 0 for d in self.shape):
            raise CorruptStashError(f"non-positive dimension in shape {self.shape}")
        if self.bitmap.size != bitmap_nbytes(self.n):
            raise CorruptStashError(
                f"bitmap holds {self.bitmap.size} bytes, expected {bitmap_nbytes(self.n)} for n={self.n}"
            )
        k = self.popcount()
        if k != self.values.size:
            raise CorruptStashError(f"popcount {k} does not match {self.values.size} stored values")
        if self.values.dtype != self.precision.dtype:
            raise CorruptStashError(f"values dtype {self.values.dtype} disagrees with {self.precision}")
        if np.any(self.values == 0):
            raise CorruptStashError("stored values must all be non-zero")

    def __repr__(self):
        return f"BitmapTensor(shape={self.shape}, nnz={self.nnz}/{self.n}, precision={self.precision.value})"


def bitmap_nbytes(n: int) -> int:
    return (n + 7) // 8


def compress(dense, precision: Precision = Precision.FP32) -> BitmapTensor:
    """Pack ``dense`` into bitmap form, converting kept values to ``precision``.

    A value counts as zero by exact comparison, so -0.0 is dropped. Values
    that become 0 during the precision conversion are dropped as well.
    """
    dense = np.asarray(dense)
    if dense.size == 0:
        raise InvalidInputError("cannot compress an empty tensor")
    flat = np.ascontiguousarray(dense).reshape(-1)
    converted = flat.astype(precision.dtype, copy=False)
    mask = converted != 0
    values = converted[mask]
    bitmap = np.packbits(mask, bitorder="little")
    values.setflags(write=False)
    bitmap.setflags(write=False)
    return BitmapTensor(tuple(int(d) for d in dense.shape), bitmap, values, precision)


def decompress(b: BitmapTensor, dtype=np.float32) -> np.ndarray:
    """Scatter the stored values back into a dense array of ``dtype``."""
    mask = b.mask()
    k = int(np.count_nonzero(mask))
    if k != b.values.size:
        raise CorruptStashError(f"popcount {k} does not match {b.values.size} stored values")
    out = np.zeros(b.n, dtype=dtype)
    out[mask] = b.values
    return out.reshape(b.shape)


def prune(dense, threshold: float) -> np.ndarray:
    """Zero every element whose magnitude is strictly below ``threshold``."""
    if not threshold >= 0:
        raise InvalidInputError(f"prune threshold must be non-negative, got {threshold}")
    dense = np.asarray(dense)
    if threshold == 0:
        return dense.copy()
    return np.where(np.abs(dense) < threshold, dense.dtype.type(0), dense)


def sparsity(dense) -> float:
    dense = np.asarray(dense)
    if dense.size == 0:
        raise InvalidInputError("sparsity of an empty tensor is undefined")
    return float(np.count_nonzero(dense == 0)) / dense.size


# -- footprint formulas ------------------------------------------------------


def footprint_dense(n: int, precision: Precision = Precision.FP32) -> int:
    return int(n) * precision.nbytes


def footprint_bitmap(nnz: int, n: int, precision: Precision = Precision.FP32) -> int:
    if nnz < 0 or nnz > n:
        raise InvalidInputError(f"nnz must lie in [0, n]; got nnz={nnz}, n={n}")
    return int(nnz) * precision.nbytes + bitmap_nbytes(int(n))


def footprint_coo(nnz: int, ndim: int, index_width: IndexWidth = IndexWidth.INT64,
                  precision: Precision = Precision.FP32) -> int:
    if ndim <= 0:
        raise InvalidInputError("COO needs at least one index dimension")
    return (precision.nbytes + index_width.value * ndim) * int(nnz)


def breakeven_density_bitmap(precision: Precision = Precision.FP32) -> float:
    """Non-zero density below which bitmap storage is smaller than dense."""
    b = precision.nbytes
    return float((Fraction(b) - Fraction(1, 8)) / b)


def breakeven_density_coo(ndim: int, index_width: IndexWidth = IndexWidth.INT64,
                          precision: Precision = Precision.FP32) -> float:
    """Non-zero density below which COO storage is smaller than dense."""
    if ndim <= 0:
        raise InvalidInputError("COO needs at least one index dimension")
    b = precision.nbytes
    return float(Fraction(b, b + index_width.value * ndim))


@dataclass(frozen=True)
class FootprintReport:
    dense_bytes: int
    bitmap_bytes: int
    coo_bytes: int

    @property
    def improvement_pct(self) -> float:
        return improvement_pct(self.dense_bytes, self.bitmap_bytes)


def footprint_report(nnz: int, shape, precision: Precision = Precision.FP32,
                     index_width: IndexWidth = IndexWidth.INT64) -> FootprintReport:
    n = math.prod(shape)
    return FootprintReport(
        dense_bytes=footprint_dense(n, precision),
        bitmap_bytes=footprint_bitmap(nnz, n, precision),
        coo_bytes=footprint_coo(nnz, len(shape), index_width, precision),
    )


def improvement_pct(baseline_bytes: int, new_bytes: int) -> float:
    if baseline_bytes <= 0:
        raise InvalidInputError("baseline must be positive")
    return 100.0 * (baseline_bytes - new_bytes) / baseline_bytes


# Table-style formatting rounds half away from zero on the exact rational
# value; binary rounding would print -3.125 as -3.12.

def fmt_mib(nbytes: int) -> str:
    return _fmt2(Fraction(int(nbytes), MIB))


def fmt_pct(baseline_bytes: int, new_bytes: int) -> str:
    return _fmt2(Fraction(100 * (int(baseline_bytes) - int(new_bytes)), int(baseline_bytes)))


def _fmt2(q: Fraction) -> str:
    d = Decimal(q.numerator) / Decimal(q.denominator)
    return str(d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


# -- flat binary record ------------------------------------------------------

MAGIC = b"BTSH"


def to_bytes(b: BitmapTensor) -> bytes:
    """Serialize as: magic, u8 precision tag, u8 ndim, u32 dims, bitmap, values (all little-endian)."""
    if len(b.shape) > 255:
        raise InvalidInputError("too many dimensions to serialize")
    head = MAGIC + struct.pack("<BB", _PRECISION_TAGS[b.precision], len(b.shape))
    head += struct.pack(f"<{len(b.shape)}I", *b.shape)
    values = b.values.astype(b.precision.dtype.newbyteorder("<"), copy=False)
    return head + b.bitmap.tobytes() + values.tobytes()


def from_bytes(data: bytes) -> BitmapTensor:
    if data[:4] != MAGIC:
        raise CorruptStashError("bad magic, not a bitmap stash record")
    if len(data) < 6:
        raise CorruptStashError("truncated header")
    tag, ndim = struct.unpack_from("<BB", data, 4)
    tags = {v: k for k, v in _PRECISION_TAGS.items()}
    if tag not in tags:
        raise CorruptStashError(f"unknown precision tag {tag}")
    precision = tags[tag]
    off = 6
    if len(data) < off + 4 * ndim:
        raise CorruptStashError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    n = math.prod(shape)
    nb = bitmap_nbytes(n)
    if len(data) < off + nb:
        raise CorruptStashError("truncated bitmap")
    bitmap = np.frombuffer(data, dtype=np.uint8, count=nb, offset=off).copy()
    off += nb
    rest = len(data) - off
    if rest % precision.nbytes:
        raise CorruptStashError("value section is not a whole number of scalars")
    values = np.frombuffer(data, dtype=precision.dtype.newbyteorder("<"), offset=off)
    values = values.astype(precision.dtype)
    bitmap.setflags(write=False)
    values.setflags(write=False)
    out = BitmapTensor(tuple(shape), bitmap, values, precision)
    out.validate()
    return out
