"""Bitmap-compressed activation stashing for memory-lean training."""

from .bitmap import (
    BitmapTensor,
    FootprintReport,
    IndexWidth,
    Precision,
    breakeven_density_bitmap,
    breakeven_density_coo,
    compress,
    decompress,
    footprint_bitmap,
    footprint_coo,
    footprint_dense,
    prune,
    sparsity,
)
from .errors import CorruptStashError, InvalidInputError, ProtocolViolationError, SpecParseError
from .stash import BITMAP, DENSE, MemoryLedger, StashFormat, StashPolicy

__all__ = [
    "BITMAP",
    "DENSE",
    "BitmapTensor",
    "CorruptStashError",
    "FootprintReport",
    "IndexWidth",
    "InvalidInputError",
    "MemoryLedger",
    "Precision",
    "ProtocolViolationError",
    "SpecParseError",
    "StashFormat",
    "StashPolicy",
    "breakeven_density_bitmap",
    "breakeven_density_coo",
    "compress",
    "decompress",
    "footprint_bitmap",
    "footprint_coo",
    "footprint_dense",
    "prune",
    "sparsity",
]
__version__ = "0.1.0"
