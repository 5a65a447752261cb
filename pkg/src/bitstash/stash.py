"""Activation stash policies and the byte-exact memory ledger.

Every activation a layer needs for its backward pass goes through
:func:`stash_store` on the way forward and :func:`stash_restore` on the way
back. The ledger is charged the formula bytes of whatever is kept, so peak
numbers are exact and platform independent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bitmap import (
    BitmapTensor,
    Precision,
    bitmap_nbytes,
    compress,
    decompress,
    footprint_dense,
    prune,
)
from .errors import InvalidInputError, ProtocolViolationError


class StashFormat(enum.Enum):
    DENSE = "dense"
    BITMAP = "bitmap"


@dataclass(frozen=True)
class StashPolicy:
    format: StashFormat = StashFormat.DENSE
    prune_threshold: float = 0.0
    value_precision: Precision = Precision.FP32
    checkpoint_every_m: Optional[int] = None
    # ReLU keeps only its sign mask (ceil(n/8) bytes) instead of its input
    relu_mask_only: bool = False

    def __post_init__(self):
        if not self.prune_threshold >= 0:
            raise InvalidInputError(f"prune threshold must be >= 0, got {self.prune_threshold}")
        if self.checkpoint_every_m is not None and self.checkpoint_every_m < 1:
            raise InvalidInputError(f"checkpoint interval must be >= 1, got {self.checkpoint_every_m}")

    @property
    def label(self) -> str:
        parts = [self.format.value]
        if self.prune_threshold:
            parts.append(f"t={self.prune_threshold:g}")
        parts.append(self.value_precision.value)
        if self.checkpoint_every_m is not None:
            parts.append(f"m={self.checkpoint_every_m}")
        if self.relu_mask_only:
            parts.append("relu-mask")
        return " ".join(parts)

    def is_boundary(self, layer_id: int) -> bool:
        m = self.checkpoint_every_m
        return m is None or layer_id % m == 0


DENSE = StashPolicy()
BITMAP = StashPolicy(StashFormat.BITMAP)


# -- ledger ------------------------------------------------------------------


@dataclass
class LedgerReport:
    live_bytes: int
    peak_bytes: int
    per_layer: dict


class MemoryLedger:
    """Live/peak accounting of stash bytes.

    ``events`` logs every charge and credit as ``(layer_id, label, delta)``.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.total_charged = 0
        self.total_credited = 0
        self.events = []
        self._per_layer = {}

    def charge(self, layer_id, nbytes: int, label: str = "stash") -> None:
        nbytes = int(nbytes)
        if nbytes < 0:
            raise InvalidInputError("cannot charge a negative byte count")
        self.live_bytes += nbytes
        self.total_charged += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        self._per_layer[layer_id] = self._per_layer.get(layer_id, 0) + nbytes
        self.events.append((layer_id, label, nbytes))

    def credit(self, layer_id, nbytes: int, label: str = "stash") -> None:
        nbytes = int(nbytes)
        if nbytes > self.live_bytes:
            raise ProtocolViolationError(
                f"crediting {nbytes} B for layer {layer_id} would drive live bytes negative"
            )
        self.live_bytes -= nbytes
        self.total_credited += nbytes
        self._per_layer[layer_id] = self._per_layer.get(layer_id, 0) - nbytes
        self.events.append((layer_id, label, -nbytes))

    def report(self) -> LedgerReport:
        return LedgerReport(self.live_bytes, self.peak_bytes, dict(self._per_layer))

    def peak_trace(self):
        """Live bytes after every event, in order."""
        live, out = 0, []
        for _, _, delta in self.events:
            live += delta
            out.append(live)
        return out


def ledger_report(ledger: MemoryLedger) -> LedgerReport:
    return ledger.report()


# -- handles -----------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointMarker:
    segment_id: int


@dataclass(frozen=True, eq=False)
class MaskPayload:
    """Packed ``x > 0`` bits for a ReLU input."""

    shape: tuple
    bitmap: np.ndarray

    @property
    def nbytes(self) -> int:
        return bitmap_nbytes(math.prod(self.shape))


@dataclass(eq=False)
class StashHandle:
    layer_id: int
    payload: object  # ndarray | BitmapTensor | MaskPayload | CheckpointMarker
    charged_bytes: int
    dtype: np.dtype  # working precision to restore into
    restored: bool = False

    @property
    def is_marker(self) -> bool:
        return isinstance(self.payload, CheckpointMarker)


def payload_bytes(payload) -> int:
    if isinstance(payload, CheckpointMarker):
        return 0
    if isinstance(payload, (BitmapTensor, MaskPayload)):
        return payload.nbytes
    return footprint_dense(payload.size, Precision.from_dtype(payload.dtype))


def encode(policy: StashPolicy, activation: np.ndarray, mask_only: bool = False):
    """Apply the store pipeline: prune, convert precision, then compress."""
    if mask_only:
        bits = np.packbits(np.ascontiguousarray(activation).reshape(-1) > 0, bitorder="little")
        bits.setflags(write=False)
        return MaskPayload(activation.shape, bits)
    x = prune(activation, policy.prune_threshold) if policy.prune_threshold else activation
    if policy.format is StashFormat.BITMAP:
        return compress(x, policy.value_precision)
    x = x.astype(policy.value_precision.dtype)  # always a private copy
    x.setflags(write=False)
    return x


def decode(payload, dtype) -> np.ndarray:
    if isinstance(payload, BitmapTensor):
        return decompress(payload, dtype)
    if isinstance(payload, MaskPayload):
        n = math.prod(payload.shape)
        bits = np.unpackbits(payload.bitmap, count=n, bitorder="little")
        return bits.astype(dtype).reshape(payload.shape)
    return payload.astype(dtype)


def stash_store(ledger: Optional[MemoryLedger], policy: StashPolicy, layer_id: int,
                activation: np.ndarray, mask_only: bool = False) -> StashHandle:
    """Keep ``activation`` for the backward pass under ``policy``.

    Layers inside a checkpoint segment get a marker and cost nothing; their
    input is rebuilt from the segment boundary on the way back.
    """
    activation = np.asarray(activation)
    if activation.size == 0:
        raise InvalidInputError(f"layer {layer_id}: cannot stash an empty activation")
    if not policy.is_boundary(layer_id):
        payload = CheckpointMarker(layer_id // policy.checkpoint_every_m)
    else:
        payload = encode(policy, activation, mask_only)
    nbytes = payload_bytes(payload)
    if ledger is not None and nbytes:
        ledger.charge(layer_id, nbytes)
    return StashHandle(layer_id, payload, nbytes, activation.dtype)


def peek(handle: StashHandle) -> np.ndarray:
    """Decode a stored payload without consuming the handle."""
    if handle.restored:
        raise ProtocolViolationError(f"layer {handle.layer_id}: stash already restored")
    if handle.is_marker:
        raise ProtocolViolationError(f"layer {handle.layer_id}: a checkpoint marker holds no data")
    return decode(handle.payload, handle.dtype)


def stash_restore(ledger: Optional[MemoryLedger], handle: StashHandle, recompute_ctx=None) -> np.ndarray:
    """Consume ``handle``, returning the activation and crediting its bytes."""
    if handle is None:
        raise ProtocolViolationError("no stash handle: forward was not run before backward")
    if handle.restored:
        raise ProtocolViolationError(f"layer {handle.layer_id}: stash restored twice")
    if handle.is_marker:
        if recompute_ctx is None:
            raise ProtocolViolationError(f"layer {handle.layer_id}: checkpoint marker needs a recompute context")
        out = recompute_ctx.fetch(handle.layer_id)
    else:
        out = decode(handle.payload, handle.dtype)
        if ledger is not None and handle.charged_bytes:
            ledger.credit(handle.layer_id, handle.charged_bytes)
    handle.restored = True
    return out


# -- checkpoint-every-m ------------------------------------------------------


def plan_checkpoints(num_layers: int, m: int):
    """Return ``(stored_layer_ids, segments)`` with segments as ``(start, stop)``."""
    if hasattr(num_layers, "layers"):
        num_layers = len(num_layers.layers)
    if m < 1:
        raise InvalidInputError(f"checkpoint interval must be >= 1, got {m}")
    if num_layers < 1:
        raise InvalidInputError("model has no layers")
    m = min(m, num_layers)
    stored = list(range(0, num_layers, m))
    segments = [(a, min(a + m, num_layers)) for a in stored]
    return stored, segments


def recompute_segment(model, segment_input, segment_layers, policy, ledger):
    """Re-run forward over one segment and hold its inner inputs as dense temporaries.

    ``segment_layers`` is a ``range`` of layer ids. Returns a dict from layer
    id to that layer's input for every layer after the first; each entry is
    charged to the ledger until the caller credits it. Running statistics
    are left untouched.
    """
    out = {}
    x = segment_input
    ids = list(segment_layers)
    for i in ids[:-1]:
        x = model.layers[i].forward(x, training=True, update_running=False)[0]
        out[i + 1] = x
        if ledger is not None:
            ledger.charge(i + 1, footprint_dense(x.size, Precision.from_dtype(x.dtype)), "recompute")
    return out


@dataclass
class RecomputeContext:
    """Lazily recomputes segments as backward reaches their marker layers."""

    model: object
    handles: list
    policy: StashPolicy
    ledger: Optional[MemoryLedger]
    recomputed_macs: int = 0
    codec_elements: int = 0
    _temps: dict = field(default_factory=dict)

    def fetch(self, layer_id: int) -> np.ndarray:
        if layer_id not in self._temps:
            m = self.policy.checkpoint_every_m
            start = (layer_id // m) * m
            stop = min(start + m, len(self.model.layers))
            boundary = self.handles[start]
            x0 = peek(boundary)
            if isinstance(boundary.payload, BitmapTensor):
                self.codec_elements += x0.size
            temps = recompute_segment(self.model, x0, range(start, stop), self.policy, self.ledger)
            for i in range(start, stop - 1):
                inp = x0 if i == start else temps[i]
                self.recomputed_macs += self.model.layers[i].macs(inp.shape)
            self._temps.update(temps)
        x = self._temps.pop(layer_id)
        if self.ledger is not None:
            self.ledger.credit(layer_id, footprint_dense(x.size, Precision.from_dtype(x.dtype)), "recompute")
        return x
