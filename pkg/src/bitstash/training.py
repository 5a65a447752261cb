"""Minibatch SGD training loop with per-epoch stash accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bitmap import BitmapTensor
from .engine import Network, sgd_step, softmax_cross_entropy
from .stash import DENSE, MemoryLedger, StashPolicy


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    peak_stash_bytes: int
    # non-zero fraction over everything stashed in the epoch, after prune and precision
    stash_density: float
    wall_time_s: float
    # largest live stash left behind by any backward pass; 0 when the stash discipline holds
    residual_bytes: int = 0


@dataclass
class TrainResult:
    model: Network
    policy: StashPolicy
    epochs: list = field(default_factory=list)

    @property
    def peak_stash_bytes(self) -> int:
        return max((e.peak_stash_bytes for e in self.epochs), default=0)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy if self.epochs else float("nan")


def accuracy(model: Network, x, y, batch_size=256) -> float:
    hits = 0
    for s in range(0, len(x), batch_size):
        pred = model.predict(x[s:s + batch_size]).argmax(axis=1)
        hits += int(np.count_nonzero(pred == y[s:s + batch_size]))
    return hits / len(x)


def train(model: Network, x, y, policy: StashPolicy = DENSE, epochs=5, batch_size=32, lr=0.01,
          seed=0, x_test=None, y_test=None, on_epoch=None) -> TrainResult:
    """Train ``model`` in place; returns per-epoch metrics.

    Batches of fewer than two samples are skipped (batchnorm needs two).
    Accuracy is measured on ``(x_test, y_test)`` when given, else on the
    training data.
    """
    if x_test is None:
        x_test, y_test = x, y
    rng = np.random.Generator(np.random.PCG64(seed))
    result = TrainResult(model, policy)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        ledger = MemoryLedger()
        order = rng.permutation(len(x))
        losses = []
        nnz = total = residual = 0
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x[idx], y[idx]
            logits = model.forward(xb, policy, ledger)
            for h in model.pending_handles():
                if not h.is_marker:
                    nnz_h, n_h = _nnz_of(h)
                    nnz += nnz_h
                    total += n_h
            loss, g = softmax_cross_entropy(logits, yb)
            grads = model.backward(g, ledger)
            residual = max(residual, ledger.live_bytes)
            sgd_step(model, grads, lr)
            losses.append(loss)
        m = EpochMetrics(
            epoch=epoch,
            loss=float(np.mean(losses)),
            accuracy=accuracy(model, x_test, y_test),
            peak_stash_bytes=ledger.peak_bytes,
            stash_density=nnz / total if total else float("nan"),
            wall_time_s=time.perf_counter() - t0,
            residual_bytes=residual,
        )
        result.epochs.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return result


def _nnz_of(handle):
    p = handle.payload
    if isinstance(p, BitmapTensor):
        return p.nnz, p.n
    if isinstance(p, np.ndarray):
        return int(np.count_nonzero(p)), p.size
    n = int(np.prod(p.shape))
    return int(np.unpackbits(p.bitmap, count=n, bitorder="little").sum()), n


def flat_parameters(model: Network) -> np.ndarray:
    """All parameters concatenated in layer order (the flat weight dump format)."""
    parts = [arr.reshape(-1) for _, _, arr in model.parameters()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=model.dtype)
