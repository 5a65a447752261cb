"""Model-spec parsing and analytic activation-footprint reports."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine
from .bitmap import (
    IndexWidth,
    Precision,
    bitmap_nbytes,
    footprint_bitmap,
    footprint_coo,
    footprint_dense,
    improvement_pct,
    prune,
)
from .data import synthetic_input
from .errors import InvalidInputError, OutOfBandWarning, SpecParseError
from .stash import DENSE, StashFormat, StashPolicy, plan_checkpoints

SPEC_DIR = Path(__file__).parent / "specs"

_KIND_ALIASES = {
    "conv2d": "conv2d", "conv": "conv2d",
    "linear": "linear", "fc": "linear",
    "relu": "relu",
    "maxpool2d": "maxpool2d", "maxpool": "maxpool2d",
    "batchnorm2d": "batchnorm2d", "batchnorm": "batchnorm2d", "bn": "batchnorm2d",
}

_ALLOWED = {
    "conv2d": {"in_channels", "out_channels", "kernel", "stride", "padding"},
    "linear": {"in_features", "out_features"},
    "relu": set(),
    "maxpool2d": {"kernel", "stride"},
    "batchnorm2d": {"channels", "eps", "momentum", "double_mask"},
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict
    input_shape: tuple  # per sample
    output_shape: tuple

    @property
    def elements_per_sample(self) -> int:
        return math.prod(self.input_shape)

    def build(self):
        p = self.params
        if self.kind == "conv2d":
            return engine.Conv2d(self.input_shape[0], p["out_channels"], p["kernel"],
                                 p.get("stride", 1), p.get("padding", 0))
        if self.kind == "linear":
            return engine.Linear(math.prod(self.input_shape), p["out_features"])
        if self.kind == "relu":
            return engine.ReLU()
        if self.kind == "maxpool2d":
            return engine.MaxPool2d(p["kernel"], p.get("stride"))
        return engine.BatchNorm2d(self.input_shape[0], p.get("eps", 1e-5), p.get("momentum", 0.1),
                                  p.get("double_mask", False))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    batch_size: int
    input_shape: tuple
    layers: tuple

    def build(self, seed: int = 0, dtype=np.float32) -> engine.Network:
        return engine.Network([ls.build() for ls in self.layers], seed=seed, dtype=dtype)

    def with_batch(self, batch_size: int) -> "ModelSpec":
        return ModelSpec(self.name, int(batch_size), self.input_shape, self.layers)

    def elements(self):
        """Stashed-input element count of every layer, at this batch size."""
        return [self.batch_size * ls.elements_per_sample for ls in self.layers]


def _positive_int(value, what, index=None):
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise SpecParseError(f"{what} must be a positive integer, got {value!r}", index)
    return value


def parse_model_spec(text: str) -> ModelSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecParseError("model spec must be a JSON object")
    for key in ("batch_size", "input_shape", "layers"):
        if key not in doc:
            raise SpecParseError(f"missing field {key!r}")
    batch = _positive_int(doc["batch_size"], "batch_size")
    shape = doc["input_shape"]
    if not isinstance(shape, list) or len(shape) != 3:
        raise SpecParseError("input_shape must be [channels, height, width]")
    shape = tuple(_positive_int(d, "input dimension") for d in shape)
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise SpecParseError("layers must be a non-empty list")

    layers = []
    cur = shape
    for i, raw in enumerate(doc["layers"]):
        if not isinstance(raw, dict) or "kind" not in raw:
            raise SpecParseError("each layer needs a 'kind'", i)
        kind = _KIND_ALIASES.get(str(raw["kind"]).lower())
        if kind is None:
            raise SpecParseError(f"unknown layer kind {raw['kind']!r}", i)
        params = {k: v for k, v in raw.items() if k != "kind"}
        extra = set(params) - _ALLOWED[kind]
        if extra:
            raise SpecParseError(f"unexpected fields {sorted(extra)} for {kind}", i)
        if kind in ("conv2d", "maxpool2d", "batchnorm2d") and len(cur) != 3:
            raise SpecParseError(f"{kind} needs a [C, H, W] input, got {list(cur)}", i)
        if kind == "conv2d":
            _positive_int(params.get("out_channels"), "out_channels", i)
            if "in_channels" in params and params["in_channels"] != cur[0]:
                raise SpecParseError(f"in_channels {params['in_channels']} but input has {cur[0]}", i)
            if "kernel" not in params:
                raise SpecParseError("conv2d needs a kernel", i)
        elif kind == "maxpool2d" and "kernel" not in params:
            raise SpecParseError("maxpool2d needs a kernel", i)
        elif kind == "linear":
            _positive_int(params.get("out_features"), "out_features", i)
            if "in_features" in params and params["in_features"] != math.prod(cur):
                raise SpecParseError(f"in_features {params['in_features']} but input has {math.prod(cur)}", i)
        elif kind == "batchnorm2d" and "channels" in params and params["channels"] != cur[0]:
            raise SpecParseError(f"channels {params['channels']} but input has {cur[0]}", i)
        ls = LayerSpec(kind, params, cur, cur)
        try:
            out = ls.build().output_shape((batch,) + cur)[1:]
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise SpecParseError(str(exc), i) from None
        if any(d <= 0 for d in out):
            raise SpecParseError(f"non-positive output shape {list(out)}", i)
        layers.append(LayerSpec(kind, params, cur, tuple(out)))
        cur = tuple(out)
    return ModelSpec(str(doc.get("name", "model")), batch, shape, tuple(layers))


def load_model_spec(path) -> ModelSpec:
    p = Path(path)
    if not p.exists() and (SPEC_DIR / f"{path}.json").exists():
        p = SPEC_DIR / f"{path}.json"
    try:
        text = p.read_text()
    except OSError as exc:
        raise SpecParseError(f"cannot read model spec {path}: {exc.strerror}") from None
    return parse_model_spec(text)


# -- sparsity sources --------------------------------------------------------

# Density of each layer's stashed input, by layer kind. Estimates, not measurements.
DEFAULT_ASSUMED_DENSITY = {
    "conv2d": 0.3,
    "maxpool2d": 0.3,
    "batchnorm2d": 1.0,
    "relu": 1.0,
    "linear": 0.3,
}


@dataclass(frozen=True)
class AssumedDensity:
    table: dict = field(default_factory=lambda: dict(DEFAULT_ASSUMED_DENSITY))
    # assume the same density everywhere, overriding the table
    uniform: Optional[float] = None


@dataclass
class LiveForward:
    """Measure densities on a real training-mode forward pass."""

    seed: int = 0
    model: Optional[engine.Network] = None
    x: Optional[np.ndarray] = None


def capture_inputs(model: engine.Network, x) -> list:
    """Every layer's input on a training-mode forward, leaving running stats untouched."""
    out = []
    for layer in model.layers:
        out.append(x)
        x, _ = layer.forward(x, training=True, update_running=False)
    return out


def _live_inputs(spec: ModelSpec, source: LiveForward):
    model = source.model if source.model is not None else spec.build(source.seed)
    x = source.x
    if x is None:
        x = synthetic_input(source.seed, (spec.batch_size,) + spec.input_shape)
    return capture_inputs(model, x)


def _assumed_densities(spec: ModelSpec, source: AssumedDensity):
    out = []
    for i, ls in enumerate(spec.layers):
        if source.uniform is not None:
            d = source.uniform
        elif ls.kind == "batchnorm2d" and ls.params.get("double_mask"):
            d = out[-1] if out else 1.0
        else:
            d = source.table[ls.kind]
        out.append(float(d))
    return out


# -- per-layer report --------------------------------------------------------


@dataclass(frozen=True)
class LayerReport:
    layer_id: int
    kind: str
    elements: int
    density: float
    density_source: str  # "assumed" or "measured"
    dense_fp32: int
    bitmap_fp32: int
    bitmap_fp16: int
    coo_int64: int


def _layer_report(i, ls, n, ndim, nnz32, nnz16, source_name):
    return LayerReport(
        layer_id=i,
        kind=ls.kind,
        elements=n,
        density=nnz32 / n,
        density_source=source_name,
        dense_fp32=footprint_dense(n, Precision.FP32),
        bitmap_fp32=footprint_bitmap(nnz32, n, Precision.FP32),
        bitmap_fp16=footprint_bitmap(nnz16, n, Precision.FP16),
        coo_int64=footprint_coo(nnz32, ndim, IndexWidth.INT64, Precision.FP32),
    )


def analyze_model(spec: ModelSpec, sparsity_source=None) -> list:
    """One :class:`LayerReport` per layer, sized by that layer's stashed input."""
    if sparsity_source is None:
        sparsity_source = AssumedDensity()
    reports = []
    if isinstance(sparsity_source, LiveForward):
        for i, (ls, x) in enumerate(zip(spec.layers, _live_inputs(spec, sparsity_source))):
            nnz32 = int(np.count_nonzero(x.astype(np.float32)))
            nnz16 = int(np.count_nonzero(x.astype(np.float16)))
            reports.append(_layer_report(i, ls, x.size, x.ndim, nnz32, nnz16, "measured"))
    else:
        for i, (ls, d) in enumerate(zip(spec.layers, _assumed_densities(spec, sparsity_source))):
            n = spec.batch_size * ls.elements_per_sample
            nnz = round(d * n)
            reports.append(_layer_report(i, ls, n, 1 + len(ls.input_shape), nnz, nnz, "assumed"))
    return reports


def totals_by_kind(reports) -> dict:
    totals = {}
    for r in reports:
        t = totals.setdefault(r.kind, {"layers": 0, "elements": 0, "dense_fp32": 0, "bitmap_fp32": 0,
                                       "bitmap_fp16": 0, "coo_int64": 0})
        t["layers"] += 1
        for k in ("elements", "dense_fp32", "bitmap_fp32", "bitmap_fp16", "coo_int64"):
            t[k] += getattr(r, k)
    return totals


# -- peak prediction ---------------------------------------------------------


def stash_bytes(policy: StashPolicy, n: int, nnz: int, is_relu: bool = False) -> int:
    """Formula bytes one boundary stash costs under ``policy`` (``nnz`` after the policy's pipeline)."""
    if policy.relu_mask_only and is_relu:
        return bitmap_nbytes(n)
    if policy.format is StashFormat.BITMAP:
        return footprint_bitmap(nnz, n, policy.value_precision)
    return footprint_dense(n, policy.value_precision)


def predict_peak(stored_bytes, temp_bytes, m: Optional[int]) -> int:
    """Peak live stash bytes of one forward/backward cycle.

    ``stored_bytes[i]`` is what layer ``i`` costs when stashed; ``temp_bytes[i]``
    what its input costs as a dense recompute temporary. Mirrors the ledger
    schedule: boundaries accumulate on the way forward, then each segment,
    last first, holds its boundaries plus its recomputed inner inputs.
    """
    num = len(stored_bytes)
    if m is None:
        return int(sum(stored_bytes))
    stored, segments = plan_checkpoints(num, m)
    peak = sum(stored_bytes[a] for a in stored)
    for k in range(len(segments) - 1, -1, -1):
        a, b = segments[k]
        live = sum(stored_bytes[s] for s, _ in segments[: k + 1]) + sum(temp_bytes[a + 1:b])
        peak = max(peak, live)
    return int(peak)


def _pipeline_nnz(policy: StashPolicy, x) -> int:
    if policy.prune_threshold:
        x = prune(x, policy.prune_threshold)
    return int(np.count_nonzero(x.astype(policy.value_precision.dtype)))


def policy_peak(spec: ModelSpec, policy: StashPolicy, sparsity_source=None, working=Precision.FP32) -> int:
    """Predicted peak stash bytes for ``spec`` under ``policy``."""
    kinds = [ls.kind for ls in spec.layers]
    if isinstance(sparsity_source, LiveForward):
        xs = _live_inputs(spec, sparsity_source)
        ns = [x.size for x in xs]
        nnzs = [_pipeline_nnz(policy, x) for x in xs]
    else:
        ns = spec.elements()
        ds = _assumed_densities(spec, sparsity_source or AssumedDensity())
        # pruning cannot be predicted without activations; assumed densities are used as-is
        nnzs = [round(d * n) for d, n in zip(ds, ns)]
    stored = [stash_bytes(policy, n, k, kind == "relu") for n, k, kind in zip(ns, nnzs, kinds)]
    temps = [footprint_dense(n, working) for n in ns]
    return predict_peak(stored, temps, policy.checkpoint_every_m)


@dataclass(frozen=True)
class StrategyRow:
    policy: str
    peak_bytes: int
    reduction_pct: float


def strategy_compare(spec: ModelSpec, policies, sparsity_source=None) -> list:
    policies = list(policies)
    if not policies:
        raise InvalidInputError("strategy comparison needs at least one policy")
    if isinstance(sparsity_source, LiveForward) and sparsity_source.x is None:
        # pin one input so every policy sees the same activations
        sparsity_source = LiveForward(
            sparsity_source.seed, sparsity_source.model,
            synthetic_input(sparsity_source.seed, (spec.batch_size,) + spec.input_shape),
        )
    base = policy_peak(spec, DENSE, sparsity_source)
    rows = []
    for p in policies:
        peak = policy_peak(spec, p, sparsity_source)
        rows.append(StrategyRow(p.label, peak, improvement_pct(base, peak)))
    return rows


# FP16 bitmap saving versus dense FP32 reported for the combined scheme
FP16_BAND = (0.55, 0.75)


@dataclass(frozen=True)
class BandCheck:
    density: float  # non-zeros over all stashed elements, after FP16 conversion
    saving: float  # 1 - bitmap FP16 bytes / dense FP32 bytes, all layers stored
    band: tuple
    in_band: bool
    # the FP16 band is only claimed for densities in [0.25, 0.5]
    density_in_scope: bool


def fp16_band_check(spec: ModelSpec, sparsity_source=None, band=FP16_BAND, warn=True) -> BandCheck:
    """Measure the Bitmap+FP16 saving and warn (:class:`OutOfBandWarning`) when it leaves ``band``."""
    reports = analyze_model(spec, sparsity_source)
    n = sum(r.elements for r in reports)
    dense = sum(r.dense_fp32 for r in reports)
    fp16 = sum(r.bitmap_fp16 for r in reports)
    # bitmap_fp16 = 2 * nnz + ceil(n / 8) per layer
    nnz = (fp16 - sum(bitmap_nbytes(r.elements) for r in reports)) // 2
    saving = 1 - fp16 / dense
    check = BandCheck(nnz / n, saving, tuple(band), band[0] <= saving <= band[1], 0.25 <= nnz / n <= 0.5)
    if warn and not check.in_band:
        warnings.warn(
            f"fp16 band: Bitmap+FP16 saving {100 * saving:.2f}% at density {check.density:.4f} "
            f"is outside {100 * band[0]:.0f}-{100 * band[1]:.0f}%",
            OutOfBandWarning,
            stacklevel=2,
        )
    return check


# -- histogram ---------------------------------------------------------------

DEFAULT_BIN_EDGES = (0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)
DEFAULT_THRESHOLDS = (0.01, 0.05, 0.1)


@dataclass(frozen=True)
class Histogram:
    """Counts of |activation| in ``[edges[k], edges[k+1])``; the last bin is open-ended."""

    edges: tuple
    counts: tuple
    total: int
    below: dict  # threshold -> fraction of activations with |v| < threshold
    exact_zero_fraction: float


def activation_histogram(model: engine.Network, x, bin_edges=DEFAULT_BIN_EDGES,
                         thresholds=DEFAULT_THRESHOLDS) -> Histogram:
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 1 or edges[0] != 0 or np.any(np.diff(edges) <= 0):
        raise InvalidInputError("bin edges must start at 0 and increase strictly")
    counts = np.zeros(edges.size, dtype=np.int64)
    below = {float(t): 0 for t in thresholds}
    zeros = 0
    total = 0
    for a in capture_inputs(model, x):
        v = np.abs(a.astype(np.float64)).reshape(-1)
        idx = np.searchsorted(edges, v, side="right") - 1
        counts += np.bincount(idx, minlength=edges.size)
        for t in below:
            below[t] += int(np.count_nonzero(v < t))
        zeros += int(np.count_nonzero(v == 0))
        total += v.size
    return Histogram(
        tuple(float(e) for e in edges),
        tuple(int(c) for c in counts),
        total,
        {t: c / total for t, c in below.items()},
        zeros / total,
    )


# -- operation counts --------------------------------------------------------


@dataclass(frozen=True)
class OpCounts:
    m: int
    stored_layers: int
    forward_macs: int
    recompute_macs: int
    codec_elements: int  # elements touched by bitmap compress/decompress per step


def op_counts(spec: ModelSpec, m: int = 1) -> OpCounts:
    """MACs and bitmap codec traffic for one training step under checkpoint-every-``m``.

    Codec traffic assumes a bitmap policy: each stored input is compressed
    once and decompressed once, plus one extra decode of a segment boundary
    that feeds a recomputation.
    """
    layers = [ls.build() for ls in spec.layers]
    shapes = [(spec.batch_size,) + ls.input_shape for ls in spec.layers]
    macs = [layer.macs(s) for layer, s in zip(layers, shapes)]
    ns = spec.elements()
    stored, segments = plan_checkpoints(len(layers), m)
    recompute = sum(sum(macs[a:b - 1]) for a, b in segments)
    codec = sum(2 * ns[a] + (ns[a] if b - a > 1 else 0) for a, b in segments)
    return OpCounts(m, len(stored), sum(macs), recompute, codec)
