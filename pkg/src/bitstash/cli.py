"""Command-line entry point: ``bitstash {bench,train,footprint,hist,opcount,dump,inspect}``."""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import analyzer
from .bitmap import (
    IndexWidth,
    Precision,
    fmt_mib,
    fmt_pct,
    footprint_bitmap,
    footprint_coo,
    footprint_dense,
    from_bytes,
    to_bytes,
)
from .data import SyntheticDataset, load_idx_dataset, synthetic_input
from .errors import BitstashError, InvalidInputError, OutOfBandWarning
from .stash import BITMAP, DENSE, MemoryLedger, StashFormat, StashPolicy, stash_store
from .tables import render, write_bytes, write_output
from .training import flat_parameters, train

# (batch, channels, width, height) of activations along a ResNet-style stem and stages
BENCH_CONFIGS = [
    (16, 3, 224, 224),
    (16, 7, 112, 112),
    (16, 64, 56, 56),
    (16, 128, 28, 28),
    (16, 256, 14, 14),
    (16, 512, 7, 7),
]
BENCH_DENSITIES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class RunConfig:
    subcommand: str
    spec: str = "desknet"
    policy: str = "dense"
    thresholds: list = field(default_factory=lambda: [0.0])
    precision: str = "fp32"
    checkpoint_m: list = field(default_factory=list)
    relu_mask_only: bool = False
    seed: int = 0
    epochs: int = 5
    batch: Optional[int] = None
    lr: float = 0.01
    samples: int = 512
    out: Optional[str] = None
    format: str = "csv"
    data_idx: list = field(default_factory=list)
    sparsity: str = "live"
    compare: bool = False
    bins: Optional[list] = None
    save_weights: Optional[str] = None
    file: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned value, got {self.seed}")
        for t in self.thresholds:
            if not t >= 0:
                raise InvalidInputError(f"threshold must be >= 0, got {t}")
        for m in self.checkpoint_m:
            if m < 1:
                raise InvalidInputError(f"checkpoint interval must be >= 1, got {m}")

    def policies(self):
        fmt = StashFormat(self.policy)
        ms = self.checkpoint_m or [None]
        return [StashPolicy(fmt, t, Precision(self.precision), m, self.relu_mask_only)
                for t in self.thresholds for m in ms]

    def model_spec(self):
        spec = analyzer.load_model_spec(self.spec)
        return spec.with_batch(self.batch) if self.batch else spec


# -- bench -------------------------------------------------------------------


def synth_activation(shape, density, rng) -> np.ndarray:
    """A float32 tensor with exactly ``round(density * n)`` non-zeros at random positions."""
    n = math.prod(shape)
    k = round(density * n)
    flat = np.zeros(n, dtype=np.float32)
    pos = rng.permutation(n)[:k]
    flat[pos] = rng.uniform(0.5, 1.5, size=k).astype(np.float32)
    return flat.reshape(shape)


def bench_rows(seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for b, c, w, h in BENCH_CONFIGS:
        shape = (b, c, h, w)
        n = math.prod(shape)
        for d in BENCH_DENSITIES:
            x = synth_activation(shape, d, rng)
            nnz = int(np.count_nonzero(x))
            ld, lb = MemoryLedger(), MemoryLedger()
            stash_store(ld, DENSE, 0, x)
            stash_store(lb, BITMAP, 0, x)
            dense = footprint_dense(n)
            bitmap = footprint_bitmap(nnz, n)
            rows.append({
                "batch": b, "channels": c, "width": w, "height": h, "num_elements": n,
                "pct_nonzero": f"{round(100 * d)}%",
                "dense_mib": fmt_mib(dense),
                "bitmap_mib": fmt_mib(bitmap),
                "improvement_pct": fmt_pct(dense, bitmap),
                "coo_int32_mib": fmt_mib(footprint_coo(nnz, 4, IndexWidth.INT32)),
                "coo_int64_mib": fmt_mib(footprint_coo(nnz, 4, IndexWidth.INT64)),
                "ledger_dense_bytes": ld.peak_bytes,
                "ledger_bitmap_bytes": lb.peak_bytes,
            })
    return rows


def cmd_bench(cfg: RunConfig) -> str:
    return render(bench_rows(cfg.seed), cfg.format)


# -- train -------------------------------------------------------------------


def _load_data(cfg: RunConfig, spec):
    if cfg.data_idx:
        if len(cfg.data_idx) != 2:
            raise InvalidInputError("--data-idx takes an images file and a labels file")
        x, y = load_idx_dataset(*cfg.data_idx)
        if x.shape[1:] != spec.input_shape:
            raise InvalidInputError(f"IDX images are {x.shape[1:]}, model expects {spec.input_shape}")
        split = max(len(x) * 4 // 5, 2)
        return x[:split], y[:split], x[split:], y[split:]
    classes = spec.layers[-1].output_shape[0]
    ds = SyntheticDataset(cfg.seed, cfg.samples, classes, spec.input_shape)
    x, y = ds.generate("train")
    xt, yt = ds.generate("test")
    return x, y, xt, yt


def train_rows(cfg: RunConfig):
    spec = cfg.model_spec()
    x, y, xt, yt = _load_data(cfg, spec)
    rows = []
    last_model = None
    for policy in cfg.policies():
        model = spec.build(cfg.seed)
        result = train(model, x, y, policy, cfg.epochs, spec.batch_size, cfg.lr, cfg.seed, xt, yt)
        for e in result.epochs:
            rows.append({
                "policy": policy.format.value,
                "threshold": repr(policy.prune_threshold),
                "precision": policy.value_precision.value,
                "checkpoint_m": policy.checkpoint_every_m or 1,
                "epoch": e.epoch,
                "loss": repr(e.loss),
                "accuracy": repr(e.accuracy),
                "peak_stash_bytes": e.peak_stash_bytes,
                "peak_stash_mib": fmt_mib(e.peak_stash_bytes),
                "stash_density": f"{e.stash_density:.6f}",
                "wall_time_s": f"{e.wall_time_s:.3f}",
            })
        last_model = model
    return rows, last_model


def cmd_train(cfg: RunConfig) -> str:
    rows, model = train_rows(cfg)
    if cfg.save_weights:
        write_bytes(flat_parameters(model).astype("<f4").tobytes(), cfg.save_weights)
    return render(rows, cfg.format)


# -- footprint ---------------------------------------------------------------


def _source(cfg: RunConfig):
    return analyzer.LiveForward(cfg.seed) if cfg.sparsity == "live" else analyzer.AssumedDensity()


def footprint_rows(cfg: RunConfig):
    spec = cfg.model_spec()
    source = _source(cfg)
    if cfg.compare:
        analyzer.fp16_band_check(spec, source)
        policies = [DENSE, BITMAP, StashPolicy(StashFormat.BITMAP, value_precision=Precision.FP16)]
        for p in cfg.policies():
            if p not in policies:
                policies.append(p)
        return [{"policy": r.policy, "peak_bytes": r.peak_bytes, "peak_mib": fmt_mib(r.peak_bytes),
                 "reduction_pct": f"{r.reduction_pct:.2f}"}
                for r in analyzer.strategy_compare(spec, policies, source)]
    reports = analyzer.analyze_model(spec, source)
    rows = []
    cols = ("dense_fp32", "bitmap_fp32", "bitmap_fp16", "coo_int64")
    for r in reports:
        row = {"layer_id": r.layer_id, "kind": r.kind, "elements": r.elements,
               "density": f"{r.density:.6f}", "density_source": r.density_source}
        for c in cols:
            row[f"{c}_bytes"] = getattr(r, c)
            row[f"{c}_mib"] = fmt_mib(getattr(r, c))
        rows.append(row)
    for kind, t in analyzer.totals_by_kind(reports).items():
        row = {"layer_id": "total", "kind": kind, "elements": t["elements"],
               "density": "", "density_source": reports[0].density_source}
        for c in cols:
            row[f"{c}_bytes"] = t[c]
            row[f"{c}_mib"] = fmt_mib(t[c])
        rows.append(row)
    return rows


def cmd_footprint(cfg: RunConfig) -> str:
    return render(footprint_rows(cfg), cfg.format)


# -- hist --------------------------------------------------------------------


def hist_rows(cfg: RunConfig):
    spec = cfg.model_spec()
    model = spec.build(cfg.seed)
    if cfg.epochs:
        x, y, xt, yt = _load_data(cfg, spec)
        train(model, x, y, DENSE, cfg.epochs, spec.batch_size, cfg.lr, cfg.seed, xt, yt)
        probe = xt[: spec.batch_size] if len(xt) >= 2 else x[: spec.batch_size]
    else:
        probe = synthetic_input(cfg.seed, (spec.batch_size,) + spec.input_shape)
    edges = cfg.bins if cfg.bins else analyzer.DEFAULT_BIN_EDGES
    h = analyzer.activation_histogram(model, probe, edges)
    rows, cum = [], 0
    for k, c in enumerate(h.counts):
        cum += c
        hi = h.edges[k + 1] if k + 1 < len(h.edges) else math.inf
        rows.append({"bin_lo": repr(h.edges[k]), "bin_hi": repr(hi), "count": c,
                     "fraction": f"{c / h.total:.6f}", "cum_fraction": f"{cum / h.total:.6f}"})
    return rows


def cmd_hist(cfg: RunConfig) -> str:
    return render(hist_rows(cfg), cfg.format)


# -- opcount -----------------------------------------------------------------


def opcount_rows(cfg: RunConfig):
    spec = cfg.model_spec()
    base = analyzer.op_counts(spec, 1)
    rows = []
    for m in cfg.checkpoint_m or [1, 2, 4, 8]:
        c = analyzer.op_counts(spec, m)
        rows.append({
            "checkpoint_m": m,
            "stored_layers": c.stored_layers,
            "forward_macs": c.forward_macs,
            "recompute_macs": c.recompute_macs,
            "bitmap_codec_elements": base.codec_elements,
            "bitmap_codec_bytes": 4 * base.codec_elements,
            "recompute_macs_per_codec_element": f"{c.recompute_macs / base.codec_elements:.4f}",
        })
    return rows


def cmd_opcount(cfg: RunConfig) -> str:
    return render(opcount_rows(cfg), cfg.format)


# -- dump / inspect ----------------------------------------------------------


def cmd_dump(cfg: RunConfig) -> str:
    """Write every bitmap stash of one forward pass to ``--out`` DIR as .btsh records."""
    if not cfg.out:
        raise InvalidInputError("dump needs --out DIR")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec()
    model = spec.build(cfg.seed)
    policy = StashPolicy(StashFormat.BITMAP, cfg.thresholds[0], Precision(cfg.precision))
    model.forward(synthetic_input(cfg.seed, (spec.batch_size,) + spec.input_shape), policy)
    rows = []
    for h in model.pending_handles():
        path = out / f"layer_{h.layer_id:03d}.btsh"
        write_bytes(to_bytes(h.payload), path)
        rows.append({"layer_id": h.layer_id, "file": path.name, "nnz": h.payload.nnz,
                     "elements": h.payload.n, "bytes": h.charged_bytes})
    cfg.out = None  # the table goes to stdout
    return render(rows, cfg.format)


def cmd_inspect(cfg: RunConfig) -> str:
    try:
        data = Path(cfg.file).read_bytes()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {cfg.file}: {exc.strerror}") from None
    b = from_bytes(data)
    return render([{"shape": "x".join(map(str, b.shape)), "precision": b.precision.value,
                    "elements": b.n, "nnz": b.nnz, "density": f"{b.nnz / b.n:.6f}",
                    "bytes": b.nbytes, "mib": fmt_mib(b.nbytes)}], cfg.format)


COMMANDS = {
    "bench": cmd_bench,
    "train": cmd_train,
    "footprint": cmd_footprint,
    "hist": cmd_hist,
    "opcount": cmd_opcount,
    "dump": cmd_dump,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", default="desknet", help="model-spec JSON path or a bundled spec name")
    common.add_argument("--policy", choices=["dense", "bitmap"], default="dense")
    common.add_argument("--threshold", type=float, nargs="+", default=[0.0], dest="thresholds",
                        help="prune threshold(s); several values run a sweep")
    common.add_argument("--precision", choices=["fp32", "fp16"], default="fp32")
    common.add_argument("--checkpoint-m", type=int, nargs="+", default=[], dest="checkpoint_m")
    common.add_argument("--relu-mask-only", action="store_true")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--batch", type=int, default=None)
    common.add_argument("--lr", type=float, default=0.01)
    common.add_argument("--samples", type=int, default=512)
    common.add_argument("--out", default=None)
    common.add_argument("--format", choices=["csv", "md"], default="csv")
    common.add_argument("--data-idx", nargs="+", default=[], metavar="PATH",
                        help="IDX images file and IDX labels file")

    p = argparse.ArgumentParser(prog="bitstash", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("bench", parents=[common], help="reproduce the theoretical footprint table")
    t = sub.add_parser("train", parents=[common], help="desk-scale training run(s)")
    t.add_argument("--save-weights", default=None)
    f = sub.add_parser("footprint", parents=[common], help="per-layer activation footprint")
    f.add_argument("--sparsity", choices=["assumed", "live"], default="live")
    f.add_argument("--compare", action="store_true", help="compare stash strategies instead")
    h = sub.add_parser("hist", parents=[common], help="activation magnitude histogram")
    h.add_argument("--bins", type=float, nargs="+", default=None)
    sub.add_parser("opcount", parents=[common], help="recompute MACs vs bitmap codec traffic")
    sub.add_parser("dump", parents=[common], help="write bitmap stashes of one forward pass")
    i = sub.add_parser("inspect", parents=[common], help="summarize a .btsh record")
    i.add_argument("file")
    return p


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    if args["epochs"] is None:
        args["epochs"] = 0 if args["subcommand"] == "hist" else 5
    try:
        cfg = RunConfig(**args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OutOfBandWarning)
            text = COMMANDS[cfg.subcommand](cfg)
        for w in caught:
            print(f"bitstash: warning: {w.message}", file=sys.stderr)
        write_output(text, cfg.out)
    except (BitstashError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bitstash: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
