"""Peak stash bytes and recompute cost of checkpoint-every-m, with and without bitmaps.

Peaks come from the ledger on one real forward/backward of the spec model;
MAC counts come from the analytic op counter.

    python scripts/checkpoint_sweep.py --m 1 2 4 8 --format md
"""

import argparse

from bitstash.analyzer import load_model_spec, op_counts
from bitstash.bitmap import Precision, fmt_mib, improvement_pct
from bitstash.data import SyntheticDataset
from bitstash.engine import softmax_cross_entropy
from bitstash.stash import MemoryLedger, StashFormat, StashPolicy
from bitstash.tables import render, write_output


def measured_peak(spec, policy, x, y, seed):
    model = spec.build(seed)
    ledger = MemoryLedger()
    logits = model.forward(x, policy, ledger)
    model.backward(softmax_cross_entropy(logits, y)[1], ledger)
    return ledger.peak_bytes


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default="desknet")
    p.add_argument("--m", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--out", default=None)
    args = p.parse_args()

    spec = load_model_spec(args.spec)
    classes = spec.layers[-1].output_shape[0]
    x, y = SyntheticDataset(args.seed, spec.batch_size, classes, spec.input_shape).generate("train")
    base = measured_peak(spec, StashPolicy(), x, y, args.seed)
    rows = []
    for m in args.m:
        counts = op_counts(spec, m)
        for fmt, prec in [(StashFormat.DENSE, Precision.FP32), (StashFormat.BITMAP, Precision.FP32),
                          (StashFormat.BITMAP, Precision.FP16)]:
            policy = StashPolicy(fmt, value_precision=prec, checkpoint_every_m=m)
            peak = measured_peak(spec, policy, x, y, args.seed)
            rows.append({
                "checkpoint_m": m,
                "policy": policy.label,
                "peak_stash_bytes": peak,
                "peak_stash_mib": fmt_mib(peak),
                "reduction_pct": f"{improvement_pct(base, peak):.2f}",
                "recompute_macs": counts.recompute_macs,
                "forward_macs": counts.forward_macs,
            })
    write_output(render(rows, args.format), args.out)


if __name__ == "__main__":
    main()
