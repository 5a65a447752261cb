"""Train desknet under a sweep of prune thresholds and tabulate memory vs accuracy.

    python scripts/pruning_sweep.py --thresholds 0 0.01 0.05 0.1 --out results/pruning.csv
"""

import argparse

from bitstash.analyzer import load_model_spec
from bitstash.bitmap import Precision, fmt_mib, improvement_pct
from bitstash.data import SyntheticDataset
from bitstash.stash import DENSE, StashFormat, StashPolicy
from bitstash.tables import render, write_output
from bitstash.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default="desknet")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.0, 0.01, 0.05, 0.1])
    p.add_argument("--precision", choices=["fp32", "fp16"], default="fp32")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--out", default=None)
    args = p.parse_args()

    spec = load_model_spec(args.spec)
    classes = spec.layers[-1].output_shape[0]
    ds = SyntheticDataset(args.seed, args.samples, classes, spec.input_shape)
    x, y = ds.generate("train")
    xt, yt = ds.generate("test")

    def run(policy):
        return train(spec.build(args.seed), x, y, policy, args.epochs, spec.batch_size, args.lr, args.seed, xt, yt)

    base = run(DENSE)
    rows = [{"policy": "dense fp32", "threshold": "", "peak_stash_mib": fmt_mib(base.peak_stash_bytes),
             "reduction_pct": "0.00", "final_accuracy": f"{base.final_accuracy:.4f}",
             "stash_density": f"{base.epochs[-1].stash_density:.4f}"}]
    for t in args.thresholds:
        r = run(StashPolicy(StashFormat.BITMAP, t, Precision(args.precision)))
        rows.append({
            "policy": r.policy.label,
            "threshold": repr(t),
            "peak_stash_mib": fmt_mib(r.peak_stash_bytes),
            "reduction_pct": f"{improvement_pct(base.peak_stash_bytes, r.peak_stash_bytes):.2f}",
            "final_accuracy": f"{r.final_accuracy:.4f}",
            "stash_density": f"{r.epochs[-1].stash_density:.4f}",
        })
    write_output(render(rows, args.format), args.out)


if __name__ == "__main__":
    main()
