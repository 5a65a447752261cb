"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``[PASS]``/``[FAIL] criterion N: ...`` line that the
conftest hook prints in the terminal summary, then asserts.
"""

import csv
import time
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from bitstash.analyzer import FP16_BAND, LiveForward, fp16_band_check, policy_peak
from bitstash.bitmap import (
    IndexWidth,
    Precision,
    compress,
    decompress,
    footprint_bitmap,
    footprint_coo,
    footprint_dense,
)
from bitstash.cli import bench_rows, synth_activation
from bitstash.engine import (
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    central_difference,
    finite_difference_grad,
    softmax_cross_entropy,
)
from bitstash.errors import OutOfBandWarning
from bitstash.stash import BITMAP, DENSE, MemoryLedger, StashFormat, StashPolicy, stash_store
from bitstash.training import flat_parameters, train

from conftest import ACCEPTANCE_LINES, bits

DATA = Path(__file__).parent / "data"
FD_CASES = 100
THRESHOLDS = (0.0, 0.01, 0.05, 0.1)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def grads_of(model, x, y, policy):
    logits = model.forward(x, policy, MemoryLedger())
    _, g = softmax_cross_entropy(logits, y)
    return model.backward(g)


def same_grads(a, b):
    if bits(a.input) != bits(b.input):
        return False
    return all(bits(p) == bits(q) for (_, _, p), (_, _, q) in zip(a.flat(), b.flat()))


@pytest.fixture(scope="module")
def runs(desknet_spec, synthetic_data):
    """Five-epoch desknet runs, shared by the criteria that need trained models."""
    x, y, xt, yt = synthetic_data
    policies = {"dense": DENSE}
    for t in THRESHOLDS:
        policies[t] = StashPolicy(StashFormat.BITMAP, t)
    return {k: train(desknet_spec.build(0), x, y, p, 5, desknet_spec.batch_size, 0.01, 0, xt, yt)
            for k, p in policies.items()}


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_footprint_table():
    with open(DATA / "footprint_table.csv") as fh:
        expected = {(int(r["channels"]), r["pct_nonzero"]): r for r in csv.DictReader(fh)}
    t0 = time.perf_counter()
    rows = bench_rows()
    elapsed = time.perf_counter() - t0
    mismatches = []
    for r in rows:
        e = expected[(r["channels"], r["pct_nonzero"])]
        for col in ("dense_mib", "bitmap_mib", "improvement_pct"):
            if r[col] != e[col]:
                mismatches.append((r["channels"], r["pct_nonzero"], col, r[col], e[col]))
    ok = len(rows) == 30 and len(expected) == 30 and not mismatches and elapsed < 10
    record(1, ok, f"footprint table: {30 * 3 - len(mismatches)}/90 cells match, {elapsed:.2f}s"
                  + (f", first mismatch {mismatches[0]}" if mismatches else ""))


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_lossless_roundtrip():
    rng = np.random.Generator(np.random.PCG64(20_000))
    failures = 0
    for _ in range(10_000):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=rng.integers(1, 5)))
        x = rng.standard_normal(shape).astype(np.float32)
        x[rng.random(shape) >= rng.random()] = 0  # density uniform in [0, 1]
        if bits(decompress(compress(x))) != bits(x):
            failures += 1
    record(2, failures == 0, f"lossless roundtrip: {failures} failures in 10000 seeded tensors")


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_gradient_safety(desknet_spec, synthetic_data, runs):
    x, y, _, _ = synthetic_data
    kinds = {ls.kind for ls in desknet_spec.layers}
    differing = 0
    for k in range(20):
        idx = np.random.default_rng(k).choice(len(x), desknet_spec.batch_size, replace=False)
        model = desknet_spec.build(seed=k)
        dense = grads_of(model, x[idx], y[idx], DENSE)
        bitmap = grads_of(model, x[idx], y[idx], BITMAP)
        differing += not same_grads(dense, bitmap)
    params_equal = (flat_parameters(runs["dense"].model).tobytes()
                    == flat_parameters(runs[0.0].model).tobytes())
    ok = differing == 0 and params_equal and kinds >= {"conv2d", "relu", "maxpool2d", "batchnorm2d", "linear"}
    record(3, ok, f"gradient safety: {20 - differing}/20 configurations bit-identical, "
                  f"5-epoch parameters {'identical' if params_equal else 'DIFFER'}")


# -- 4 -----------------------------------------------------------------------


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def away_from_zero(rng, shape, margin=0.01):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def conv_case(rng):
    k, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(k, k + 4, size=2))
    layer = Conv2d(cin, cout, k, stride, pad)
    model = Network([layer], seed=int(rng.integers(2**32)), dtype=np.float64)
    layer.params["bias"] = rng.standard_normal(cout)
    return model, rng.standard_normal((int(rng.integers(1, 3)), cin, h, w))


def relu_case(rng):
    return Network([ReLU()], dtype=np.float64), away_from_zero(rng, (2, 3, 4))


def maxpool_case(rng):
    layer = MaxPool2d(2) if rng.random() < 0.5 else MaxPool2d((2, 3), stride=1)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 4, 5)
    n = int(np.prod(shape))
    # distinct values 0.01 apart: no window has a near-tie within the FD step
    x = (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)
    return Network([layer], dtype=np.float64), x


def batchnorm_case(rng):
    c = int(rng.integers(1, 4))
    layer = BatchNorm2d(c, double_mask=bool(rng.random() < 0.5))
    model = Network([layer], dtype=np.float64)
    layer.params["gamma"] = rng.uniform(0.5, 2.0, c)
    layer.params["beta"] = rng.standard_normal(c)
    shape = (int(rng.integers(2, 5)), c, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    return model, away_from_zero(rng, shape) * 2 + 1


def linear_case(rng):
    fin, fout = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    layer = Linear(fin, fout)
    model = Network([layer], seed=int(rng.integers(2**32)), dtype=np.float64)
    layer.params["bias"] = rng.standard_normal(fout)
    return model, rng.standard_normal((int(rng.integers(1, 4)), fin))


def fd_worst(model, x, rng):
    w = rng.standard_normal(model.output_shape(x.shape))
    model.forward(x, DENSE)
    g = model.backward(w)
    worst = rel_err(g.input, finite_difference_grad(model, x, "input", weights=w))
    for i, name, arr in g.flat():
        worst = max(worst, rel_err(arr, finite_difference_grad(model, x, (i, name), weights=w)))
    return worst


def test_criterion_4_finite_differences():
    rng = np.random.Generator(np.random.PCG64(4))
    worst = {}
    for name, make in [("conv", conv_case), ("relu", relu_case), ("maxpool", maxpool_case),
                       ("batchnorm", batchnorm_case), ("linear", linear_case)]:
        worst[name] = max(fd_worst(*make(rng), rng) for _ in range(FD_CASES))
    ce = 0.0
    for _ in range(FD_CASES):
        b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        logits, labels = rng.standard_normal((b, k)) * 3, rng.integers(0, k, b)
        _, g = softmax_cross_entropy(logits, labels)
        ce = max(ce, rel_err(g, central_difference(lambda: softmax_cross_entropy(logits, labels)[0], logits)))
    ok = all(v < 1e-4 for v in worst.values()) and ce < 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(4, ok, f"finite differences over {FD_CASES} cases per layer, worst rel err: {detail}, "
                  f"softmax-CE {ce:.1e}")


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_checkpoint_equivalence(desknet_spec, synthetic_data):
    x, y, _, _ = synthetic_data
    xb, yb = x[:desknet_spec.batch_size], y[:desknet_spec.batch_size]
    equal = True
    peaks = {}
    for fmt in (StashFormat.DENSE, StashFormat.BITMAP):
        model = desknet_spec.build(0)
        ref = grads_of(model, xb, yb, StashPolicy(fmt))
        for m in (1, 2, 4):
            policy = StashPolicy(fmt, checkpoint_every_m=m)
            led = MemoryLedger()
            logits = model.forward(xb, policy, led)
            got = model.backward(softmax_cross_entropy(logits, yb)[1])
            equal &= same_grads(got, ref)
            peaks[fmt, m] = led.peak_bytes
    dense = [peaks[StashFormat.DENSE, m] for m in (1, 2, 4)]
    bitmap = [peaks[StashFormat.BITMAP, m] for m in (1, 2, 4)]
    decreasing = dense[0] > dense[1] > dense[2] and bitmap[0] > bitmap[1] > bitmap[2]
    combined = all(b < d for b, d in zip(bitmap, dense))
    record(5, equal and decreasing and combined,
           f"checkpointing: gradients {'identical' if equal else 'DIFFER'} for m=1,2,4; "
           f"dense peaks {dense}, bitmap peaks {bitmap}")


# -- 6 -----------------------------------------------------------------------


def brute_bitmap_bytes(x):
    b = compress(x)
    return b.bitmap.nbytes + b.values.nbytes


def brute_coo_bytes(x, index_dtype):
    idx = np.stack(np.nonzero(x)).astype(index_dtype)
    return idx.nbytes + x[x != 0].nbytes


def test_criterion_6_break_even_laws():
    failures = []
    for n in (8, 64, 1024, 401_408):
        dense = footprint_dense(n)
        for d in (Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4), Fraction(1)):
            bm = footprint_bitmap(int(d * n), n)
            if Fraction(100 * (dense - bm), dense) != 100 * (Fraction(31, 32) - d):
                failures.append(("improvement", n, d))
    # 4-D COO with 32-bit indices costs (4 + 16) bytes per non-zero: equal to dense at density 1/5
    for n in (5, 100, 1000):
        if footprint_coo(n // 5, 4, IndexWidth.INT32) != footprint_dense(n):
            failures.append(("coo crossing", n))
    rng = np.random.Generator(np.random.PCG64(6))
    cases = 0
    for n in range(1, 257):
        for nnz in sorted({0, 1, n // 5, n // 5 + 1, n // 2, n} & set(range(n + 1))):
            x = np.zeros((n, 1, 1, 1), np.float32)
            x.reshape(-1)[rng.permutation(n)[:nnz]] = 1.0
            cases += 1
            if brute_bitmap_bytes(x) != footprint_bitmap(nnz, n):
                failures.append(("bitmap bytes", n, nnz))
            coo = brute_coo_bytes(x, np.int32)
            if coo != footprint_coo(nnz, 4, IndexWidth.INT32):
                failures.append(("coo bytes", n, nnz))
            if (coo <= 4 * n) != (5 * nnz <= n):
                failures.append(("coo vs dense", n, nnz))
            saved = Fraction(100 * (4 * n - brute_bitmap_bytes(x)), 4 * n)
            if n % 8 == 0 and saved != 100 * (Fraction(31, 32) - Fraction(nnz, n)):
                failures.append(("bitmap pct", n, nnz))
    record(6, not failures, f"break-even laws: {len(failures)} violations "
                            f"(formula checks plus {cases} brute-force byte counts)")


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_pruning_tradeoff(runs):
    peaks = [runs[t].peak_stash_bytes for t in THRESHOLDS]
    accs = [runs[t].final_accuracy for t in THRESHOLDS]
    non_increasing = all(a >= b for a, b in zip(peaks, peaks[1:]))
    close = all(abs(a - accs[0]) <= 0.10 for a in accs)
    record(7, non_increasing and close,
           f"pruning sweep t={list(THRESHOLDS)}: peaks {peaks}, accuracies {[round(a, 4) for a in accs]}")


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_fp16_combination(desknet_spec, synthetic_data, runs):
    rng = np.random.Generator(np.random.PCG64(8))
    policy = StashPolicy(StashFormat.BITMAP, value_precision=Precision.FP16)
    exact = True
    for n in (8, 256, 4096, 802_816):
        for d in (Fraction(0), Fraction(1, 4), Fraction(3, 8), Fraction(1, 2), Fraction(1)):
            x = synth_activation((n,), float(d), rng)
            h = stash_store(None, policy, 0, x)
            exact &= Fraction(h.charged_bytes) == n * (2 * d + Fraction(1, 8))
    # exact saving at d = 1/2 and d = 1/4 bounds the interval over [1/4, 1/2]
    lo, hi = (1 - (2 * d + Fraction(1, 8)) / 4 for d in (Fraction(1, 2), Fraction(1, 4)))
    overlap = lo <= FP16_BAND[1] and FP16_BAND[0] <= hi
    _, _, xt, _ = synthetic_data
    source = LiveForward(model=runs["dense"].model, x=xt[:desknet_spec.batch_size])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", OutOfBandWarning)
        check = fp16_band_check(desknet_spec, source)
    warned = any(issubclass(w.category, OutOfBandWarning) for w in caught)
    desk_ok = (check.in_band or warned) and (check.in_band or not check.density_in_scope)
    record(8, exact and overlap and desk_ok,
           f"fp16 bitmap: n(2d+1/8) {'exact' if exact else 'MISMATCH'}, saving over d in [0.25, 0.5] "
           f"is [{float(lo):.4f}, {float(hi):.4f}]; desknet density {check.density:.4f} saving "
           f"{check.saving:.4f} {'in band' if check.in_band else 'OUT OF BAND (warned)'}")


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_ledger_conservation(desknet_spec, synthetic_data, runs):
    x, y, _, _ = synthetic_data
    residual = max(e.residual_bytes for r in runs.values() for e in r.epochs)
    policies = [DENSE, BITMAP,
                StashPolicy(StashFormat.BITMAP, 0.05, Precision.FP16),
                StashPolicy(checkpoint_every_m=2),
                StashPolicy(StashFormat.BITMAP, checkpoint_every_m=4),
                StashPolicy(StashFormat.BITMAP, 0.1, Precision.FP16, 8, relu_mask_only=True)]
    mismatched = []
    model = runs["dense"].model
    for k, policy in enumerate(policies):
        xb = x[k * 32:(k + 1) * 32]
        predicted = policy_peak(desknet_spec, policy, LiveForward(model=model, x=xb))
        led = MemoryLedger()
        logits = model.forward(xb, policy, led)
        model.backward(softmax_cross_entropy(logits, y[k * 32:(k + 1) * 32])[1], led)
        residual = max(residual, led.live_bytes)
        if led.peak_bytes != predicted:
            mismatched.append((policy.label, led.peak_bytes, predicted))
    dense_assumed = policy_peak(desknet_spec, DENSE)
    if dense_assumed != runs["dense"].peak_stash_bytes:
        mismatched.append(("dense analytic", runs["dense"].peak_stash_bytes, dense_assumed))
    record(9, residual == 0 and not mismatched,
           f"ledger: max live bytes after backward {residual}; {len(policies) + 1 - len(mismatched)}/"
           f"{len(policies) + 1} peaks equal the analyzer prediction")
