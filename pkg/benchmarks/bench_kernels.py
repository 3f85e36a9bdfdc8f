"""Compare the compiled pooling kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the pipeline defaults: 5000-token vocabulary, 64-wide
embeddings, batches of 32 or 64 sequences of 24-512 tokens.
"""

import argparse
import timeit

import numpy as np

from duet import _kernels_py

try:
    from duet import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

CASES = [  # (batch, min_len, max_len)
    (32, 24, 48),
    (64, 24, 48),
    (64, 200, 512),
]


def make_inputs(rng, batch, lo, hi, vocab=5000, dim=64):
    lengths = rng.integers(lo, hi + 1, size=batch)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    ids = rng.integers(1, vocab, size=int(offsets[-1])).astype(np.int64)
    emb = rng.normal(size=(vocab, dim))
    grad = rng.normal(size=(batch, dim))
    return emb, ids, offsets, grad


def best_of(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    if _kernels_c is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'op':<9}{'batch':>6}{'tokens':>8}" + "".join(f"{name + ' us':>12}" for name, _ in backends)
          + ("   speedup" if len(backends) == 2 else ""))
    for batch, lo, hi in CASES:
        emb, ids, offsets, grad = make_inputs(rng, batch, lo, hi)
        ref = _kernels_py.pool_forward(emb, ids, offsets)
        for op in ("forward", "backward"):
            times = []
            for _, mod in backends:
                if op == "forward":
                    out = mod.pool_forward(emb, ids, offsets)
                    assert np.array_equal(out, ref), "backends disagree"
                    times.append(best_of(lambda m=mod: m.pool_forward(emb, ids, offsets), args.repeat))
                else:
                    g = np.zeros_like(emb)
                    times.append(best_of(lambda m=mod: m.pool_backward(grad, ids, offsets, g), args.repeat))
            row = f"{op:<9}{batch:>6}{ids.size:>8}" + "".join(f"{t * 1e6:>12.1f}" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
