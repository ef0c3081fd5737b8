"""Time the compiled and pure-Python edit-distance kernels on the same inputs.

    python3 benchmarks/bench_kernels.py --pairs 300 --length 40
"""

import argparse
import timeit

import numpy as np

from spanrewrite import _kernels_py as pure

try:
    from spanrewrite import _kernels as compiled
except ImportError:
    compiled = None


def make_pairs(n, length, vocab, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        a = rng.integers(0, vocab, length).tolist()
        b = list(a)
        # light corruption keeps the pairs close, like source/hypothesis pairs
        for _ in range(max(1, length // 8)):
            b[int(rng.integers(len(b)))] = int(rng.integers(vocab))
        pairs.append((a, b))
    return pairs


def bench(mod, fn, pairs, repeat):
    f = getattr(mod, fn)
    run = lambda: [f(a, b) for a, b in pairs]
    return min(timeit.repeat(run, number=1, repeat=repeat)) / len(pairs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=300)
    ap.add_argument("--length", type=int, nargs="+", default=[16, 40, 120])
    ap.add_argument("--vocab", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<12} {'length':>6} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for length in args.length:
        pairs = make_pairs(args.pairs, length, args.vocab, args.seed)
        for fn in ("levenshtein", "edit_ops", "lcs_length"):
            # both backends must agree before their timings mean anything
            assert [getattr(pure, fn)(a, b) for a, b in pairs[:20]] == [getattr(compiled, fn)(a, b) for a, b in pairs[:20]]
            t_py = bench(pure, fn, pairs, args.repeat)
            t_cy = bench(compiled, fn, pairs, args.repeat)
            print(f"{fn:<12} {length:>6} {t_py * 1e6:>10.1f} {t_cy * 1e6:>10.1f} {t_py / t_cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
