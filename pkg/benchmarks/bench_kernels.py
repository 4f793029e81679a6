"""Compare the compiled wkv kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--T 4096] [--d 64] [--repeat 5] [--csv out.csv]

Times forward, forward+backward and the matrix-state forward for each
backend, checks the outputs agree, and prints one row per (kernel, backend).
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from linvid import _wkv_py

try:
    from linvid import _wkv_ext
except ImportError:
    _wkv_ext = None

P_EMPTY = -1e38


def cases(T, d, heads, rng):
    k = rng.normal(0, 2, (T, d))
    v = rng.normal(size=(T, d))
    w = rng.uniform(0.05, 2, d)
    u = rng.normal(size=d)
    z = np.zeros(d)
    p = np.full(d, P_EMPTY)
    gy = rng.normal(size=(T, d))
    N = d // heads
    r3 = rng.normal(size=(T, heads, N))
    k3 = rng.normal(size=(T, heads, N)) * 0.3
    v3 = rng.normal(size=(T, heads, N))
    S = np.zeros((heads, N, N))

    def fwd(m):
        return m.wkv_forward(k, v, w, u, z, z, p)[0]

    def fwd_bwd(m):
        out, _, _, _, saved = m.wkv_forward(k, v, w, u, z, z, p, save=True)
        return m.wkv_backward(k, v, w, u, saved, out, gy)[0]

    def matrix(m):
        return m.wkv_matrix_forward(r3, k3, v3, w.reshape(heads, N), u.reshape(heads, N), S)[0]

    return {"forward": fwd, "forward+backward": fwd_bwd, "matrix-forward": matrix}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=4096)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if args.d % args.heads:
        ap.error("--heads must divide --d")
    backends = {"python": _wkv_py}
    if _wkv_ext is not None:
        backends["cython"] = _wkv_ext
    else:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)

    rows = []
    for name, fn in cases(args.T, args.d, args.heads, np.random.default_rng(0)).items():
        ref = fn(_wkv_py)
        for bname, mod in backends.items():
            out = fn(mod)
            err = float(np.max(np.abs(out - ref)) / max(np.max(np.abs(ref)), 1e-300))
            best = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            rows.append({"kernel": name, "backend": bname, "T": args.T, "d": args.d, "seconds": best,
                         "ns_per_token_channel": best / (args.T * args.d) * 1e9, "rel_err_vs_python": err})

    print(f"{'kernel':<18}{'backend':<9}{'seconds':>11}{'ns/(t*c)':>11}{'speedup':>9}{'rel err':>10}")
    base = {r["kernel"]: r["seconds"] for r in rows if r["backend"] == "python"}
    for r in rows:
        print(f"{r['kernel']:<18}{r['backend']:<9}{r['seconds']:>11.5f}{r['ns_per_token_channel']:>11.1f}"
              f"{base[r['kernel']] / r['seconds']:>8.1f}x{r['rel_err_vs_python']:>10.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
