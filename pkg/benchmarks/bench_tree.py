"""Time the compiled CART kernels against the numpy fallback.

    python benchmarks/bench_tree.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from treereg.tree import _pytree

try:
    from treereg.tree import _ctree
except ImportError:
    _ctree = None


def workloads(rng):
    # sizes of the two synthetic tasks, plus a larger continuous problem
    Xb = (rng.random((3500, 14)) < 0.5).astype(float)
    yb = ((Xb[:, 0] == 1) & (rng.random(3500) < 0.4)).astype(np.uint8)
    Xp = rng.random((350, 2))
    yp = (Xp[:, 1] > 5 * (Xp[:, 0] - 0.5) ** 2 + 0.4).astype(np.uint8)
    Xc = rng.random((20000, 10))
    yc = ((Xc[:, 0] + Xc[:, 1] ** 2 + 0.2 * rng.random(20000)) > 0.9).astype(np.uint8)
    return {"signal-noise 3500x14 binary, leaf>=25": (Xb, yb, 25),
            "parabola 350x2, leaf>=1": (Xp, yp, 1),
            "continuous 20000x10, leaf>=5": (Xc, yc, 5)}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _pytree}
    if _ctree is not None:
        backends["cython"] = _ctree
    else:
        print("compiled kernels not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'workload':40s} {'kernel':8s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup")
    for name, (X, y, leaf) in workloads(rng).items():
        arrays = _pytree.build_tree(X, y, leaf)
        for kernel in ("build", "apply"):
            res = {}
            for b, mod in backends.items():
                if kernel == "build":
                    res[b] = best_of(lambda: mod.build_tree(X, y, leaf), args.repeat)
                else:
                    res[b] = best_of(lambda: mod.apply_tree(X, *arrays[:4]), args.repeat)
            speed = f"{res['python'] / res['cython']:8.1f}x" if "cython" in res else ""
            print(f"{name:40s} {kernel:8s} " + " ".join(f"{res[b] * 1e3:8.2f}ms" for b in backends) + speed)


if __name__ == "__main__":
    main()
