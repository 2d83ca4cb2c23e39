"""Time the numba kernels against their numpy twins, then a full training step per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32] [--size 64]

Kernel timings run both implementations side by side in this process. The
training step is timed in two child processes, one with WT_NUMBA=0, because
the backend is fixed when wticket is imported.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from wticket import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up; also triggers JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, size, rng):
    c, k = 16, 3
    x = rng.standard_normal((batch, c, size + 2, size + 2)).astype(np.float32)
    cols = K.np_im2col(x, k, k, 1, size, size)
    pool_in = rng.standard_normal((batch, c, size, size)).astype(np.float32)
    _, idx = K.np_maxpool_fwd(pool_in, 2, 2, size // 2, size // 2)
    g = rng.standard_normal((batch, c, size // 2, size // 2)).astype(np.float32)
    img = rng.random((8, 8))
    return {
        "im2col": (lambda f: f(x, k, k, 1, size, size), "im2col"),
        "col2im": (lambda f: f(cols, batch, c, size + 2, size + 2, k, k, 1, size, size), "col2im"),
        "maxpool_fwd": (lambda f: f(pool_in, 2, 2, size // 2, size // 2), "maxpool_fwd"),
        "maxpool_bwd": (lambda f: f(g, idx, size, size), "maxpool_bwd"),
        "resize_bilinear": (lambda f: f(img, size, size), "resize_bilinear"),
    }


def bench_kernels(batch, size, repeat):
    if not K._HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (call, attr) in kernel_cases(batch, size, rng).items():
        t_np = best_of(lambda: call(getattr(K, f"np_{attr}")), repeat)
        t_nb = best_of(lambda: call(getattr(K, f"nb_{attr}")), repeat)
        print(f"{name:<16} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.2f}x")


STEP_SCRIPT = """
import json, sys, time
import numpy as np
from wticket import _kernels, autograd as ag
from wticket.models import build_model
arch, batch, size, repeat = sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
rng = np.random.default_rng(0)
x = rng.random((batch, 3, size, size)).astype(np.float32)
y = rng.integers(0, 2, batch)
model = build_model(arch, 0, (3, size, size)).train()
state = ag.AdamState(lr=1e-3)
def step():
    model.store.zero_grad()
    ag.backward(ag.softmax_cross_entropy(model(x), y))
    ag.adam_step(model.store, state)
step()
best = float("inf")
for _ in range(repeat):
    t0 = time.perf_counter()
    step()
    best = min(best, time.perf_counter() - t0)
print(json.dumps({"backend": _kernels.backend(), "seconds": best}))
"""


def bench_step(arch, batch, size, repeat):
    print(f"\ntraining step: {arch}, batch {batch}, {size}x{size}")
    for flag in ("0", "1"):
        env = dict(os.environ, WT_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT, arch, str(batch), str(size), str(repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        res = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"  WT_NUMBA={flag} ({res['backend']:<5}) {res['seconds'] * 1e3:9.2f} ms")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--arch", default="cnn5_desk")
    args = ap.parse_args(argv)
    print(f"active backend: {K.backend()}")
    bench_kernels(args.batch, args.size, args.repeat)
    bench_step(args.arch, args.batch, args.size, max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
