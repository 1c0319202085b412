"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel timings on desk-scale shapes, then the wall time of one
training step (forward, loss, backward) under each backend. The step timing
runs in a subprocess because the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixbalance import _kernels_py

try:
    from mixbalance import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

STEP_SNIPPET = """
import time, numpy as np
from mixbalance.backbone import BackboneConfig, build_backbone
from mixbalance.kernels import BACKEND
from mixbalance.losses import training_loss
from mixbalance.tensor import Tensor, backward
net, _ = build_backbone(BackboneConfig(base_channels=8, input_size=16), 0)
rng = np.random.default_rng(0)
x = Tensor(rng.random((32, 1, 16, 16)).astype(np.float32))
y = rng.integers(0, 4, 32)
def step():
    net.zero_grad()
    backward(training_loss(net.features(x), net.head, y, None, "cucn", rng))
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print(BACKEND, (time.perf_counter() - t) / {repeat})
"""


def cases(rng):
    # (label, fn name, args) on the shapes a base-8 net sees on 16x16 inputs, batch 32
    xp = np.ascontiguousarray(rng.normal(size=(32, 16, 18, 18)).astype(np.float32))
    cols = np.ascontiguousarray(rng.normal(size=(16 * 9, 32 * 16 * 16)).astype(np.float32))
    pool = np.ascontiguousarray(rng.normal(size=(32, 16, 16, 16)).astype(np.float32))
    return [
        ("im2col 3x3", "im2col", (xp, 3, 1, 16, 16)),
        ("col2im 3x3", "col2im", (cols, 32, 16, 18, 18, 3, 1, 16, 16)),
        ("maxpool 2x2", "maxpool_forward", (pool, 2, 2, 8, 8)),
        ("avgpool 2x2", "avgpool_forward", (pool, 2, 2, 8, 8)),
    ]


def time_call(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def step_time(pure: bool, repeat: int) -> str:
    env = dict(os.environ, MIXBALANCE_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True)
    backend, seconds = out.stdout.split()
    return f"{backend:<7} {float(seconds) * 1e3:8.1f} ms/step"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'kernel':<14}{'numpy':>12}{'cython':>12}{'speedup':>10}")
    for label, name, call_args in cases(rng):
        t_py = time_call(getattr(_kernels_py, name), call_args, args.repeat)
        if _kernels_c is None:
            print(f"{label:<14}{t_py * 1e3:10.2f}ms{'n/a':>12}")
            continue
        t_c = time_call(getattr(_kernels_c, name), call_args, args.repeat)
        print(f"{label:<14}{t_py * 1e3:10.2f}ms{t_c * 1e3:10.2f}ms{t_py / t_c:9.1f}x")

    print("\ntraining step (base 8, 16x16, batch 32, cbam on, cucn loss)")
    print(step_time(pure=True, repeat=max(3, args.repeat // 4)))
    if _kernels_c is not None:
        print(step_time(pure=False, repeat=max(3, args.repeat // 4)))


if __name__ == "__main__":
    main()
