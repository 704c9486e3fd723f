"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one training step of a small model under each backend
(the backend is chosen at import, so that part runs in subprocesses).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from changeseg import _kernels as K
from changeseg.tensor import Rng


def cases(rng):
    xp = rng.normal((4, 32, 34, 34))
    cols = rng.normal((4 * 32 * 32, 32 * 9))
    w = rng.normal((32, 1, 7, 7))
    xdw = rng.normal((4, 32, 38, 38))
    gout = rng.normal((4, 32, 32, 32))
    gt = (rng.random((65536,)) < 0.3).astype(np.float64)
    pred, lab = rng.integers(0, 7, size=(8, 64, 64)), rng.integers(0, 7, size=(8, 64, 64))
    return {
        "im2col 4x32x34x34 k3": ("im2col", (xp, 3, 3, 1, 32, 32)),
        "col2im 4x32x34x34 k3": ("col2im", (cols, 4, 32, 34, 34, 3, 3, 1, 32, 32)),
        "dwconv fwd 4x32x32x32 k7": ("dwconv_fwd", (xdw, w, 1, 32, 32)),
        "dwconv bwd 4x32x32x32 k7": ("dwconv_bwd", (xdw, w, gout, 1)),
        "lovasz grad 65536 px": ("lovasz_grad", (gt,)),
        "confusion 8x64x64 K=6": ("confusion", (pred, lab, 7)),
    }


STEP = """
import time
from changeseg.config import Config
from changeseg.data import synth_sample
from changeseg.tensor import Rng
from changeseg.train import build_model, train
cfg = Config()
cfg.decoder.num_classes = 4
cfg.train.epochs = 1
cfg.train.max_steps = {steps}
samples = [synth_sample(64, 3, Rng(i), str(i)) for i in range(4)]
train(build_model(cfg), samples, cfg)  # warm-up (jit compile)
t = time.perf_counter()
train(build_model(cfg), samples, cfg)
print((time.perf_counter() - t) / {steps})
"""


def step_time(backend, steps):
    env = dict(os.environ, MCDS_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", STEP.format(steps=steps)], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3, help="training steps timed per backend (0 skips)")
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = Rng(0)
    print(f"{'kernel':<28} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for label, (name, call_args) in cases(rng).items():
        fa, fb = K.get(name, "numba"), K.get(name, "numpy")
        fa(*call_args)  # compile
        ta = min(timeit.repeat(lambda: fa(*call_args), number=1, repeat=args.repeat)) * 1e3
        tb = min(timeit.repeat(lambda: fb(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<28} {ta:>10.3f} {tb:>10.3f} {tb / ta:>7.1f}x")
    if args.steps:
        a, b = step_time("numba", args.steps), step_time("numpy", args.steps)
        print(f"{'train step, desk model 64px':<28} {a * 1e3:>10.0f} {b * 1e3:>10.0f} {b / a:>7.1f}x")


if __name__ == "__main__":
    main()
