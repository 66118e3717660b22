"""Time the numba and pure-numpy paths of every hot kernel.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json] [--train-steps 20]

Both paths are imported side by side, so ``ACMNET_NUMBA`` does not need to
be toggled. The numba functions are called once before timing to exclude
compilation.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from acmnet import _kernels as K


def cases(rng):
    x = rng.random((96, 16, 32, 32), dtype=np.float32)
    cols = K.im2col_numpy(x, 3, 2, 1)
    img = rng.random((3, 64, 64))
    grid_r, grid_c = np.meshgrid(np.linspace(-3, 66, 64), np.linspace(-3, 66, 64), indexing="ij")
    ranked = rng.integers(0, 1000, size=(1000, 10))
    gt = rng.integers(0, 1000, size=1000)
    return {
        "im2col (96,16,32,32) k3 s2": (K.im2col_numba, K.im2col_numpy, (x, 3, 2, 1)),
        "col2im (96,16,32,32) k3 s2": (K.col2im_numba, K.col2im_numpy, (cols, x.shape, 3, 2, 1)),
        "filter2d 3x64x64 box3": (K.filter2d_numba, K.filter2d_numpy, (img, np.full((3, 3), 1 / 9))),
        "filter2d 3x64x64 line5": (K.filter2d_numba, K.filter2d_numpy, (img, np.eye(5) / 5)),
        "bilinear_sample 3x64x64": (K.bilinear_sample_numba, K.bilinear_sample_numpy,
                                    (img, grid_r, grid_c)),
        "first_hit_rank 1000x10": (K.first_hit_rank_numba, K.first_hit_rank_numpy,
                                   (ranked, gt, 2)),
    }


def run(repeat):
    rows = []
    for name, (fast, ref, args) in cases(np.random.default_rng(0)).items():
        a, b = fast(*args), ref(*args)
        assert np.allclose(a, b), name
        t_numba = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        t_numpy = min(timeit.repeat(lambda: ref(*args), number=1, repeat=repeat))
        rows.append({"kernel": name, "numba_ms": t_numba * 1e3, "numpy_ms": t_numpy * 1e3,
                     "speedup": t_numpy / t_numba})
    return rows


_TRAIN_SNIPPET = """
import time
from acmnet import _kernels
from acmnet.datagen import PRESET_CONDITIONS, generate_synthetic_traverse
from acmnet.model import ModelConfig
from acmnet.train import TrainConfig, train
ds = generate_synthetic_traverse(64, PRESET_CONDITIONS[:2], 64, 0)
train(ds, ModelConfig(), TrainConfig(max_steps=1))  # warm-up / JIT
t = time.perf_counter()
train(ds, ModelConfig(), TrainConfig(max_steps={steps}))
print(_kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def train_step_times(steps):
    """Seconds per desk-config training step under each backend, in fresh processes."""
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "ACMNET_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET.format(steps=steps)],
                             env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()[-2:]
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None, help="also write the table as JSON")
    ap.add_argument("--train-steps", type=int, default=0,
                    help="also time this many full training steps per backend")
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:32s} {r['numba_ms']:10.3f} {r['numpy_ms']:10.3f} {r['speedup']:7.2f}x")
    result = {"kernels": rows}
    if args.train_steps:
        steps = train_step_times(args.train_steps)
        result["train_step_s"] = steps
        print(f"train step: numba {steps['numba']:.3f} s, numpy {steps['numpy']:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1)


if __name__ == "__main__":
    main()
