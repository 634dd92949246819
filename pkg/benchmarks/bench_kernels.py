"""Time the compiled and numpy kernel backends side by side.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time of each backend and
the speed-up, then the same for one classifier training step and the
11-level PSF bank (both with every kernel swapped to one backend).
"""

import argparse
import time
from contextlib import contextmanager

import numpy as np

from defocus_restore import kernels

KERNEL_NAMES = ["j0", "im2col3x3", "col2im3x3", "maxpool2x2_forward", "maxpool2x2_backward",
                "channel_moments", "bn_train_forward", "bn_backward"]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


@contextmanager
def backend(module):
    saved = {name: getattr(kernels, name) for name in KERNEL_NAMES}
    for name in KERNEL_NAMES:
        setattr(kernels, name, getattr(module, name))
    try:
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.random((32, 84, 84, 8), dtype=np.float32)
    cols = rng.random((32 * 84 * 84, 72), dtype=np.float32)
    y, idx = kernels.maxpool2x2_forward(x)
    mean, var = kernels.channel_moments(x)
    inv = 1.0 / np.sqrt(var + 1e-3)
    gamma = np.ones(8, np.float32)
    beta = np.zeros(8, np.float32)
    xhat, _ = kernels.bn_train_forward(x, mean, inv, gamma, beta)
    args = rng.uniform(0, 60, 1_000_000)
    return {
        "j0": lambda m: m.j0(args),
        "im2col3x3": lambda m: m.im2col3x3(x),
        "col2im3x3": lambda m: m.col2im3x3(cols, x.shape),
        "maxpool2x2_forward": lambda m: m.maxpool2x2_forward(x),
        "maxpool2x2_backward": lambda m: m.maxpool2x2_backward(y, idx, x.shape),
        "channel_moments": lambda m: m.channel_moments(x),
        "bn_train_forward": lambda m: m.bn_train_forward(x, mean, inv, gamma, beta),
        "bn_backward": lambda m: m.bn_backward(x, xhat, gamma, inv),
    }


def train_step_case():
    from defocus_restore.delpnet import Architecture, DelpNet, TrainConfig, train_step

    rng = np.random.default_rng(0)
    batch = rng.random((32, 1, 84, 84), dtype=np.float32)
    labels = np.arange(32) % 12
    cfg = TrainConfig(batch_size=32, learning_rate=1e-3)

    def run(_):
        model = DelpNet(Architecture().scaled(0.125), seed=0)
        train_step(model, batch, labels, cfg, 0)
        train_step(model, batch, labels, cfg, 1)
    return run


def psf_case():
    from defocus_restore import optics

    def run(_):
        optics._window_profiles.cache_clear()
        optics.build_kernel_bank()
    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-psf", action="store_true", help="skip the slow PSF bank timing")
    args = parser.parse_args()
    found = kernels.backends()
    names = [n for n in ("cython", "python") if n in found]
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(names)}")
    print(f"{'case':24s}" + "".join(f"{n:>12s}" for n in names) + ("     speed-up" if len(names) == 2 else ""))
    cases = kernel_cases()
    cases["train_step x2 (w=1/8)"] = train_step_case()
    if not args.skip_psf:
        cases["psf bank (11 levels)"] = psf_case()
    for label, fn in cases.items():
        repeat = 1 if label.startswith("psf") else args.repeat
        times = []
        for n in names:
            with backend(found[n]):
                times.append(best_of(lambda: fn(found[n]), repeat))
        line = f"{label:24s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"   {times[1] / times[0]:8.2f}x"
        print(line, flush=True)


if __name__ == "__main__":
    main()
