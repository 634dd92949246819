"""Acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line with the measured
values before asserting, so the verdicts are visible in the plain pytest
log.  Criteria 6 and 7 train classifiers and take the better part of an
hour on one CPU; they carry the ``slow`` mark.
"""

import filecmp
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from defocus_restore.cli import main
from defocus_restore.dataset import build_dataset, patches_to_arrays
from defocus_restore.delpnet import Architecture, DelpNet, TrainConfig, backward, cross_entropy, evaluate, fit
from defocus_restore.evaluation import restoration_experiment, summarize_by_level
from defocus_restore.forward_model import convolve2d
from defocus_restore.metrics import (ConfusionMatrix, adjacency_error_fraction, classification_report, psnr,
                                     ssim)
from defocus_restore.optics import OpticalConfig, build_kernel_bank, psf_value
from defocus_restore.phantoms import nuclei_phantom, phantom_set, two_depth_scene
from defocus_restore.restore import (accumulated_weight, awdvd, boundary_jump, interior_jump_bound,
                                     padded_extent, plan_restoration, richardson_lucy)
from helpers import boundary_seed, split_labels
from test_metrics import ssim_oracle


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


# -- 1 ------------------------------------------------------------------------------

def test_criterion_01_psf_oracle(verdict):
    t0 = time.perf_counter()
    cfg = OpticalConfig()
    worst_rel = 0.0
    for lvl in cfg.levels():
        # on axis J0 = 1 and the pupil integral is elementary:
        # |int_0^1 exp(-i a p^2 / 2) p dp|^2 = 4 sin^2(a / 4) / a^2 with a = k z NA^2 / n^2
        a = cfg.wavenumber * lvl.depth * cfg.numerical_aperture ** 2 / cfg.refractive_index ** 2
        closed = 0.25 if a == 0 else 4 * math.sin(a / 4) ** 2 / a ** 2
        worst_rel = max(worst_rel, abs(psf_value(0.0, lvl.depth, cfg) - closed) / closed)
    bank = build_kernel_bank(cfg)
    worst_sum = max(abs(math.fsum(k.values.ravel()) - 1.0) for k in bank)
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= 1e-8 and worst_sum <= 1e-12 and elapsed < 30
    verdict(1, ok, f"max on-axis rel err {worst_rel:.2e}, max |sum-1| {worst_sum:.2e}, {elapsed:.1f} s")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def _mirror(idx, n):
    # reflect with the edge sample repeated, for any integer offset
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def spatial_convolve(image, kernel):
    """Tap-by-tap spatial sum with explicitly mirrored indices."""
    h, w = image.shape
    kh, kw = kernel.shape
    out = np.zeros((h, w))
    rows = np.arange(h)
    cols = np.arange(w)
    for u in range(kh):
        ri = _mirror(rows + kh // 2 - u, h)
        for v in range(kw):
            ci = _mirror(cols + kw // 2 - v, w)
            out += kernel[u, v] * image[np.ix_(ri, ci)]
    return out


def test_criterion_02_convolution_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(1, 33, 2)
        ry, rx = rng.integers(0, 6, 2)
        img = rng.random((h, w))
        k = rng.random((2 * ry + 1, 2 * rx + 1))
        worst = max(worst, float(np.max(np.abs(convolve2d(img, k, method="fft") - spatial_convolve(img, k)))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    verdict(2, ok, f"max abs diff {worst:.2e} over 200 cases, {elapsed:.1f} s")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_criterion_03_gradient_check(verdict):
    t0 = time.perf_counter()
    arch = Architecture(input_size=8, conv_widths=(3, 4), pool_after=(1,), num_classes=5,
                        dropout_pool=0.3, dropout_dense=0.3)
    model = DelpNet(arch, seed=11, dtype=np.float64)
    rng = np.random.default_rng(1)
    for _, p in model.named_parameters():
        p += rng.normal(0, 0.1, p.shape)
    x = rng.random((4, 1, 8, 8))
    y = np.array([4, 0, 2, 1])
    state = model.rng.bit_generator.state

    def loss():
        model.rng.bit_generator.state = state  # fixed dropout masks
        value = cross_entropy(model.forward(x, "train"), y)
        for layer in model.layers:
            layer.clear()
        return value

    model.rng.bit_generator.state = state
    grads = {k: v.copy() for k, v in backward(model, x, y, logits=model.forward(x, "train")).items()}
    worst = {}
    h = 1e-5
    for name, p in model.named_parameters():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd = (up - down) / (2 * h)
            an = grads[name].reshape(-1)[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            layer = name.split(".")[0]
            worst[layer] = max(worst.get(layer, 0.0), rel)
    kinds = {l.kind for l in model.layers}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed < 60 and {
        "conv", "batchnorm", "dense", "globalmaxpool", "dropout", "relu"} <= kinds
    verdict(3, ok, f"worst relative error per layer {({k: float(f'{v:.1e}') for k, v in worst.items()})}, "
                   f"{elapsed:.1f} s")
    assert ok


# -- 4 ------------------------------------------------------------------------------

def test_criterion_04_richardson_lucy(verdict, bank):
    t0 = time.perf_counter()
    fixtures = [nuclei_phantom(64, 64, seed=s, density=2.0).astype(float) for s in range(8)]
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    fixed = all(np.array_equal(richardson_lucy(f, delta, 7), f) for f in fixtures)
    gains, nonneg = [], True
    for f in fixtures:
        blurred = convolve2d(f, bank[3])
        restored = richardson_lucy(blurred, bank[3], 30)
        nonneg &= bool(restored.min() >= 0)
        gains.append(psnr(f, restored) - psnr(f, blurred))
    elapsed = time.perf_counter() - t0
    ok = fixed and nonneg and min(gains) >= 3.0 and elapsed < 30
    verdict(4, ok, f"delta fixed point {fixed}, non-negative {nonneg}, PSNR gain min {min(gains):.2f} "
                   f"mean {np.mean(gains):.2f} dB, {elapsed:.1f} s")
    assert ok


# -- 5 ------------------------------------------------------------------------------

def test_criterion_05_depth_variant_ordering(verdict, bank):
    t0 = time.perf_counter()
    images = phantom_set(20, 168, 168, seed=500, density=0.5)
    samples = restoration_experiment(images, OpticalConfig(), range(1, 11), seed=5)
    psnr_rows, _ = summarize_by_level(samples)
    elapsed = time.perf_counter() - t0
    table = {int(r[0]): (r[4], r[5]) for r in psnr_rows}
    ok = all(table[lv][0] > table[lv][1] for lv in range(2, 11)) and elapsed < 600
    detail = ", ".join(f"L{lv} {v:+.2f}/{i:+.2f}" for lv, (v, i) in table.items())
    verdict(5, ok, f"mean PSNR gain variant/invariant dB: {detail}; {elapsed:.0f} s")
    assert ok


# -- 6 and 7 --------------------------------------------------------------------------

DESK_LEVELS = [0, 4, 8]
DESK_SEEDS = (0, 1, 2)
_runs = {}


@pytest.fixture(scope="module")
def desk_store():
    images = phantom_set(40, 168, 168, seed=600, density=0.5)
    return build_dataset(images, OpticalConfig(), seed=6, levels=DESK_LEVELS)


def desk_run(store, seed, no_bg):
    """Train the reduced classifier once per (seed, no_bg) and cache the outcome."""
    key = (seed, no_bg)
    if key not in _runs:
        t0 = time.perf_counter()
        train = patches_to_arrays(store.splits["train"], no_bg)
        val = patches_to_arrays(store.splits["val"], no_bg)
        x, y = patches_to_arrays(store.splits["test"], no_bg)
        arch = Architecture(num_classes=11 if no_bg else 12).scaled(1 / 8)
        model = DelpNet(arch, seed=seed)
        fit(model, train, val, TrainConfig(learning_rate=1e-3, batch_size=32, epochs=30, seed=seed))
        _, acc, probs = evaluate(model, x, y)
        matrix = ConfusionMatrix.from_labels(y, np.argmax(probs, axis=1), arch.num_classes)
        _runs[key] = {"accuracy": acc, "matrix": matrix, "seconds": time.perf_counter() - t0}
    return _runs[key]


@pytest.mark.slow
def test_criterion_06_classifier_sanity(verdict, desk_store):
    run = desk_run(desk_store, DESK_SEEDS[0], False)
    adjacent = adjacency_error_fraction(run["matrix"], DESK_LEVELS)
    ok = run["accuracy"] >= 0.85 and adjacent >= 0.70 and run["seconds"] < 1800
    verdict(6, ok, f"test accuracy {run['accuracy']:.4f}, adjacent share of level errors {adjacent:.2f}, "
                   f"train sizes {[len(v) for v in desk_store.splits.values()]}, {run['seconds']:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_07_bg_ablation(verdict, desk_store):
    wins = []
    detail = []
    for seed in DESK_SEEDS:
        with_bg = desk_run(desk_store, seed, False)["accuracy"]
        without = desk_run(desk_store, seed, True)["accuracy"]
        wins.append(with_bg >= without)
        detail.append(f"seed {seed}: {with_bg:.4f} vs {without:.4f}")
    ok = sum(wins) >= 2
    verdict(7, ok, "with-bg vs without-bg test accuracy; " + "; ".join(detail))
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_criterion_08_partition_of_unity(verdict):
    t0 = time.perf_counter()
    spread = {}
    for stride in (1, 2, 3, 6, 7, 14, 21, 42):
        side = padded_extent(84 * 4, stride=stride)
        wm = accumulated_weight((side, side), stride=stride)
        core = wm[84:side - 84, 84:side - 84]
        spread[stride] = float(np.ptp(core))
    positive = all(np.all(accumulated_weight((padded_extent(200, stride=s), padded_extent(170, stride=s)),
                                             stride=s) > 0) for s in range(1, 85))
    elapsed = time.perf_counter() - t0
    ok = max(spread.values()) <= 1e-9 and positive and elapsed < 60
    verdict(8, ok, f"max interior spread {max(spread.values()):.1e}, positive for strides 1-84 {positive}, "
                   f"{elapsed:.1f} s")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def test_criterion_09_boundary_artifacts(verdict, bank):
    t0 = time.perf_counter()
    cfg = OpticalConfig()
    results = []
    for la, lb in ((2, 8), (4, 6), (3, 7)):
        seed = boundary_seed((la, lb))
        observed, _ = two_depth_scene(levels=(la, lb), seed=seed, gap=0)
        mid = observed.shape[1] // 2
        outs = {}
        for stride in (84, 42):
            probe = plan_restoration(observed.shape, stride=stride, labels=0)
            plan = plan_restoration(observed.shape, stride=stride, labels=split_labels(probe.grid, mid, la, lb))
            outs[stride] = awdvd(observed, plan, cfg, kernels=bank)
        j42, j84 = boundary_jump(outs[42], mid), boundary_jump(outs[84], mid)
        bound = interior_jump_bound(outs[42], mid)
        results.append((la, lb, seed, j42, j84, bound, j42 <= j84 and j42 <= bound))
    elapsed = time.perf_counter() - t0
    ok = all(r[-1] for r in results) and elapsed < 300
    detail = "; ".join(f"levels {a}/{b} seed {s}: jump42 {j:.0f} jump84 {k:.0f} interior {m:.0f}"
                       for a, b, s, j, k, m, _ in results)
    verdict(9, ok, f"{detail}; {elapsed:.0f} s")
    assert ok


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_metric_oracles(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        a = rng.integers(0, 65536, (16, 16))
        b = np.clip(a + rng.normal(0, rng.uniform(100, 20000), a.shape), 0, 65535).round()
        worst = max(worst, abs(ssim(a, b) - ssim_oracle(a, b)))
    z = np.zeros((6, 6))
    psnr_ok = (psnr(z, z) == math.inf and psnr(z, z + 65535) == 0.0
               and psnr(z + 1000, z + 1010) == 10 * math.log10(65535 ** 2 / 100)
               and abs(psnr(z, z + 10) - psnr(z, z + 100) - 20.0) < 1e-12)
    hand = [
        ([[2, 0, 0], [1, 1, 0], [0, 1, 1]],
         {"accuracy": Fraction(2, 3), "precision": Fraction(13, 18), "recall": Fraction(2, 3),
          "f1": Fraction(59, 90)}),
        ([[5, 0], [0, 5]], {"accuracy": 1, "precision": 1, "recall": 1, "f1": 1}),
        ([[1, 1], [1, 1]], {"accuracy": Fraction(1, 2), "precision": Fraction(1, 2), "recall": Fraction(1, 2),
                            "f1": Fraction(1, 2)}),
    ]
    report_ok = True
    for counts, expected in hand:
        rep = classification_report(ConfusionMatrix(counts))
        report_ok &= all(rep[k] == float(v) for k, v in expected.items())
    ok = worst <= 1e-9 and psnr_ok and report_ok
    verdict(10, ok, f"SSIM max oracle diff {worst:.1e}, PSNR cases {psnr_ok}, hand reports {report_ok}")
    assert ok


# -- 11 -----------------------------------------------------------------------------

def _pipeline(root):
    def run(*argv):
        assert main([str(a) for a in argv]) == 0, argv

    run("phantoms", "--count", 6, "--out", root / "imgs", "--seed", 3)
    run("synth", "--input", root / "imgs", "--out", root / "store", "--levels", "0,4,8", "--crops", 4,
        "--seed", 7)
    run("train", "--data", root / "store", "--out", root / "model", "--epochs", 2, "--width-scale", 0.0625,
        "--batch-size", 16, "--lr", 1e-3, "--seed", 7)
    run("predict", "--model", root / "model", "--data", root / "store", "--out", root / "pred.csv")
    run("evaluate", "--predictions", root / "pred.csv", "--images", root / "imgs", "--levels", "2,6",
        "--iterations", 5, "--seed", 7, "--out", root / "eval")
    run("deconvolve", "--input", root / "imgs" / "img000.pgm", "--model", root / "model", "--iterations", 5,
        "--output", root / "restored.pgm")
    run("plot", "--csv", root / "eval" / "psnr_by_level.csv", "--out", root / "psnr.ppm")
    run("plot", "--csv", root / "eval" / "topk.csv", "--out", root / "topk.ppm")


def _files(root):
    out = []
    for base, _, names in os.walk(root):
        out += [os.path.relpath(os.path.join(base, n), root) for n in names]
    return sorted(out)


def test_criterion_11_determinism(verdict, tmp_path):
    for name in ("a", "b"):
        _pipeline(tmp_path / name)
    files_a, files_b = _files(tmp_path / "a"), _files(tmp_path / "b")
    differing = [f for f in files_a if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)] \
        if files_a == files_b else ["<file lists differ>"]
    ok = files_a == files_b and not differing and len(files_a) > 20
    verdict(11, ok, f"{len(files_a)} artifacts compared, differing: {differing[:5]}")
    assert ok
