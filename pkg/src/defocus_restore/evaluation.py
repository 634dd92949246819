"""Experiment drivers shared by the CLI and the acceptance checks."""

from __future__ import annotations

import numpy as np

from .dataset import derive_seed
from .forward_model import synthesize_defocused
from .metrics import psnr, ssim
from .optics import OpticalConfig, build_psf_kernel
from .restore import DEFAULT_ITERATIONS, DEFAULT_STRIDE, awdvd, plan_restoration

PSNR_HEADER = ["level", "noisy_db", "depth_variant_db", "depth_invariant_db",
               "depth_variant_gain_db", "depth_invariant_gain_db"]
SSIM_HEADER = ["level", "noisy", "depth_variant", "depth_invariant",
               "depth_variant_ratio", "depth_invariant_ratio"]


def restoration_experiment(images, cfg: OpticalConfig = OpticalConfig(), levels=range(1, 11),
                           seed=0, gain=1.0, stride=DEFAULT_STRIDE, iterations=DEFAULT_ITERATIONS,
                           classifier=None, normalization="patch", tolerance=0.0):
    """Depth-variant vs depth-invariant restoration for every image and level.

    Each in-focus frame is degraded to each level, then restored twice:
    with the kernel of its level (taken from ``classifier`` when given,
    otherwise the true level) and with the level-0 kernel only.  Returns a
    list of per-sample dicts with PSNR and SSIM of the three images.
    """
    kernels = {}
    samples = []
    for lv in levels:
        kernels[lv] = build_psf_kernel(lv, cfg)
    kernels.setdefault(0, build_psf_kernel(0, cfg))
    for image_id, frame in images.items():
        ref = np.asarray(frame)
        for lv in levels:
            noisy = synthesize_defocused(ref, lv, cfg, gain, derive_seed(seed, "restore", image_id, lv),
                                         kernel=kernels[lv])
            if classifier is None:
                plan = plan_restoration(noisy.shape, stride=stride, labels=lv)
            else:
                plan = plan_restoration(noisy, classifier, stride, normalization=normalization)
            variant = awdvd(noisy, plan, cfg, iterations, tolerance=tolerance, kernels=kernels)
            invariant = awdvd(noisy, plan, cfg, iterations, depth_invariant=True, tolerance=tolerance,
                              kernels=kernels)
            samples.append({
                "image": image_id, "level": lv,
                "psnr": (psnr(ref, noisy), psnr(ref, variant), psnr(ref, invariant)),
                "ssim": (ssim(ref, noisy), ssim(ref, variant), ssim(ref, invariant)),
            })
    return samples


def summarize_by_level(samples):
    """Per-level mean rows for the PSNR and SSIM tables."""
    levels = sorted({s["level"] for s in samples})
    psnr_rows, ssim_rows = [], []
    for lv in levels:
        group = [s for s in samples if s["level"] == lv]
        p = np.array([s["psnr"] for s in group])
        q = np.array([s["ssim"] for s in group])
        psnr_rows.append([lv, *p.mean(axis=0), float(np.mean(p[:, 1] - p[:, 0])),
                          float(np.mean(p[:, 2] - p[:, 0]))])
        ssim_rows.append([lv, *q.mean(axis=0), float(np.mean(q[:, 1] / q[:, 0])),
                          float(np.mean(q[:, 2] / q[:, 0]))])
    return psnr_rows, ssim_rows

