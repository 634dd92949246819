"""Image-quality and classification metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, InputError

PEAK = 65535.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(reference, test):
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"expected non-empty 2-D images, got shape {a.shape}")
    return a, b


def psnr(reference, test, peak=PEAK):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(reference, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Unit-sum 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, len(g), axis=1) @ g
    return sliding_window_view(rows, len(g), axis=0) @ g


def ssim_map(reference, test, peak=PEAK):
    """Per-window SSIM over every fully contained 11x11 Gaussian window."""
    a, b = _pair(reference, test)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    # raw moments in float64; 16-bit data loses ~1e-7 absolute, far below C2
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(reference, test, peak=PEAK):
    """Mean structural similarity (Gaussian window 11, sigma 1.5, K1 0.01, K2 0.03)."""
    a, b = _pair(reference, test)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(ssim_map(a, b, peak)))


def ssim_ratio(deconvolved_ssim, noisy_ssim):
    if noisy_ssim == 0:
        raise DomainError("SSIM ratio with a zero denominator")
    return deconvolved_ssim / noisy_ssim


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    ssim_ratio: float = float("nan")


def quality_report(reference, test, baseline=None):
    """PSNR and SSIM of ``test``; with ``baseline`` also SSIM(test)/SSIM(baseline)."""
    s = ssim(reference, test)
    ratio = float("nan") if baseline is None else ssim_ratio(s, ssim(reference, baseline))
    return QualityReport(psnr(reference, test), s, ratio)


class ConfusionMatrix:
    """Counts with rows indexed by ground truth and columns by prediction."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] == 0:
            raise DimensionError(f"confusion matrix must be square and non-empty, got {counts.shape}")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise InputError("confusion counts must be non-negative integers")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_labels(cls, truth, predicted, num_classes):
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if truth.shape != predicted.shape:
            raise DimensionError("truth and prediction lengths differ")
        for arr in (truth, predicted):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise InputError(f"labels must lie in [0, {num_classes - 1}]")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (truth, predicted), 1)
        return cls(counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def submatrix(self, classes):
        idx = np.asarray(classes, dtype=np.int64)
        return ConfusionMatrix(self.counts[np.ix_(idx, idx)])


def per_class_scores(matrix: ConfusionMatrix):
    """Per-class ``(precision, recall, f1)`` arrays; empty classes score 0."""
    c = matrix.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def classification_report(matrix: ConfusionMatrix, classes=None):
    """Accuracy plus macro precision, recall and F1.

    Macro averages run over every class of the matrix, or over ``classes``
    when given.
    """
    if not isinstance(matrix, ConfusionMatrix):
        matrix = ConfusionMatrix(matrix)
    if matrix.total == 0:
        raise InputError("classification report of an empty confusion matrix")
    precision, recall, f1 = per_class_scores(matrix)
    idx = np.arange(matrix.num_classes) if classes is None else np.asarray(classes, dtype=np.int64)
    return {
        "accuracy": float(np.trace(matrix.counts)) / matrix.total,
        "precision": float(np.mean(precision[idx])),
        "recall": float(np.mean(recall[idx])),
        "f1": float(np.mean(f1[idx])),
    }


def topk_curve(probabilities, labels, k_max):
    """Top-k accuracy for k = 1..k_max; equal scores rank the lower class first."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise DimensionError(f"probabilities {p.shape} do not match {y.shape[0]} labels")
    if int(k_max) != k_max or not 1 <= k_max <= p.shape[1]:
        raise DomainError(f"k_max must lie in [1, {p.shape[1]}], got {k_max!r}")
    if len(y) == 0:
        raise InputError("top-k curve of zero samples")
    order = np.argsort(-p, axis=1, kind="stable")
    rank = np.argmax(order == y[:, None], axis=1)
    return [float(np.mean(rank < k)) for k in range(1, int(k_max) + 1)]


def adjacency_error_fraction(matrix, included=None):
    """Share of misclassifications that land on a neighbouring level.

    ``matrix`` is over defocus classes only.  With ``included`` (the matrix
    indices of the levels actually present, in depth order) neighbours are
    consecutive entries of that list; otherwise neighbours differ by one
    index.  Without any errors the result is 1.0.
    """
    counts = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    if included is None:
        included = range(counts.shape[0])
    included = list(included)
    sub = counts[np.ix_(included, included)]
    pos = np.arange(len(included))
    off = pos[:, None] != pos[None, :]
    errors = int(sub[off].sum())
    if errors == 0:
        return 1.0
    adjacent = np.abs(pos[:, None] - pos[None, :]) == 1
    return float(sub[adjacent].sum()) / errors
