"""Richardson-Lucy deconvolution and adaptive-weight patch reassembly.

A whole frame is restored patch by patch: the frame is cut into 84x84
patches on a regular grid, every patch receives a class (a defocus level or
"bg"), non-background patches are deconvolved with the PSF of their level,
and the results are blended back with a triangular weight.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DimensionError, DomainError, InputError
from .forward_model import DIRECT_MAX_TAPS, FFTConvolver, as_real_image, convolve2d, kernel_array, to_image16
from .optics import OpticalConfig, PsfKernel, build_psf_kernel
from .settings import thread_limit

log = logging.getLogger(__name__)

PATCH_SIZE = 84
DEFAULT_STRIDE = 42
DEFAULT_ITERATIONS = 30
RL_EPSILON = 1e-12


def _operator(shape, values):
    if values.size <= DIRECT_MAX_TAPS:
        return lambda img: convolve2d(img, values, "reflect", "direct")
    return FFTConvolver(shape, values, "reflect")


def richardson_lucy(observed, psf, iterations=DEFAULT_ITERATIONS, tolerance=0.0):
    """Multiplicative Richardson-Lucy iterations started from ``observed``.

    Each step divides the observation by the re-blurred estimate (the
    denominator floored at ``RL_EPSILON``), correlates the ratio with the
    PSF and multiplies it into the estimate.  Convolutions mirror the image
    at its edges.  With ``tolerance > 0`` iteration stops early once the
    largest pixel change relative to the estimate's peak drops below it.

    Parameters
    ----------
    observed : array_like
        Non-negative 2-D image.
    psf : PsfKernel or array_like
        Unit-sum kernel with odd sides.
    iterations : int

    Returns
    -------
    numpy.ndarray of float64, non-negative.
    """
    observed = as_real_image(observed)
    if iterations < 0 or int(iterations) != iterations:
        raise DomainError(f"iterations must be a non-negative integer, got {iterations!r}")
    if not np.all(np.isfinite(observed)):
        raise DomainError("observed image contains non-finite values")
    if np.any(observed < 0):
        raise DomainError("observed image has negative pixels")
    values = kernel_array(psf)
    estimate = observed.copy()
    if iterations == 0:
        return estimate
    blur = _operator(observed.shape, values)
    adjoint = _operator(observed.shape, values[::-1, ::-1].copy())
    for it in range(int(iterations)):
        ratio = observed / np.maximum(blur(estimate), RL_EPSILON)
        update = estimate * adjoint(ratio)
        if tolerance > 0:
            peak = max(float(estimate.max()), RL_EPSILON)
            change = float(np.max(np.abs(update - estimate))) / peak
            estimate = update
            if change < tolerance:
                log.debug("richardson_lucy converged after %d iterations", it + 1)
                break
        else:
            estimate = update
    return estimate


def triangular_weight(patch_size=PATCH_SIZE, stride=DEFAULT_STRIDE):
    """1-D blending profile for a given stride.

    A triangle with base ``patch_size`` sampled at pixel centres and scaled
    to height ``stride / (patch_size / 2)``; ``stride == patch_size`` gives
    the all-ones rectangle instead.
    """
    if int(stride) != stride or not 1 <= stride <= patch_size:
        raise DomainError(f"stride must be an integer in [1, {patch_size}], got {stride!r}")
    if stride == patch_size:
        return np.ones(patch_size)
    half = patch_size / 2.0
    centres = np.arange(patch_size) + 0.5
    return (stride / half) * (1.0 - np.abs(centres - half) / half)


def weight_2d(profile):
    return np.outer(profile, profile)


def padded_extent(dim, patch_size=PATCH_SIZE, stride=DEFAULT_STRIDE):
    """Smallest length >= ``dim`` of the form ``patch_size + k * stride``."""
    if dim < patch_size:
        raise DimensionError(f"image side {dim} is smaller than the {patch_size}-pixel patch")
    return patch_size + math.ceil((dim - patch_size) / stride) * stride


@dataclass
class RestorationPlan:
    """Grid of patch offsets over a padded frame plus one class per patch.

    ``grid`` holds ``(y, x)`` top-left offsets in row-major order.
    ``labels[k]`` is the class of patch ``k``: a defocus level, or
    ``bg_label`` for background patches that pass through untouched.
    """

    image_shape: tuple
    padded_shape: tuple
    stride: int
    grid: list
    labels: np.ndarray
    bg_label: int | None = None
    patch_size: int = PATCH_SIZE
    weight_profile: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight_profile is None:
            self.weight_profile = triangular_weight(self.patch_size, self.stride)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.grid):
            raise InputError(f"{len(self.labels)} labels for {len(self.grid)} grid patches")

    def is_bg(self, k):
        return self.bg_label is not None and self.labels[k] == self.bg_label

    def passthrough(self):
        """Boolean per patch: True where the patch is used without deconvolution."""
        return np.array([self.is_bg(k) for k in range(len(self.grid))], dtype=bool)

    def label_grid(self):
        """Labels reshaped to the (rows, cols) layout of the grid."""
        rows = len({y for y, _ in self.grid})
        return self.labels.reshape(rows, -1)


def pad_image(image, padded_shape):
    """Mirror-extend ``image`` at the bottom and right edges."""
    h, w = image.shape
    return np.pad(image, ((0, padded_shape[0] - h), (0, padded_shape[1] - w)), mode="symmetric")


def grid_offsets(padded_shape, patch_size=PATCH_SIZE, stride=DEFAULT_STRIDE):
    ys = range(0, padded_shape[0] - patch_size + 1, stride)
    xs = range(0, padded_shape[1] - patch_size + 1, stride)
    return [(y, x) for y in ys for x in xs]


def extract_patches(image, plan: RestorationPlan):
    """Raw patches of the padded frame in grid order, ``(K, S, S)`` float64."""
    padded = pad_image(as_real_image(image), plan.padded_shape)
    s = plan.patch_size
    return np.stack([padded[y:y + s, x:x + s] for y, x in plan.grid])


def plan_restoration(image, classifier=None, stride=DEFAULT_STRIDE, labels=None, bg_label=None,
                     normalization="patch", patch_size=PATCH_SIZE):
    """Lay out the patch grid for ``image`` and classify every patch.

    Parameters
    ----------
    image : array_like or tuple
        The frame, or just its ``(height, width)`` when ``labels`` are given.
    classifier : DelpNet or callable, optional
        A model, or a function mapping a normalised ``(N, 1, S, S)`` batch
        to class indices.  A model's ``metadata["bg_label"]`` is used when
        ``bg_label`` is not given.
    labels : int or sequence, optional
        Known classes instead of a classifier (one value for every patch or
        one per patch).
    """
    from .dataset import normalize_patch

    shape = tuple(image) if isinstance(image, tuple) else np.shape(image)
    if len(shape) != 2:
        raise DimensionError(f"expected a 2-D image, got shape {shape}")
    padded = tuple(padded_extent(d, patch_size, stride) for d in shape)
    grid = grid_offsets(padded, patch_size, stride)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim > 1 or labels.size not in (1, len(grid)):
            raise InputError(f"{labels.size} labels for {len(grid)} grid patches")
        labels = np.broadcast_to(labels.reshape(-1), (len(grid),)).copy()
    else:
        if classifier is None or isinstance(image, tuple):
            raise InputError("planning needs either labels or a classifier and the image")
        probe = RestorationPlan(shape, padded, stride, grid, np.zeros(len(grid)), None, patch_size)
        raw = extract_patches(image, probe)
        batch = np.stack([normalize_patch(p, normalization) for p in raw])[:, None]
        if hasattr(classifier, "forward"):
            from .delpnet import predict_proba

            labels = np.argmax(predict_proba(classifier, batch.astype(np.float32)), axis=1)
            if bg_label is None:
                bg_label = getattr(classifier, "metadata", {}).get("bg_label")
        else:
            labels = np.asarray(classifier(batch), dtype=np.int64)
    return RestorationPlan(shape, padded, stride, grid, labels, bg_label, patch_size)


class WeightedCanvas:
    """Weighted sum of patches plus the matching sum of weights."""

    def __init__(self, shape):
        self.accumulator = np.zeros(shape)
        self.weight_map = np.zeros(shape)

    def add(self, patch, weight, y, x):
        h, w = weight.shape
        self.accumulator[y:y + h, x:x + w] += patch * weight
        self.weight_map[y:y + h, x:x + w] += weight

    def result(self):
        if not np.all(self.weight_map > 0):
            missing = int(np.sum(~(self.weight_map > 0)))
            raise CoverageError(f"{missing} pixels received no patch weight")
        return self.accumulator / self.weight_map


def accumulated_weight(padded_shape, patch_size=PATCH_SIZE, stride=DEFAULT_STRIDE):
    """Weight map of a full tiling, without any image content."""
    w2 = weight_2d(triangular_weight(patch_size, stride))
    canvas = WeightedCanvas(padded_shape)
    for y, x in grid_offsets(padded_shape, patch_size, stride):
        canvas.weight_map[y:y + patch_size, x:x + patch_size] += w2
    return canvas.weight_map


def awdvd(image, plan: RestorationPlan, cfg: OpticalConfig = OpticalConfig(),
          iterations=DEFAULT_ITERATIONS, depth_invariant=False, tolerance=0.0, kernels=None):
    """Depth-variant restoration of a 16-bit frame following ``plan``.

    Background patches pass through raw.  Level-0 patches also pass through
    (their PSF is close to a delta) unless ``depth_invariant`` is set, in
    which case every non-background patch is deconvolved with the level-0
    PSF.  Blended output is divided by the accumulated weight, cropped to
    the input size and rounded into 16 bits.

    ``kernels`` may map levels to prebuilt :class:`PsfKernel` objects (a
    list indexed by level works too).
    """
    image = as_real_image(image)
    if image.shape != tuple(plan.image_shape):
        raise DimensionError(f"plan was made for {plan.image_shape}, image is {image.shape}")
    if np.any(image < 0):
        raise DomainError("image has negative pixels")
    if isinstance(kernels, (list, tuple)):
        kernels = dict(enumerate(kernels))
    kernels = dict(kernels or {})
    patches = extract_patches(image, plan)
    w2 = weight_2d(plan.weight_profile)

    def level_of(k):
        if plan.is_bg(k):
            return None
        level = 0 if depth_invariant else int(plan.labels[k])
        if level == 0 and not depth_invariant:
            return None
        if not 0 <= level < cfg.num_levels:
            raise InputError(f"patch {k} has class {level}, outside the {cfg.num_levels} levels")
        return level

    needed = sorted({lv for lv in map(level_of, range(len(plan.grid))) if lv is not None})
    for lv in needed:
        if lv not in kernels:
            kernels[lv] = build_psf_kernel(lv, cfg)

    def job(k):
        lv = level_of(k)
        if lv is None:
            return patches[k]
        return richardson_lucy(patches[k], kernels[lv], iterations, tolerance)

    canvas = WeightedCanvas(plan.padded_shape)
    workers = max(1, min(thread_limit(), len(plan.grid)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map keeps grid order, so accumulation is serial and deterministic
        for (y, x), restored in zip(plan.grid, pool.map(job, range(len(plan.grid)))):
            canvas.add(restored, w2, y, x)
    h, w = plan.image_shape
    return to_image16(canvas.result()[:h, :w])


def boundary_jump(image, column):
    """Largest absolute step between columns ``column - 1`` and ``column``."""
    img = np.asarray(image, dtype=np.float64)
    if not 1 <= column < img.shape[1]:
        raise DimensionError(f"column {column} is not an interior column boundary")
    return float(np.max(np.abs(img[:, column] - img[:, column - 1])))


def interior_jump_bound(image, column, margin=8):
    """Largest horizontal adjacent-pixel step at least ``margin`` pixels
    away from the boundary at ``column``.

    A restoration free of seams keeps :func:`boundary_jump` at or below
    this bound.
    """
    img = np.asarray(image, dtype=np.float64)
    steps = np.abs(np.diff(img, axis=1))
    # step j lies between columns j and j + 1
    j = np.arange(steps.shape[1])
    keep = (j + 1 <= column - margin) | (j >= column + margin)
    if not np.any(keep):
        raise DimensionError("image too narrow for the requested margin")
    return float(np.max(steps[:, keep]))
