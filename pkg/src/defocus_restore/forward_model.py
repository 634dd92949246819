"""Image formation: blur by a depth-dependent PSF, then Poisson noise.

Images are plain numpy arrays: ``uint16`` for 16-bit camera frames and
``float64`` for real-valued intensity maps.
"""

from __future__ import annotations

import numpy as np
from scipy import fft, ndimage

from .errors import DimensionError, DomainError
from .optics import DefocusLevel, OpticalConfig, PsfKernel, build_psf_kernel
from .settings import thread_limit

BOUNDARIES = ("reflect", "zero")
_NUMPY_PAD = {"reflect": "symmetric", "zero": "constant"}
_NDIMAGE_MODE = {"reflect": "reflect", "zero": "constant"}
# Kernels with at most this many taps are applied in the spatial domain.
DIRECT_MAX_TAPS = 25
UINT16_MAX = 65535


def kernel_array(kernel):
    values = kernel.values if isinstance(kernel, PsfKernel) else np.asarray(kernel, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] % 2 == 0 or values.shape[1] % 2 == 0:
        raise DimensionError(f"kernel must be 2-D with odd sides, got shape {values.shape}")
    return values


def as_real_image(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    return arr


def as_image16(image):
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if np.any(arr < 0) or np.any(arr > UINT16_MAX) or np.any(arr != np.round(arr)):
            raise DomainError("16-bit image values must be integers in [0, 65535]")
        arr = arr.astype(np.uint16)
    return arr


def to_image16(real):
    """Round and clamp a real image into the 16-bit range."""
    return np.clip(np.rint(real), 0, UINT16_MAX).astype(np.uint16)


class FFTConvolver:
    """Convolution of same-shaped images with one fixed kernel.

    The image is extended by the kernel radius on every side (mirror or
    zeros) and the kernel spectrum is computed once, so repeated
    application, as in Richardson-Lucy, costs two real FFTs per call.
    """

    def __init__(self, shape, kernel, boundary="reflect"):
        if boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
        values = kernel_array(kernel)
        self.shape = tuple(shape)
        self.boundary = boundary
        self.ry, self.rx = values.shape[0] // 2, values.shape[1] // 2
        h, w = self.shape
        padded = (h + 2 * self.ry, w + 2 * self.rx)
        self.fft_shape = tuple(fft.next_fast_len(n, real=True) for n in padded)
        self._workers = thread_limit()
        self._spectrum = fft.rfft2(values, self.fft_shape, workers=self._workers)

    def __call__(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.shape:
            raise DimensionError(f"convolver built for {self.shape}, got {image.shape}")
        ry, rx = self.ry, self.rx
        mode = _NUMPY_PAD[self.boundary]
        padded = np.pad(image, ((ry, ry), (rx, rx)), mode=mode)
        spec = fft.rfft2(padded, self.fft_shape, workers=self._workers)
        full = fft.irfft2(spec * self._spectrum, self.fft_shape, workers=self._workers)
        h, w = self.shape
        out = full[2 * ry:2 * ry + h, 2 * rx:2 * rx + w]
        return np.maximum(out, 0.0)


def _direct(image, values, boundary):
    mode = _NDIMAGE_MODE[boundary]
    if values.shape == (1, 1):
        return image * values[0, 0]
    return ndimage.convolve(image, values, mode=mode, cval=0.0)


def convolve2d(image, kernel, boundary="reflect", method="auto"):
    """Linear convolution cropped to the input extent.

    ``boundary`` selects mirror ("reflect", edge sample repeated) or zero
    extension.  ``method`` is "fft", "direct" or "auto" (spatial for kernels
    of at most ``DIRECT_MAX_TAPS`` taps).  Negative round-off is clamped to
    zero, so the result is meant for non-negative data.
    """
    image = as_real_image(image)
    values = kernel_array(kernel)
    if boundary not in BOUNDARIES:
        raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    if method == "auto":
        method = "direct" if values.size <= DIRECT_MAX_TAPS else "fft"
    if method == "direct":
        return np.maximum(_direct(image, values, boundary), 0.0)
    if method != "fft":
        raise ValueError(f"unknown convolution method {method!r}")
    return FFTConvolver(image.shape, values, boundary)(image)


def apply_poisson(image, gain=1.0, seed=0):
    """Draw ``Poisson(gain * value) / gain`` per pixel, rounded to 16 bit."""
    if not np.isfinite(gain) or gain <= 0:
        raise DomainError(f"gain must be positive, got {gain!r}")
    image = as_real_image(image)
    if not np.all(np.isfinite(image)):
        raise DomainError("image contains non-finite values")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(gain * np.maximum(image, 0.0))
    return to_image16(counts / gain)


def synthesize_defocused(in_focus, level, cfg: OpticalConfig = OpticalConfig(), gain=1.0, seed=0,
                         kernel=None):
    """Degrade an in-focus frame to ``level``.

    Level 0 is returned untouched (no blur, no noise).  ``kernel`` may be
    passed to reuse a prebuilt PSF.
    """
    in_focus = as_image16(in_focus)
    if not isinstance(level, DefocusLevel):
        level = cfg.level(level)
    if level.index == 0:
        return in_focus.copy()
    if kernel is None:
        kernel = build_psf_kernel(level, cfg)
    blurred = convolve2d(in_focus.astype(np.float64), kernel, boundary="reflect")
    return apply_poisson(blurred, gain, seed)
