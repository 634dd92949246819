"""Synthetic nucleus-like in-focus frames for tests, demos and benchmarks.

Each frame is a dark, Poisson-noisy background with a scattering of
elliptical nuclei carrying smooth internal texture, roughly resembling
Hoechst-stained cells imaged at 0.65 um per pixel.
"""

import numpy as np
from scipy import ndimage

from .forward_model import to_image16


def nuclei_signal(height, width, rng, density=1.0, brightness=(600.0, 3000.0), radius=(7.0, 13.0),
                  columns=None):
    """Noise-free nucleus intensities (no background, no texture).

    ``columns`` optionally restricts nucleus centres to ``[x0, x1)``.
    """
    c0, c1 = columns if columns is not None else (0, width)
    count = rng.poisson(density * height * (c1 - c0) / 3000.0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    signal = np.zeros((height, width))
    for _ in range(count):
        cy, cx = rng.uniform(0, height), rng.uniform(c0, c1)
        a = rng.uniform(*radius)
        b = a * rng.uniform(0.65, 1.0)
        theta = rng.uniform(0, np.pi)
        peak = rng.uniform(*brightness)
        c, s = np.cos(theta), np.sin(theta)
        half = int(np.ceil(a)) + 4
        y0, y1 = max(0, int(cy) - half), min(height, int(cy) + half + 1)
        x0, x1 = max(0, int(cx) - half), min(width, int(cx) + half + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        dy = yy[y0:y1, x0:x1] - cy
        dx = xx[y0:y1, x0:x1] - cx
        u = (c * dx + s * dy) / a
        v = (-s * dx + c * dy) / b
        rho = np.sqrt(u * u + v * v)
        body = 1.0 / (1.0 + np.exp((rho - 1.0) * 12.0))
        signal[y0:y1, x0:x1] += peak * body
    return signal


def _texture(height, width, rng):
    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.5)
    return 1.0 + 0.35 * texture / (np.abs(texture).max() + 1e-12)


def nuclei_phantom(height=520, width=696, seed=0, density=1.0, background=8.0,
                   brightness=(600.0, 3000.0), radius=(7.0, 13.0)):
    """Return a ``uint16`` frame of shape ``(height, width)``.

    ``density`` scales the expected number of nuclei per unit area; a value
    of 1 gives about one nucleus per 3000 pixels.
    """
    rng = np.random.default_rng(seed)
    signal = nuclei_signal(height, width, rng, density, brightness, radius)
    texture = _texture(height, width, rng)
    expected = background + signal * texture
    return to_image16(rng.poisson(np.maximum(expected, 0.0)))


def phantom_set(count, height=168, width=168, seed=0, **kwargs):
    """``count`` independent phantoms keyed ``img000``, ``img001``, ..."""
    return {f"img{i:03d}": nuclei_phantom(height, width, seed=seed * 100003 + i, **kwargs)
            for i in range(count)}


def two_depth_scene(height=168, width=168, levels=(4, 5), seed=0, density=1.0, background=8.0,
                    gap=20, cfg=None, gain=1.0):
    """Frame whose left half lies at one defocus level and right half at another.

    Nuclei are kept ``gap`` pixels clear of the centre line; each half is
    blurred with its own PSF and the two are summed before a single
    Poisson draw, as for two objects at different depths.  Returns
    ``(observed, in_focus)`` as ``uint16`` frames.
    """
    from .forward_model import apply_poisson, convolve2d
    from .optics import OpticalConfig, build_psf_kernel

    cfg = cfg or OpticalConfig()
    rng = np.random.default_rng(seed)
    mid = width // 2
    halves = [nuclei_signal(height, width, rng, density, columns=(0, mid - gap)),
              nuclei_signal(height, width, rng, density, columns=(mid + gap, width))]
    texture = _texture(height, width, rng)
    in_focus = background + (halves[0] + halves[1]) * texture
    observed = np.full((height, width), float(background))
    for part, level in zip(halves, levels):
        part = part * texture
        observed += part if level == 0 else convolve2d(part, build_psf_kernel(level, cfg))
    return apply_poisson(observed, gain, int(rng.integers(2**32))), to_image16(in_focus)
