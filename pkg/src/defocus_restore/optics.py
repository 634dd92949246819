"""Scalar defocus PSF model and its discretisation into kernels.

The PSF of a defocused widefield microscope is evaluated as

    h(r; z) = | int_0^1 J0(k NA/n r rho) exp(-j/2 k rho^2 z NA^2/n^2) rho drho |^2

with composite Gauss-Legendre quadrature whose node count doubles until
successive estimates of the complex integral agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import DomainError, KernelSizeError

QUADRATURE_START_NODES = 64
QUADRATURE_MAX_NODES = 1 << 17
QUADRATURE_TOL = 1e-10
_PANEL_ORDER = 32
# PSFs are always sampled at least this far out, so a small radius cap
# is detected instead of silently shrinking the sampled mass.
SAMPLE_RADIUS = 256
# Upper bound on the J0 block evaluated at once (elements).
_BLOCK_ELEMENTS = 1 << 23


@dataclass(frozen=True)
class OpticalConfig:
    """Physical constants of the imaging model.

    Lengths: ``wavelength`` in nanometres, ``pixel_pitch`` and
    ``level_step`` in micrometres.
    """

    wavelength: float = 451.0
    numerical_aperture: float = 0.5
    refractive_index: float = 1.0
    pixel_pitch: float = 0.65
    level_step: float = 2.0
    num_levels: int = 11
    max_kernel_radius: int = 256
    tail_fraction: float = 1e-3

    def __post_init__(self):
        checks = {
            "wavelength": self.wavelength,
            "numerical_aperture": self.numerical_aperture,
            "refractive_index": self.refractive_index,
            "pixel_pitch": self.pixel_pitch,
            "level_step": self.level_step,
            "tail_fraction": self.tail_fraction,
        }
        for name, value in checks.items():
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be positive and finite, got {value!r}")
        if int(self.num_levels) != self.num_levels or self.num_levels < 1:
            raise DomainError(f"num_levels must be an integer >= 1, got {self.num_levels!r}")
        if int(self.max_kernel_radius) != self.max_kernel_radius or self.max_kernel_radius < 1:
            raise DomainError(f"max_kernel_radius must be an integer >= 1, got {self.max_kernel_radius!r}")

    @property
    def wavenumber(self):
        """k = 2 pi / lambda in rad per micrometre."""
        return 2.0 * math.pi / (self.wavelength * 1e-3)

    @property
    def radial_scale(self):
        """Factor turning a lateral distance (um) into the Bessel argument at rho = 1."""
        return self.wavenumber * self.numerical_aperture / self.refractive_index

    def defocus_phase(self, z):
        """The dimensionless defocus a = k z NA^2 / n^2."""
        return self.wavenumber * z * (self.numerical_aperture / self.refractive_index) ** 2

    def level(self, index):
        return DefocusLevel.of(index, self)

    def levels(self):
        return [DefocusLevel.of(i, self) for i in range(self.num_levels)]


@dataclass(frozen=True)
class DefocusLevel:
    index: int
    depth: float

    @classmethod
    def of(cls, index, cfg: OpticalConfig):
        if int(index) != index or not 0 <= index < cfg.num_levels:
            raise DomainError(f"defocus level {index!r} not in [0, {cfg.num_levels - 1}]")
        index = int(index)
        return cls(index, index * cfg.level_step)


@dataclass(frozen=True, eq=False)
class PsfKernel:
    """A unit-sum, odd-sized PSF sampled at pixel centres."""

    level: DefocusLevel
    values: np.ndarray = field(repr=False)
    pixel_pitch: float

    @property
    def shape(self):
        return self.values.shape

    @property
    def radius(self):
        return self.values.shape[0] // 2

    def second_moment(self):
        """Mean squared distance from the centre, in pixels^2."""
        r = self.radius
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        return float(np.sum(self.values * (xx * xx + yy * yy)))


def bessel_j0(x):
    """J0 of a scalar or array argument.

    Power series up to |x| = 12, Hankel asymptotic expansion beyond; the
    absolute error is below 1e-12 on the whole real line.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("bessel_j0 requires finite input")
    out = kernels.j0(np.atleast_1d(arr))
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


@lru_cache(maxsize=None)
def gauss_legendre(nodes):
    """Composite Gauss-Legendre rule with ``nodes`` points on [0, 1].

    The interval is split into equal panels of a fixed order, so doubling
    ``nodes`` doubles the number of panels.
    """
    order = min(nodes, _PANEL_ORDER)
    panels = nodes // order
    if panels * order != nodes:
        raise ValueError(f"node count {nodes} is not a multiple of {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.arange(panels) / panels
    half = 0.5 / panels
    rho = (edges[:, None] + half * (x[None, :] + 1.0)).ravel()
    weights = np.tile(w * half, panels)
    rho.setflags(write=False)
    weights.setflags(write=False)
    return rho, weights


def _pupil_weights(depths, phases_scale, nodes):
    rho, w = gauss_legendre(nodes)
    phase = np.exp(-0.5j * np.outer(phases_scale * np.asarray(depths), rho * rho))
    return (phase * (w * rho)[None, :]).T  # (nodes, len(depths))


def _integrals(bessel_args, depths, cfg, nodes):
    """Complex pupil integrals, shape (len(bessel_args), len(depths))."""
    rho, _ = gauss_legendre(nodes)
    weights = _pupil_weights(depths, cfg.defocus_phase(1.0), nodes)
    out = np.empty((len(bessel_args), len(depths)), dtype=np.complex128)
    step = max(1, _BLOCK_ELEMENTS // nodes)
    for start in range(0, len(bessel_args), step):
        v = bessel_args[start:start + step]
        bes = kernels.j0(np.outer(v, rho))
        out[start:start + step] = bes @ weights
    return out


def _adaptive_integrals(bessel_args, depths, cfg):
    """Integrals converged per point by node doubling."""
    bessel_args = np.asarray(bessel_args, dtype=np.float64)
    result = np.empty((len(bessel_args), len(depths)), dtype=np.complex128)
    pending = np.arange(len(bessel_args))
    nodes = QUADRATURE_START_NODES
    previous = _integrals(bessel_args, depths, cfg, nodes)
    while pending.size:
        if 2 * nodes > QUADRATURE_MAX_NODES:
            raise ArithmeticError(
                f"PSF quadrature did not converge with {nodes} nodes "
                f"(largest Bessel argument {bessel_args[pending].max():.1f})")
        nodes *= 2
        current = _integrals(bessel_args[pending], depths, cfg, nodes)
        done = np.max(np.abs(current - previous), axis=1) <= QUADRATURE_TOL
        result[pending[done]] = current[done]
        pending = pending[~done]
        previous = current[~done]
    return result


def psf_value(r, z, cfg: OpticalConfig = OpticalConfig()):
    """PSF intensity at lateral distance ``r`` (um) and defocus ``z`` (um)."""
    if not math.isfinite(r) or r < 0:
        raise DomainError(f"radius must be finite and >= 0, got {r!r}")
    if not math.isfinite(z):
        raise DomainError(f"defocus must be finite, got {z!r}")
    value = _adaptive_integrals([cfg.radial_scale * r], [z], cfg)[0, 0]
    return float(value.real ** 2 + value.imag ** 2)


def psf_values_fixed(r, z, cfg: OpticalConfig, nodes):
    """PSF intensities with a fixed node count (used for convergence checks)."""
    args = cfg.radial_scale * np.atleast_1d(np.asarray(r, dtype=np.float64))
    vals = _integrals(args, [z], cfg, nodes)[:, 0]
    return vals.real ** 2 + vals.imag ** 2


def on_axis_psf(z, cfg: OpticalConfig = OpticalConfig()):
    """Closed-form h(0; z) = 4 sin^2(a/4) / a^2 with a the defocus phase."""
    a = cfg.defocus_phase(z)
    if a == 0:
        return 0.25
    return 4.0 * math.sin(0.25 * a) ** 2 / (a * a)


def sample_radius(cfg: OpticalConfig):
    return max(int(cfg.max_kernel_radius), SAMPLE_RADIUS)


@lru_cache(maxsize=16)
def _window_profiles(cfg: OpticalConfig):
    """PSF sampled over the sampling window for every level.

    Returns ``(squared_radius_index, profiles)`` where ``profiles[l, s]`` is
    the intensity of level ``l`` at squared pixel radius ``unique[s]``.
    """
    cap = sample_radius(cfg)
    i, j = np.meshgrid(np.arange(cap + 1), np.arange(cap + 1), indexing="ij")
    sq = (i * i + j * j)[j <= i]
    unique = np.unique(sq)
    args = cfg.radial_scale * cfg.pixel_pitch * np.sqrt(unique.astype(np.float64))
    depths = [lvl.depth for lvl in cfg.levels()]
    integ = _adaptive_integrals(args, depths, cfg)
    profiles = (integ.real ** 2 + integ.imag ** 2).T
    profiles.setflags(write=False)
    return unique, profiles


def _window(cfg, index):
    unique, profiles = _window_profiles(cfg)
    cap = sample_radius(cfg)
    yy, xx = np.mgrid[-cap:cap + 1, -cap:cap + 1]
    pos = np.searchsorted(unique, yy * yy + xx * xx)
    return profiles[index][pos]


def truncation_radius(window, tail_fraction):
    """Smallest half-width whose outside mass is below ``tail_fraction`` of the total."""
    cap = window.shape[0] // 2
    yy, xx = np.mgrid[-cap:cap + 1, -cap:cap + 1]
    cheb = np.maximum(np.abs(yy), np.abs(xx)).ravel()
    ring_mass = np.bincount(cheb, weights=window.ravel(), minlength=cap + 1)
    inside = np.cumsum(ring_mass)
    total = inside[-1]
    tail = total - inside
    ok = np.nonzero(tail < tail_fraction * total)[0]
    return int(ok[0])


def build_psf_kernel(level: DefocusLevel, cfg: OpticalConfig = OpticalConfig()):
    """Discretise the PSF of ``level`` into a unit-sum kernel.

    The PSF is sampled on a window of half-width ``sample_radius(cfg)``
    and cropped to the smallest square whose outside mass is below
    ``tail_fraction`` of the window mass.  A radius beyond
    ``max_kernel_radius`` (or one needing the whole window) raises
    :class:`KernelSizeError`.
    """
    if isinstance(level, int):
        level = cfg.level(level)
    DefocusLevel.of(level.index, cfg)
    window = _window(cfg, level.index)
    extent = window.shape[0] // 2
    radius = truncation_radius(window, cfg.tail_fraction)
    if radius > cfg.max_kernel_radius or radius >= extent:
        raise KernelSizeError(
            f"PSF of level {level.index} needs radius {radius}, above the "
            f"{cfg.max_kernel_radius}-pixel cap")
    values = window[extent - radius:extent + radius + 1, extent - radius:extent + radius + 1].copy()
    values /= values.sum()
    values.setflags(write=False)
    return PsfKernel(level, values, cfg.pixel_pitch)


def build_kernel_bank(cfg: OpticalConfig = OpticalConfig()):
    """Kernels for every level, indexed by level number."""
    return [build_psf_kernel(lvl, cfg) for lvl in cfg.levels()]


def export_kernel(kernel: PsfKernel, path):
    """Write ``kernel`` as a max-scaled 16-bit PGM plus a ``.txt`` sidecar."""
    from .io_formats import write_pgm

    scaled = np.rint(kernel.values / kernel.values.max() * 65535.0).astype(np.uint16)
    write_pgm(scaled, path)
    h, w = kernel.shape
    sidecar = f"{path}.txt"
    with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"level = {kernel.level.index}\n")
        fh.write(f"depth_um = {kernel.level.depth!r}\n")
        fh.write(f"pixel_pitch_um = {kernel.pixel_pitch!r}\n")
        fh.write(f"width = {w}\nheight = {h}\n")
    return sidecar
