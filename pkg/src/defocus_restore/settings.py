"""Runtime settings: thread cap and the ``key = value`` pipeline config."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

THREADS_ENV = "DEFOCUS_RESTORE_THREADS"


def thread_limit():
    """Worker count allowed by ``DEFOCUS_RESTORE_THREADS`` (default: all CPUs)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    cpus = os.cpu_count() or 1
    if not raw:
        return cpus
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


@dataclass
class PipelineConfig:
    """Flat view over the optical, dataset, training and restoration knobs."""

    # optics
    wavelength: float = 451.0
    numerical_aperture: float = 0.5
    refractive_index: float = 1.0
    pixel_pitch: float = 0.65
    level_step: float = 2.0
    num_levels: int = 11
    max_kernel_radius: int = 256
    tail_fraction: float = 1e-3
    # synthesis / dataset
    gain: float = 1.0
    crops_per_image: int = 20
    patch_size: int = 84
    split_train: float = 0.75
    split_val: float = 0.15
    split_test: float = 0.10
    bg_max_value: int = 230
    bg_max_range: int = 30
    normalization: str = "patch"
    levels: str = ""
    # training
    learning_rate: float = 6e-5
    lr_decay: float = 5e-6
    batch_size: int = 128
    epochs: int = 30
    bn_momentum: float = 0.60
    dropout_pool: float = 0.25
    dropout_dense: float = 0.5
    width_scale: float = 1.0
    # restoration
    stride: int = 42
    iterations: int = 30
    rl_tolerance: float = 0.0
    seed: int = 0

    _sources: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    def set(self, key, value, source="flag"):
        types = {f.name: f.type for f in fields(self)}
        if key not in self.keys():
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = types[key]
        try:
            if kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
        setattr(self, key, parsed)
        self._sources[key] = source

    def update(self, **overrides):
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
        return self

    @classmethod
    def load(cls, path):
        cfg = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                cfg.set(key, value, source=str(path))
        return cfg

    def dump(self):
        return "".join(f"{key} = {getattr(self, key)}\n" for key in self.keys())

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dump())

    def optical(self):
        from .optics import OpticalConfig

        names = {f.name for f in dataclasses.fields(OpticalConfig)}
        return OpticalConfig(**{k: getattr(self, k) for k in names})
