"""Labeled patch dataset: focus selection, splitting, cropping, "bg" labels.

A patch store on disk is one directory per split (``train``, ``val``,
``test``).  Each directory holds the raw 16-bit crops as PGM files and an
``index.csv`` with columns ``id,source,level,label,offset_x,offset_y,seed``.
Normalisation happens at load time, so stored patches stay bit-exact.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError
from .forward_model import as_image16, synthesize_defocused
from .io_formats import ensure_dir, read_csv, read_pgm, write_csv, write_pgm
from .optics import OpticalConfig, build_psf_kernel
from .settings import thread_limit

PATCH_SIZE = 84
CROPS_PER_IMAGE = 20
SPLIT_RATIOS = (0.75, 0.15, 0.10)
SPLITS = ("train", "val", "test")
BG_MAX_VALUE = 230
BG_MAX_RANGE = 30
INDEX_HEADER = ["id", "source", "level", "label", "offset_x", "offset_y", "seed"]


def bg_label(cfg: OpticalConfig = OpticalConfig()):
    """Class index of the background class (one past the last defocus level)."""
    return cfg.num_levels


def derive_seed(base, *keys):
    """Deterministic 32-bit child seed for a (base, key...) tuple."""
    words = [int(base) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def select_in_focus(stack):
    """Index of the frame with the largest intensity standard deviation."""
    if len(stack) == 0:
        raise InputError("focus selection needs at least one frame")
    shape = np.shape(stack[0])
    stds = []
    for frame in stack:
        if np.shape(frame) != shape:
            raise DimensionError("all frames of a stack must share one shape")
        stds.append(float(np.std(np.asarray(frame, dtype=np.float64))))
    return int(np.argmax(stds))


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def assignment(self):
        return {i: name for name in SPLITS for i in getattr(self, name)}


def split_sizes(n, ratios=SPLIT_RATIOS):
    """Train and val sizes rounded to nearest, remainder to test, none empty."""
    train = max(1, math.floor(n * ratios[0] + 0.5))
    val = max(1, math.floor(n * ratios[1] + 0.5))
    while train + val > n - 1:
        if train > val:
            train -= 1
        else:
            val -= 1
    return train, val, n - train - val


def split_dataset(ids, ratios=SPLIT_RATIOS, seed=0):
    ids = list(ids)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    if len(ids) < 3:
        raise InputError(f"need at least 3 images to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise InputError("image identifiers must be unique")
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


def crop_patches(image, count=CROPS_PER_IMAGE, size=PATCH_SIZE, seed=0):
    """Uniform random top-left offsets ``(x, y)`` of ``size``-square crops."""
    h, w = np.shape(image)
    if h < size or w < size:
        raise DimensionError(f"image {w}x{h} is smaller than the {size}x{size} patch")
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, w - size + 1, size=count)
    ys = rng.integers(0, h - size + 1, size=count)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def label_bg(patch, max_value=BG_MAX_VALUE, max_range=BG_MAX_RANGE):
    """True if a raw 16-bit patch is essentially empty background."""
    patch = np.asarray(patch)
    hi = int(patch.max())
    lo = int(patch.min())
    return hi < max_value and (hi - lo) < max_range


def normalize_patch(patch, mode="patch"):
    """Scale to [0, 1]: per-patch min-max (``"patch"``) or by 65535 (``"global"``)."""
    p = np.asarray(patch, dtype=np.float64)
    if mode == "global":
        return p / 65535.0
    if mode != "patch":
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


@dataclass
class LabeledPatch:
    pixels: np.ndarray = field(repr=False)
    label: int
    level: int
    source: str
    offset: tuple
    seed: int
    id: int = -1

    def normalized(self, mode="patch"):
        return normalize_patch(self.pixels, mode)


@dataclass
class PatchStore:
    """In-memory patch collection keyed by split name."""

    splits: dict
    split: DatasetSplit | None = None

    def __len__(self):
        return sum(len(v) for v in self.splits.values())

    def labels(self, name):
        return np.array([p.label for p in self.splits[name]], dtype=np.int64)

    def write(self, root):
        for name in SPLITS:
            directory = ensure_dir(os.path.join(root, name))
            rows = []
            for p in self.splits.get(name, []):
                write_pgm(p.pixels, os.path.join(directory, f"{p.id:06d}.pgm"))
                rows.append([p.id, p.source, p.level, p.label, p.offset[0], p.offset[1], p.seed])
            write_csv(os.path.join(directory, "index.csv"), INDEX_HEADER, rows)

    @classmethod
    def read(cls, root, splits=SPLITS):
        out = {}
        for name in splits:
            directory = os.path.join(root, name)
            header, rows = read_csv(os.path.join(directory, "index.csv"))
            if header != INDEX_HEADER:
                raise InputError(f"{directory}/index.csv has header {header}, expected {INDEX_HEADER}")
            patches = []
            for row in rows:
                pid, source, level, label, ox, oy, seed = row
                pixels = read_pgm(os.path.join(directory, f"{int(pid):06d}.pgm"))
                patches.append(LabeledPatch(pixels, int(label), int(level), source,
                                            (int(ox), int(oy)), int(seed), int(pid)))
            out[name] = patches
        return cls(out)


def patches_to_arrays(patches, no_bg=False, normalization="patch", dtype=np.float32):
    """Stack patches into an ``(N, 1, S, S)`` array and a label vector.

    With ``no_bg`` the background class is dropped and every patch keeps
    its defocus level as label.
    """
    if not patches:
        return np.zeros((0, 1, PATCH_SIZE, PATCH_SIZE), dtype=dtype), np.zeros(0, dtype=np.int64)
    x = np.stack([normalize_patch(p.pixels, normalization) for p in patches])
    y = np.array([p.level if no_bg else p.label for p in patches], dtype=np.int64)
    return x[:, None].astype(dtype), y


def build_dataset(images, cfg: OpticalConfig = OpticalConfig(), seed=0, gain=1.0, levels=None,
                  crops=CROPS_PER_IMAGE, size=PATCH_SIZE, ratios=SPLIT_RATIOS,
                  bg_max_value=BG_MAX_VALUE, bg_max_range=BG_MAX_RANGE):
    """Synthesize, crop and label patches for every image and level.

    ``images`` maps image identifiers to in-focus ``uint16`` frames.  Each
    (image, level) pair gets its own noise and crop seeds derived from
    ``seed``; crops are drawn independently per level.
    """
    ids = list(images)
    split = split_dataset(ids, ratios, seed)
    assignment = split.assignment()
    if levels is None:
        levels = range(cfg.num_levels)
    levels = [cfg.level(i) for i in levels]
    bank = {lvl.index: build_psf_kernel(lvl, cfg) for lvl in levels if lvl.index > 0}
    bg = bg_label(cfg)

    def job(task):
        image_id, lvl = task
        frame = as_image16(images[image_id])
        noise_seed = derive_seed(seed, "noise", image_id, lvl.index)
        crop_seed = derive_seed(seed, "crop", image_id, lvl.index)
        degraded = synthesize_defocused(frame, lvl, cfg, gain, noise_seed, kernel=bank.get(lvl.index))
        out = []
        for ox, oy in crop_patches(degraded, crops, size, crop_seed):
            raw = degraded[oy:oy + size, ox:ox + size].copy()
            label = bg if label_bg(raw, bg_max_value, bg_max_range) else lvl.index
            out.append(LabeledPatch(raw, label, lvl.index, str(image_id), (ox, oy), crop_seed))
        return assignment[image_id], out

    tasks = [(image_id, lvl) for image_id in ids for lvl in levels]
    splits = {name: [] for name in SPLITS}
    with ThreadPoolExecutor(max_workers=thread_limit()) as pool:
        for name, patches in pool.map(job, tasks):
            splits[name].extend(patches)
    next_id = 0
    for name in SPLITS:
        for p in splits[name]:
            p.id = next_id
            next_id += 1
    return PatchStore(splits, split)


def synthesis_manifest(images_paths, levels, seed, gain):
    """Lines ``source level seed gain`` describing every synthesized frame."""
    lines = []
    for image_id, path in images_paths.items():
        for lvl in levels:
            lines.append(f"{path} {lvl} {derive_seed(seed, 'noise', image_id, lvl)} {gain!r}\n")
    return "".join(lines)
