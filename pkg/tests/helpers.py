"""Fixture builders shared by several test modules."""

from defocus_restore.io_formats import write_csv
from defocus_restore.phantoms import two_depth_scene


def boundary_seed(levels, start=0, threshold=200):
    """First seed whose two-depth frame has signal on both sides of the midline.

    A boundary made of background only says nothing about seams, so the
    two columns next to it must rise above ``threshold`` grey levels.  The
    rule looks at the observed frame only, never at a restoration.
    """
    for seed in range(start, start + 50):
        observed, _ = two_depth_scene(levels=levels, seed=seed, gap=0)
        mid = observed.shape[1] // 2
        if observed[:, mid - 1].max() > threshold and observed[:, mid].max() > threshold:
            return seed
    raise AssertionError("no fixture seed found")


def split_labels(grid, mid, la, lb, patch_size=84):
    """Patches lying wholly left of ``mid`` carry ``la``, all others ``lb``."""
    return [la if x + patch_size <= mid else lb for _, x in grid]


def write_label_map(path, grid, labels):
    write_csv(str(path), ["offset_y", "offset_x", "label", "bg"], [[y, x, lab, 0] for (y, x), lab in zip(grid, labels)])
