"""Command-line entry point: ``defocus-restore <subcommand> ...``.

Exit status: 0 on success, 2 for bad arguments or configuration, 3 for
unreadable or inconsistent data, 4 when training diverges.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, DefocusRestoreError, DivergenceError, DomainError, InputError, KernelSizeError
from .io_formats import ensure_dir, read_csv, read_pgm, write_csv, write_pgm
from .settings import PipelineConfig

log = logging.getLogger("defocus_restore")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class UsageError(DefocusRestoreError):
    """Argument combination rejected by a subcommand."""


def exit_code_for(exc):
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, (UsageError, ConfigError, DomainError, KernelSizeError)):
        return EXIT_USAGE
    return EXIT_DATA


# -- configuration plumbing ---------------------------------------------------

def resolve_config(args, mapping):
    """Defaults, then ``--config FILE``, then explicit flags; returns the config."""
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)
    return cfg


def write_resolved(cfg, directory, name="config.txt"):
    ensure_dir(directory)
    cfg.write(os.path.join(directory, name))


def parse_levels(text, cfg):
    if not text:
        return list(range(cfg.num_levels))
    try:
        levels = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"levels must be comma-separated integers, got {text!r}") from None
    for lv in levels:
        cfg.optical().level(lv)
    if len(set(levels)) != len(levels) or not levels:
        raise UsageError(f"levels must be distinct and non-empty, got {text!r}")
    return sorted(levels)


def list_images(directory):
    """In-focus frames of ``directory``: ``*.pgm`` files, or one z-stack per subdirectory.

    For a stack the frame with the largest intensity spread is used.
    """
    from .dataset import select_in_focus

    if not os.path.isdir(directory):
        raise InputError(f"{directory} is not a directory")
    images, sources = {}, {}
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if os.path.isdir(path):
            frames = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
            if not frames:
                continue
            stack = [read_pgm(os.path.join(path, f)) for f in frames]
            pick = select_in_focus(stack)
            images[name] = stack[pick]
            sources[name] = f"{name}/{frames[pick]}"
        elif name.endswith(".pgm"):
            key = name[:-4]
            images[key] = read_pgm(path)
            sources[key] = name
    if not images:
        raise InputError(f"{directory} holds no .pgm images")
    return images, sources


# -- subcommands ----------------------------------------------------------------

def cmd_psf(args):
    from .optics import build_psf_kernel, export_kernel

    cfg = resolve_config(args, {})
    optical = cfg.optical()
    if args.all:
        out_dir = ensure_dir(args.out)
        for lvl in optical.levels():
            export_kernel(build_psf_kernel(lvl, optical), os.path.join(out_dir, f"psf_level{lvl.index:02d}.pgm"))
        write_resolved(cfg, out_dir)
        return EXIT_OK
    if args.level is None:
        raise UsageError("psf needs --level or --all")
    kernel = build_psf_kernel(optical.level(args.level), optical)
    parent = os.path.dirname(os.path.abspath(args.out))
    ensure_dir(parent)
    export_kernel(kernel, args.out)
    write_resolved(cfg, parent, os.path.basename(args.out) + ".config.txt")
    log.info("level %d kernel %dx%d written to %s", args.level, *kernel.shape, args.out)
    return EXIT_OK


def cmd_phantoms(args):
    from .phantoms import nuclei_phantom

    out = ensure_dir(args.out)
    for i in range(args.count):
        frame = nuclei_phantom(args.height, args.width, seed=args.seed * 100003 + i, density=args.density)
        write_pgm(frame, os.path.join(out, f"img{i:03d}.pgm"))
    return EXIT_OK


SYNTH_FLAGS = {"seed": "seed", "gain": "gain", "crops": "crops_per_image", "levels": "levels",
               "bg_max_value": "bg_max_value", "bg_max_range": "bg_max_range"}


def cmd_synth(args):
    from .dataset import build_dataset, synthesis_manifest

    cfg = resolve_config(args, SYNTH_FLAGS)
    optical = cfg.optical()
    levels = parse_levels(cfg.levels, cfg)
    images, sources = list_images(args.input)
    store = build_dataset(images, optical, seed=cfg.seed, gain=cfg.gain, levels=levels,
                          crops=cfg.crops_per_image, size=cfg.patch_size,
                          ratios=(cfg.split_train, cfg.split_val, cfg.split_test),
                          bg_max_value=cfg.bg_max_value, bg_max_range=cfg.bg_max_range)
    out = ensure_dir(args.out)
    store.write(out)
    with open(os.path.join(out, "synthesis.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(synthesis_manifest(sources, levels, cfg.seed, cfg.gain))
    write_resolved(cfg, out)
    log.info("patches: %s", {k: len(v) for k, v in store.splits.items()})
    return EXIT_OK


TRAIN_FLAGS = {"epochs": "epochs", "seed": "seed", "bn_momentum": "bn_momentum", "lr": "learning_rate",
               "lr_decay": "lr_decay", "batch_size": "batch_size", "width_scale": "width_scale",
               "normalization": "normalization"}


def cmd_train(args):
    from .dataset import PatchStore, bg_label, patches_to_arrays
    from .delpnet import Architecture, DelpNet, TrainConfig, fit
    from .delpnet.serialization import save_model

    cfg = resolve_config(args, TRAIN_FLAGS)
    optical = cfg.optical()
    store = PatchStore.read(args.data)
    train = patches_to_arrays(store.splits["train"], args.no_bg, cfg.normalization)
    val = patches_to_arrays(store.splits["val"], args.no_bg, cfg.normalization)
    num_classes = optical.num_levels if args.no_bg else optical.num_levels + 1
    arch = Architecture(input_size=cfg.patch_size, num_classes=num_classes, bn_momentum=cfg.bn_momentum,
                        dropout_pool=cfg.dropout_pool, dropout_dense=cfg.dropout_dense)
    if cfg.width_scale != 1.0:
        arch = arch.scaled(cfg.width_scale)
    model = DelpNet(arch, seed=cfg.seed)
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, lr_decay=cfg.lr_decay, batch_size=cfg.batch_size,
                       epochs=cfg.epochs, bn_momentum=cfg.bn_momentum, dropout_pool=cfg.dropout_pool,
                       dropout_dense=cfg.dropout_dense, seed=cfg.seed)
    out = ensure_dir(args.out)
    fit(model, train, val, tcfg, log_path=os.path.join(out, "train_log.csv"))
    save_model(model, out, metadata={
        "bg_label": None if args.no_bg else bg_label(optical),
        "num_levels": optical.num_levels,
        "normalization": cfg.normalization,
        "no_bg": bool(args.no_bg),
    })
    write_resolved(cfg, out)
    return EXIT_OK


def _load_model(path):
    from .delpnet.serialization import load_model

    return load_model(path)


def cmd_predict(args):
    from .dataset import PatchStore, patches_to_arrays
    from .delpnet import predict_proba

    model = _load_model(args.model)
    meta = model.metadata
    store = PatchStore.read(args.data, splits=(args.split,))
    patches = store.splits[args.split]
    x, y = patches_to_arrays(patches, meta.get("no_bg", False), meta.get("normalization", "patch"))
    probs = predict_proba(model, x)
    pred = np.argmax(probs, axis=1)
    k = probs.shape[1]
    rows = [[p.id, int(t), int(q), *[float(v) for v in pr]] for p, t, q, pr in zip(patches, y, pred, probs)]
    parent = os.path.dirname(os.path.abspath(args.out))
    ensure_dir(parent)
    write_csv(args.out, ["id", "label", "predicted"] + [f"p{i}" for i in range(k)], rows)
    return EXIT_OK


RESTORE_FLAGS = {"stride": "stride", "iterations": "iterations", "tolerance": "rl_tolerance"}


def cmd_deconvolve(args):
    from .restore import awdvd, grid_offsets, padded_extent, plan_restoration

    cfg = resolve_config(args, RESTORE_FLAGS)
    optical = cfg.optical()
    image = read_pgm(args.input)
    sources = [args.model, args.level, args.labels_in]
    if sum(v is not None for v in sources) != 1:
        raise UsageError("deconvolve needs exactly one of --model, --level or --labels-in")
    if args.labels_in is not None:
        padded = tuple(padded_extent(d, cfg.patch_size, cfg.stride) for d in image.shape)
        grid = grid_offsets(padded, cfg.patch_size, cfg.stride)
        plan = plan_restoration(image.shape, stride=cfg.stride, bg_label=optical.num_levels,
                                labels=_read_label_map(args.labels_in, grid))
    elif args.model is not None:
        model = _load_model(args.model)
        plan = plan_restoration(image, model, cfg.stride,
                                normalization=model.metadata.get("normalization", "patch"))
    else:
        optical.level(args.level)
        plan = plan_restoration(image.shape, stride=cfg.stride, labels=args.level)
    restored = awdvd(image, plan, optical, cfg.iterations, depth_invariant=args.depth_invariant,
                     tolerance=cfg.rl_tolerance)
    parent = ensure_dir(os.path.dirname(os.path.abspath(args.output)))
    write_pgm(restored, args.output)
    labels_path = args.labels_out or args.output + ".labels.csv"
    rows = [[y, x, int(lab), int(plan.is_bg(k))] for k, ((y, x), lab) in enumerate(zip(plan.grid, plan.labels))]
    write_csv(labels_path, ["offset_y", "offset_x", "label", "bg"], rows)
    write_resolved(cfg, parent, os.path.basename(args.output) + ".config.txt")
    return EXIT_OK


def _read_label_map(path, grid):
    """Per-patch labels from a CSV in the ``--labels-out`` format, in grid order."""
    header, rows = read_csv(path)
    if header[:3] != ["offset_y", "offset_x", "label"]:
        raise InputError(f"{path}: expected columns offset_y,offset_x,label")
    try:
        table = {(int(r[0]), int(r[1])): int(r[2]) for r in rows}
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed row ({exc})") from None
    missing = [g for g in grid if g not in table]
    if missing or len(table) != len(grid):
        raise InputError(f"{path}: label map does not match the {len(grid)}-patch grid "
                         f"(first missing offset: {missing[0] if missing else None})")
    return [table[g] for g in grid]


def _read_predictions(path):
    header, rows = read_csv(path)
    if header[:3] != ["id", "label", "predicted"]:
        raise InputError(f"{path}: expected columns id,label,predicted,p0..")
    if not rows:
        raise InputError(f"{path}: no predictions")
    try:
        truth = np.array([int(r[1]) for r in rows])
        pred = np.array([int(r[2]) for r in rows])
        probs = np.array([[float(v) for v in r[3:]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed row ({exc})") from None
    return truth, pred, probs


def cmd_evaluate(args):
    from .evaluation import PSNR_HEADER, SSIM_HEADER, restoration_experiment, summarize_by_level
    from .metrics import ConfusionMatrix, adjacency_error_fraction, classification_report, topk_curve

    cfg = resolve_config(args, {"seed": "seed", "gain": "gain", **RESTORE_FLAGS})
    if args.predictions is None and args.images is None:
        raise UsageError("evaluate needs --predictions and/or --images")
    out = ensure_dir(args.out)
    if args.predictions is not None:
        truth, pred, probs = _read_predictions(args.predictions)
        k = probs.shape[1] if probs.size else int(max(truth.max(), pred.max()) + 1)
        matrix = ConfusionMatrix.from_labels(truth, pred, k)
        classes = np.unique(truth) if args.present_classes else None
        report = classification_report(matrix, classes)
        defocus = [c for c in np.unique(truth) if c < cfg.num_levels]
        report["adjacent_error_fraction"] = adjacency_error_fraction(matrix, defocus)
        write_csv(os.path.join(out, "report.csv"), list(report), [list(report.values())])
        write_csv(os.path.join(out, "confusion.csv"), ["truth"] + [str(i) for i in range(k)],
                  [[i, *row] for i, row in enumerate(matrix.counts)])
        if probs.size:
            curve = topk_curve(probs, truth, k)
            write_csv(os.path.join(out, "topk.csv"), ["k", "accuracy"],
                      [[i + 1, v] for i, v in enumerate(curve)])
    if args.images is not None:
        images, _ = list_images(args.images)
        classifier = _load_model(args.model) if args.model else None
        levels = parse_levels(args.levels, cfg) if args.levels else list(range(1, cfg.num_levels))
        norm = classifier.metadata.get("normalization", "patch") if classifier else "patch"
        samples = restoration_experiment(images, cfg.optical(), levels, cfg.seed, cfg.gain, cfg.stride,
                                         cfg.iterations, classifier, norm, cfg.rl_tolerance)
        psnr_rows, ssim_rows = summarize_by_level(samples)
        write_csv(os.path.join(out, "psnr_by_level.csv"), PSNR_HEADER, psnr_rows)
        write_csv(os.path.join(out, "ssim_by_level.csv"), SSIM_HEADER, ssim_rows)
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_plot(args):
    from .plotting import plot_csv

    ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    plot_csv(args.csv, args.out, args.kind, args.columns.split(",") if args.columns else None)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="defocus-restore", formatter_class=fmt,
                                     description="Depth-variant deconvolution of defocused widefield images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="key = value settings file")
        p.set_defaults(func=func)
        return p

    p = add("psf", cmd_psf, "Generate the PSF kernel of one defocus level (PGM plus sidecar).")
    p.add_argument("--level", type=int, default=None, help="defocus level index")
    p.add_argument("--all", action="store_true", help="write every level into the --out directory")
    p.add_argument("--out", required=True, help="output PGM path (directory with --all)")

    p = add("phantoms", cmd_phantoms, "Write synthetic in-focus nucleus frames.")
    p.add_argument("--count", type=int, default=10, help="number of frames")
    p.add_argument("--height", type=int, default=168, help="frame height")
    p.add_argument("--width", type=int, default=168, help="frame width")
    p.add_argument("--density", type=float, default=0.5, help="relative nucleus density")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", required=True, help="output directory")

    p = add("synth", cmd_synth, "Synthesize defocused frames and a labeled patch store.")
    p.add_argument("--input", required=True, help="directory of in-focus PGMs or z-stack folders")
    p.add_argument("--out", required=True, help="patch store directory")
    p.add_argument("--seed", type=int, default=None, help="base seed (config: seed, default 0)")
    p.add_argument("--gain", type=float, default=None, help="photons per grey level (config default 1.0)")
    p.add_argument("--crops", type=int, default=None, help="crops per image and level (config default 20)")
    p.add_argument("--levels", default=None, help="comma-separated levels (config default: all)")
    p.add_argument("--bg-max-value", type=int, default=None, help="bg rule: max pixel below this (default 230)")
    p.add_argument("--bg-max-range", type=int, default=None, help="bg rule: max-min below this (default 30)")

    p = add("train", cmd_train, "Train the defocus-level classifier.")
    p.add_argument("--data", required=True, help="patch store directory")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--epochs", type=int, default=None, help="epochs (config default 30)")
    p.add_argument("--seed", type=int, default=None, help="init/dropout/shuffle seed (default 0)")
    p.add_argument("--no-bg", action="store_true", help="drop the background class; label by level")
    p.add_argument("--bn-momentum", type=float, default=None, help="batch-norm momentum (default 0.6)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 6e-5)")
    p.add_argument("--lr-decay", type=float, default=None, help="inverse-time decay per step (default 5e-6)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default 128)")
    p.add_argument("--width-scale", type=float, default=None, help="conv width multiplier (default 1.0)")
    p.add_argument("--normalization", default=None, choices=["patch", "global"],
                   help="patch scaling (default patch)")

    p = add("predict", cmd_predict, "Classify the patches of one split of a patch store.")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", required=True, help="patch store directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to classify")
    p.add_argument("--out", required=True, help="predictions CSV")

    p = add("deconvolve", cmd_deconvolve, "Restore a frame patch by patch with blended reassembly.")
    p.add_argument("--input", required=True, help="16-bit PGM frame")
    p.add_argument("--model", default=None, help="model directory used to classify patches")
    p.add_argument("--level", type=int, default=None, help="known level for every patch instead of a model")
    p.add_argument("--labels-in", default=None,
                   help="per-patch label CSV (offset_y,offset_x,label) instead of a model; "
                        "label num_levels marks bg")
    p.add_argument("--stride", type=int, default=None, help="grid stride in pixels (default 42)")
    p.add_argument("--iterations", type=int, default=None, help="Richardson-Lucy iterations (default 30)")
    p.add_argument("--tolerance", type=float, default=None, help="early-stop relative change (default 0: off)")
    p.add_argument("--depth-invariant", action="store_true", help="use the level-0 PSF for every patch")
    p.add_argument("--output", required=True, help="output PGM")
    p.add_argument("--labels-out", default=None, help="label map CSV (default OUTPUT.labels.csv)")

    p = add("evaluate", cmd_evaluate, "Classification tables and per-level restoration quality.")
    p.add_argument("--predictions", default=None, help="CSV written by predict")
    p.add_argument("--present-classes", action="store_true",
                   help="macro-average only over classes present in the ground truth")
    p.add_argument("--images", default=None, help="in-focus frames for the restoration experiment")
    p.add_argument("--model", default=None, help="classify patches instead of using true levels")
    p.add_argument("--levels", default=None, help="levels for the restoration experiment (default 1..10)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (default 0)")
    p.add_argument("--gain", type=float, default=None, help="photons per grey level (default 1.0)")
    p.add_argument("--stride", type=int, default=None, help="grid stride (default 42)")
    p.add_argument("--iterations", type=int, default=None, help="Richardson-Lucy iterations (default 30)")
    p.add_argument("--tolerance", type=float, default=None, help="early-stop relative change (default 0)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("plot", cmd_plot, "Render a CSV table as a PPM line or bar chart.")
    p.add_argument("--csv", required=True, help="input table; first column is x")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--kind", default="line", choices=["line", "bar"], help="chart type")
    p.add_argument("--columns", default=None, help="comma-separated series to draw (default: all)")
    return parser


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DefocusRestoreError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"defocus-restore {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
