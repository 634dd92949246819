"""Model files: a text manifest plus a flat little-endian float32 blob.

A saved model is a directory holding ``manifest.txt`` and ``params.bin``.
The manifest lists the architecture, every array (trainable parameters
first, then batch-norm running statistics) with its shape, the generator
state and free-form metadata.  The blob is those arrays concatenated in
manifest order.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import CorruptionError, FormatError
from ..io_formats import ensure_dir
from .network import Architecture, DelpNet

MANIFEST = "manifest.txt"
BLOB = "params.bin"
MAGIC = "defocus-restore-model 1"


def _arch_to_json(arch: Architecture):
    return json.dumps({
        "input_size": arch.input_size,
        "conv_widths": list(arch.conv_widths),
        "pool_after": list(arch.pool_after),
        "num_classes": arch.num_classes,
        "dropout_pool": arch.dropout_pool,
        "dropout_dense": arch.dropout_dense,
        "bn_momentum": arch.bn_momentum,
        "bn_epsilon": arch.bn_epsilon,
    }, sort_keys=True)


def _arch_from_json(text):
    d = json.loads(text)
    d["conv_widths"] = tuple(d["conv_widths"])
    d["pool_after"] = tuple(d["pool_after"])
    return Architecture(**d)


def save_model(model: DelpNet, path, metadata=None):
    """Write ``model`` to the directory ``path``; arrays are stored as float32.

    ``metadata`` is a flat dict of JSON-serialisable values kept alongside
    (class mapping, normalisation mode, training settings).
    """
    ensure_dir(path)
    arrays = model.named_parameters() + model.named_state()
    lines = [MAGIC,
             f"architecture {_arch_to_json(model.arch)}",
             f"conv_layers {model.conv_layer_count}",
             f"seed {model.seed}",
             f"rng {json.dumps(model.rng.bit_generator.state, sort_keys=True)}",
             f"metadata {json.dumps(metadata or {}, sort_keys=True)}"]
    for kind, items in (("param", model.named_parameters()), ("state", model.named_state())):
        for name, a in items:
            lines.append(f"{kind} {name} {','.join(str(s) for s in a.shape)}")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    with open(os.path.join(path, BLOB), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse ``manifest.txt`` into a dict; raises FormatError on bad syntax."""
    fname = os.path.join(path, MANIFEST)
    try:
        with open(fname, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise FormatError(f"{path} has no {MANIFEST}") from None
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise FormatError(f"{fname}: not a model manifest", 0)
    out = {"arrays": []}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        try:
            if key in ("param", "state"):
                name, shape = rest.split(" ")
                dims = tuple(int(s) for s in shape.split(",")) if shape else ()
                out["arrays"].append((key, name, dims))
            elif key in ("architecture", "rng", "metadata"):
                out[key] = json.loads(rest)
            elif key in ("conv_layers", "seed"):
                out[key] = int(rest)
            else:
                raise ValueError(f"unknown manifest key {key!r}")
        except ValueError as exc:
            raise FormatError(f"{fname}: {exc}", offset) from None
        offset += len(line.encode("utf-8")) + 1
    for key in ("architecture", "rng", "conv_layers"):
        if key not in out:
            raise FormatError(f"{fname}: missing {key!r} entry")
    return out


def load_model(path):
    """Rebuild a saved model; the result reproduces the saved one bit for bit."""
    manifest = read_manifest(path)
    try:
        arch = _arch_from_json(json.dumps(manifest["architecture"]))
    except (TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: bad architecture entry: {exc}") from None
    if manifest["conv_layers"] != len(arch.conv_widths):
        raise CorruptionError(
            f"{path}: manifest declares {manifest['conv_layers']} conv layers "
            f"but the architecture has {len(arch.conv_widths)}")
    model = DelpNet(arch, seed=manifest.get("seed", 0), dtype=np.float32)
    targets = [("param", n, a) for n, a in model.named_parameters()]
    targets += [("state", n, a) for n, a in model.named_state()]
    listed = manifest["arrays"]
    expected = [(k, n, a.shape) for k, n, a in targets]
    if listed != expected:
        raise CorruptionError(f"{path}: manifest array list does not match the architecture")
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    need = 4 * sum(a.size for _, _, a in targets)
    if len(blob) != need:
        raise CorruptionError(f"{path}: {BLOB} holds {len(blob)} bytes, manifest needs {need}")
    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for _, _, a in targets:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    model.rng.bit_generator.state = manifest["rng"]
    model.metadata = manifest.get("metadata", {})
    return model
