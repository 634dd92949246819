"""The defocus-level classifier: architecture, forward/backward, loss."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import DimensionError, InputError, StateError
from .layers import BatchNorm, Conv3x3, Dense, Dropout, GlobalMaxPool, MaxPool2, ReLU


@dataclass(frozen=True)
class Architecture:
    """Plain conv stack: [conv3x3 -> BN -> ReLU] blocks, 2x2 pooling plus
    dropout after the blocks listed in ``pool_after`` (1-based), then global
    max pooling, dropout and one dense layer."""

    input_size: int = 84
    conv_widths: tuple = (64, 64, 128, 128, 256, 256, 512)
    pool_after: tuple = (2, 4, 6)
    num_classes: int = 12
    dropout_pool: float = 0.25
    dropout_dense: float = 0.5
    bn_momentum: float = 0.60
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        if not self.conv_widths:
            raise InputError("architecture needs at least one conv layer")
        if any(w < 1 for w in self.conv_widths):
            raise InputError(f"conv widths must be positive, got {self.conv_widths}")
        if any(not 1 <= p <= len(self.conv_widths) for p in self.pool_after):
            raise InputError(f"pool positions {self.pool_after} outside the conv stack")
        if self.num_classes < 2:
            raise InputError("need at least two classes")
        if not 0 <= self.bn_momentum < 1:
            raise InputError(f"batch-norm momentum must lie in [0, 1), got {self.bn_momentum}")
        for rate in (self.dropout_pool, self.dropout_dense):
            if not 0 <= rate < 1:
                raise InputError(f"dropout rate must lie in [0, 1), got {rate}")
        size = self.input_size
        for _ in self.pool_after:
            size //= 2
        if size < 1:
            raise InputError(f"input size {self.input_size} too small for {len(self.pool_after)} poolings")

    def scaled(self, factor):
        """Same topology with every conv width multiplied by ``factor``."""
        widths = tuple(max(1, int(round(w * factor))) for w in self.conv_widths)
        return replace(self, conv_widths=widths)

    @classmethod
    def miniature(cls, num_classes=5):
        """Two conv layers on 8x8 inputs, used for gradient checks."""
        return cls(input_size=8, conv_widths=(3, 4), pool_after=(1,), num_classes=num_classes)


class DelpNet:
    """Layer list plus the generator that drives initialisation and dropout."""

    def __init__(self, arch: Architecture = Architecture(), seed=0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.layers = []
        self.optimizer = None
        self.metadata = {}
        self._pending = None
        cin = 1
        for i, width in enumerate(arch.conv_widths, 1):
            conv = Conv3x3(f"conv{i}", cin, width, self.rng, self.dtype)
            conv.needs_input_grad = i > 1
            self.layers += [conv,
                            BatchNorm(f"bn{i}", width, arch.bn_momentum, arch.bn_epsilon, self.dtype),
                            ReLU(f"relu{i}")]
            if i in arch.pool_after:
                self.layers += [MaxPool2(f"pool{i}"), Dropout(f"drop{i}", arch.dropout_pool)]
            cin = width
        self.layers += [GlobalMaxPool("gmp"), Dropout("drop_dense", arch.dropout_dense),
                        Dense("dense", cin, arch.num_classes, self.rng, self.dtype)]

    # -- parameter bookkeeping ------------------------------------------------
    def named_parameters(self):
        """Trainable arrays in manifest order as ``(qualified_name, array)``."""
        return [(f"{l.name}.{k}", v) for l in self.layers for k, v in l.params.items()]

    def named_state(self):
        """Non-trainable arrays (batch-norm running statistics)."""
        return [(f"{l.name}.{k}", v) for l in self.layers for k, v in l.state.items()]

    def named_gradients(self):
        return [(f"{l.name}.{k}", l.grads[k]) for l in self.layers for k in l.params]

    def parameter_count(self):
        return int(sum(v.size for _, v in self.named_parameters()))

    @property
    def conv_layer_count(self):
        return sum(1 for l in self.layers if l.kind == "conv")

    # -- passes -----------------------------------------------------------------
    def forward(self, batch, mode="eval"):
        """Logits for an ``(N, 1, S, S)`` batch; ``mode`` is "train" or "eval"."""
        batch = np.asarray(batch)
        s = self.arch.input_size
        if batch.ndim != 4 or batch.shape[1:] != (1, s, s):
            raise DimensionError(f"expected input of shape (N, 1, {s}, {s}), got {batch.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, train, self.rng)
        self._pending = batch if train else None
        if not train:
            for layer in self.layers:
                layer.clear()
        return x

    def backward(self, dlogits, batch=None):
        """Backpropagate ``dL/dlogits``; fills ``layer.grads`` and returns them."""
        if self._pending is None:
            raise StateError("backward needs a preceding training-mode forward")
        if batch is not None and not (batch is self._pending or np.array_equal(batch, self._pending)):
            raise StateError("activation cache belongs to a different batch")
        d = np.asarray(dlogits, dtype=self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
            if d is None:
                break
        self._pending = None
        return dict(self.named_gradients())


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise InputError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    return labels.astype(np.int64)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits, labels, scale=1.0):
    labels = _check_labels(logits, labels)
    p = softmax(np.asarray(logits, dtype=np.float64))
    p[np.arange(len(labels)), labels] -= 1.0
    return p * (scale / len(labels))


def forward(model: DelpNet, batch, mode="eval"):
    return model.forward(batch, mode)


def backward(model: DelpNet, batch, labels, loss_scale=1.0, logits=None):
    """Gradients of ``loss_scale * cross_entropy`` for the cached train forward.

    Pass the ``logits`` of that forward; without them a fresh training
    forward runs first, drawing new dropout masks.
    """
    if logits is None:
        logits = model.forward(batch, "train")
    dlogits = cross_entropy_grad(logits, labels, loss_scale)
    return model.backward(dlogits, batch)


def predict_proba(model: DelpNet, patches, batch_size=256):
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None, None]
    elif patches.ndim == 3:
        patches = patches[:, None]
    out = []
    for start in range(0, len(patches), batch_size):
        out.append(softmax(model.forward(patches[start:start + batch_size], "eval").astype(np.float64)))
    if not out:
        return np.zeros((0, model.arch.num_classes))
    return np.concatenate(out)


def predict(model: DelpNet, patch):
    """Label (argmax, lowest index on ties) and class probabilities of one patch."""
    patch = np.asarray(patch)
    s = model.arch.input_size
    if patch.shape not in ((s, s), (1, s, s), (1, 1, s, s)):
        raise DimensionError(f"expected a {s}x{s} patch, got shape {patch.shape}")
    probs = predict_proba(model, patch.reshape(1, 1, s, s))[0]
    return int(np.argmax(probs)), probs
