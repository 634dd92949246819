"""Layers with explicit forward and backward passes.

Activations are NHWC internally.  Every layer keeps only what its own
backward pass needs from the most recent training-mode forward.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import StateError

# Size bound (elements) of one unfolded block of conv input.
_CONV_BLOCK_ELEMENTS = 1 << 22
# Unfolded inputs up to this size are kept from forward to backward.
_CONV_CACHE_ELEMENTS = 1 << 26


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}
        self.state = {}

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def clear(self):
        pass


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding, with bias."""

    kind = "conv"

    def __init__(self, name, cin, cout, rng, dtype):
        super().__init__(name)
        self.cin, self.cout = cin, cout
        self.params["weight"] = glorot_uniform(rng, (3, 3, cin, cout), 9 * cin, 9 * cout, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.needs_input_grad = True
        self._x = None
        self._cols = None

    def output_shape(self, shape):
        return shape[:3] + (self.cout,)

    def _blocks(self, x):
        n, h, w, _ = x.shape
        per_sample = h * w * 9 * self.cin
        step = max(1, _CONV_BLOCK_ELEMENTS // per_sample)
        for start in range(0, n, step):
            yield start, x[start:start + step]

    def forward(self, x, train, rng):
        n, h, w, _ = x.shape
        wm = self.params["weight"].reshape(9 * self.cin, self.cout)
        y = np.empty((n, h, w, self.cout), dtype=x.dtype)
        keep = train and n * h * w * 9 * self.cin <= _CONV_CACHE_ELEMENTS
        cached = []
        for start, xb in self._blocks(x):
            cols = kernels.im2col3x3(xb)
            out = y[start:start + len(xb)].reshape(len(xb) * h * w, self.cout)
            np.matmul(cols, wm, out=out)
            out += self.params["bias"]
            if keep:
                cached.append(cols)
        self._x = x if train else None
        self._cols = cached if keep else None
        return y

    def backward(self, dy):
        x = self._x
        if x is None:
            raise StateError(f"{self.name}: backward without a training forward")
        n, h, w, _ = x.shape
        wm = self.params["weight"].reshape(9 * self.cin, self.cout)
        dw = np.zeros_like(wm)
        dx = np.empty_like(x) if self.needs_input_grad else None
        for k, (start, xb) in enumerate(self._blocks(x)):
            m = len(xb)
            cols = self._cols[k] if self._cols is not None else kernels.im2col3x3(xb)
            dyb = dy[start:start + m].reshape(m * h * w, self.cout)
            dw += cols.T @ dyb
            if dx is not None:
                dx[start:start + m] = kernels.col2im3x3(dyb @ wm.T, xb.shape)
        self.grads["weight"] = dw.reshape(self.params["weight"].shape)
        self.grads["bias"] = dy.sum(axis=(0, 1, 2))
        self._x = None
        self._cols = None
        return dx

    def clear(self):
        self._x = None
        self._cols = None


class BatchNorm(Layer):
    """Per-channel batch normalisation.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, momentum, epsilon, dtype):
        super().__init__(name)
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state["running_mean"] = np.zeros(channels, dtype=dtype)
        self.state["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train, rng):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mean, var = kernels.channel_moments(x)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat, y = kernels.bn_train_forward(x, mean, inv_std, gamma, beta)
            m = self.momentum
            rm, rv = self.state["running_mean"], self.state["running_var"]
            rm[...] = m * rm + (1.0 - m) * mean
            rv[...] = m * rv + (1.0 - m) * var
            self._cache = (xhat, inv_std)
            return y
        inv_std = (1.0 / np.sqrt(self.state["running_var"] + self.epsilon)).astype(x.dtype)
        scale = gamma * inv_std
        shift = beta - self.state["running_mean"] * scale
        return x * scale + shift

    def backward(self, dy):
        if self._cache is None:
            raise StateError(f"{self.name}: backward without a training forward")
        xhat, inv_std = self._cache
        dx, self.grads["gamma"], self.grads["beta"] = kernels.bn_backward(
            np.ascontiguousarray(dy), xhat, self.params["gamma"], inv_std)
        self._cache = None
        return dx

    def clear(self):
        self._cache = None


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        super().__init__(name)
        self._mask = None

    def forward(self, x, train, rng):
        y = np.maximum(x, 0)
        self._mask = (x > 0) if train else None
        return y

    def backward(self, dy):
        if self._mask is None:
            raise StateError(f"{self.name}: backward without a training forward")
        dx = dy * self._mask
        self._mask = None
        return dx

    def clear(self):
        self._mask = None


class MaxPool2(Layer):
    kind = "maxpool"

    def __init__(self, name):
        super().__init__(name)
        self._cache = None

    def output_shape(self, shape):
        return (shape[0], shape[1] // 2, shape[2] // 2, shape[3])

    def forward(self, x, train, rng):
        y, idx = kernels.maxpool2x2_forward(x)
        self._cache = (idx, x.shape) if train else None
        return y

    def backward(self, dy):
        if self._cache is None:
            raise StateError(f"{self.name}: backward without a training forward")
        idx, shape = self._cache
        self._cache = None
        return kernels.maxpool2x2_backward(np.ascontiguousarray(dy), idx, shape)

    def clear(self):
        self._cache = None


class Dropout(Layer):
    """Inverted dropout; masks come from the model generator in training mode."""

    kind = "dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        self.rate = rate
        self._mask = None

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            self._mask = 1.0 if train else None
            return x
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape, dtype=x.dtype) < keep).astype(x.dtype)
        mask /= x.dtype.type(keep)
        self._mask = mask
        return x * mask

    def backward(self, dy):
        if self._mask is None:
            raise StateError(f"{self.name}: backward without a training forward")
        dx = dy * self._mask
        self._mask = None
        return dx

    def clear(self):
        self._mask = None


class GlobalMaxPool(Layer):
    kind = "globalmaxpool"

    def __init__(self, name):
        super().__init__(name)
        self._cache = None

    def output_shape(self, shape):
        return (shape[0], shape[3])

    def forward(self, x, train, rng):
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        idx = np.argmax(flat, axis=1)
        y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
        self._cache = (idx, x.shape) if train else None
        return y

    def backward(self, dy):
        if self._cache is None:
            raise StateError(f"{self.name}: backward without a training forward")
        idx, shape = self._cache
        n, h, w, c = shape
        dx = np.zeros((n, h * w, c), dtype=dy.dtype)
        np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
        self._cache = None
        return dx.reshape(shape)

    def clear(self):
        self._cache = None


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, din, dout, rng, dtype):
        super().__init__(name)
        self.params["weight"] = glorot_uniform(rng, (din, dout), din, dout, dtype)
        self.params["bias"] = np.zeros(dout, dtype=dtype)
        self._x = None

    def output_shape(self, shape):
        return (shape[0], self.params["weight"].shape[1])

    def forward(self, x, train, rng):
        self._x = x if train else None
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        if self._x is None:
            raise StateError(f"{self.name}: backward without a training forward")
        self.grads["weight"] = self._x.T @ dy
        self.grads["bias"] = dy.sum(axis=0)
        dx = dy @ self.params["weight"].T
        self._x = None
        return dx

    def clear(self):
        self._x = None
