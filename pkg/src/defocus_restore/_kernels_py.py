"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels_c`` mirrors every function
here with the same signature and is preferred when it was compiled.
"""

import numpy as np

# Crossover between the power series and the Hankel asymptotic expansion.
# Below 12 the asymptotic series cannot reach 1e-9; above it the power
# series loses digits to cancellation.
J0_SERIES_LIMIT = 12.0
_SERIES_TERMS = 48
_ASYMPTOTIC_TERMS = 20


def _asymptotic_coefficients(count):
    coef = [1.0]
    for k in range(1, count):
        coef.append(coef[-1] * -((2 * k - 1) ** 2) / (8.0 * k))
    return np.array(coef)


_ASYM = _asymptotic_coefficients(_ASYMPTOTIC_TERMS)


def j0(x):
    """Bessel function of the first kind, order zero, elementwise."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    small = x <= J0_SERIES_LIMIT

    xs = x[small]
    q = -0.25 * xs * xs
    term = np.ones_like(xs)
    total = term.copy()
    for k in range(1, _SERIES_TERMS):
        term = term * q / (k * k)
        total += term
    out[small] = total

    xl = x[~small]
    if xl.size:
        inv = 1.0 / xl
        p = np.zeros_like(xl)
        s = np.zeros_like(xl)
        power = np.ones_like(xl)
        for k in range(_ASYMPTOTIC_TERMS):
            c = _ASYM[k] * power
            if k % 2 == 0:
                p += c if (k // 2) % 2 == 0 else -c
            else:
                s += c if ((k - 1) // 2) % 2 == 0 else -c
            power = power * inv
        chi = xl - 0.25 * np.pi
        out[~small] = np.sqrt(2.0 / (np.pi * xl)) * (p * np.cos(chi) - s * np.sin(chi))
    return out


def im2col3x3(x):
    """Unfold zero-padded 3x3 neighbourhoods of an NHWC tensor.

    Returns an array of shape ``(N*H*W, 9*C)`` with columns ordered
    ``(ky, kx, c)``.
    """
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def col2im3x3(dcols, shape):
    """Adjoint of :func:`im2col3x3`."""
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += d[:, :, :, 3 * ky + kx, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :])


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling (floor mode) on NHWC.

    Returns the pooled tensor and the int8 window position (0-3, row
    major) of the first maximum in each window.
    """
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int8)


def maxpool2x2_backward(dy, idx, shape):
    n, h, w, c = shape
    ho, wo = dy.shape[1], dy.shape[2]
    onehot = (idx[..., None] == np.arange(4, dtype=np.int8)).astype(dy.dtype)
    win = onehot * dy[..., None]
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[:, :2 * ho, :2 * wo, :] = win.reshape(n, 2 * ho, 2 * wo, c)
    return dx


def channel_moments(x):
    """Per-channel mean and (biased) variance of an ``(..., C)`` array, in float64."""
    x2 = x.reshape(-1, x.shape[-1]).astype(np.float64)
    mean = x2.mean(axis=0)
    d = x2 - mean
    return mean, np.mean(d * d, axis=0)


def bn_train_forward(x, mean, inv_std, gamma, beta):
    """Return ``(xhat, y)`` with ``xhat = (x - mean) * inv_std`` and ``y = gamma * xhat + beta``."""
    dt = x.dtype
    xhat = (x - mean.astype(dt)) * inv_std.astype(dt)
    return xhat, xhat * gamma.astype(dt) + beta.astype(dt)


def bn_backward(dy, xhat, gamma, inv_std):
    """Batch-norm input gradient plus ``(dgamma, dbeta)`` for ``(..., C)`` arrays."""
    dt = dy.dtype
    flat_dy = dy.reshape(-1, dy.shape[-1])
    flat_xh = xhat.reshape(-1, dy.shape[-1])
    m = flat_dy.shape[0]
    dbeta = flat_dy.sum(axis=0, dtype=np.float64)
    dgamma = np.einsum("ij,ij->j", flat_dy, flat_xh, dtype=np.float64)
    scale = (gamma * inv_std).astype(dt)
    dx = scale * (dy - (dbeta / m).astype(dt) - xhat * (dgamma / m).astype(dt))
    return dx, dgamma.astype(dt), dbeta.astype(dt)
