"""
Forward and backward kernels on raw numpy arrays.

Tensors are 5-axis ``(n, c, d, h, w)`` arrays.  Each ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes ``(dout, cache)``.
"""

import numpy as np

from ..errors import ShapeMismatch


def _same_pad(k):
    if k % 2 != 1:
        raise ShapeMismatch(f"kernel size {k} must be odd")
    return k // 2


def conv_output_dims(spatial, kernel, stride):
    """Same-padding output size: ceil(n / stride) per axis."""
    return tuple(-(-n // stride) for n in spatial)


def conv3d_forward(x, w, b, stride=1):
    """Zero-padded 'same' cross-correlation.

    x: (n, ci, D, H, W); w: (co, ci, kd, kh, kw); b: (co,) or None.
    Computed as a sum over kernel offsets of small (co, ci) x (ci, S)
    products, which beats a full patch matrix for narrow layers.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and weights, got {x.shape} and {w.shape}")
    n, ci, D, H, W = x.shape
    co, wci, kd, kh, kw = w.shape
    if wci != ci:
        raise ShapeMismatch(f"conv3d input has {ci} channels, weights expect {wci}")
    if stride not in (1, 2):
        raise ShapeMismatch(f"stride must be 1 or 2, got {stride}")
    pd, ph, pw = _same_pad(kd), _same_pad(kh), _same_pad(kw)
    out_dims = conv_output_dims((D, H, W), (kd, kh, kw), stride)
    w = w.astype(x.dtype, copy=False)
    if (pd, ph, pw) == (0, 0, 0):
        xp = x
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((n, co) + out_dims, dtype=x.dtype)
    for k in range(n):
        acc = out[k]
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    p = _patch(xp[k], i, j, l, stride, out_dims)
                    acc += np.tensordot(w[:, :, i, j, l], p, axes=(1, 0))
    if b is not None:
        out += b.astype(x.dtype).reshape(1, co, 1, 1, 1)
    return out, (x.shape, xp, w, stride)


def _patch(xp, i, j, l, stride, out_dims):
    """Input window for kernel offset (i, j, l) of a (c, D, H, W) array."""
    Do, Ho, Wo = out_dims
    return xp[:, i:i + stride * Do:stride, j:j + stride * Ho:stride, l:l + stride * Wo:stride]


def conv3d_backward(dout, cache):
    """Returns (dx, dw, db).

    The input gradient is a stride-1 correlation of ``dout`` (zero-stuffed
    back to the input grid when stride is 2) with the flipped, transposed
    kernel.
    """
    x_shape, xp, w, stride = cache
    n, ci, D, H, W = x_shape
    co, _, kd, kh, kw = w.shape
    out_dims = dout.shape[2:]
    db = dout.sum(axis=(0, 2, 3, 4))
    dw = np.zeros(w.shape, dtype=dout.dtype)
    for k in range(n):
        dmat = dout[k].reshape(co, -1)
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    p = _patch(xp[k], i, j, l, stride, out_dims).reshape(ci, -1)
                    dw[:, :, i, j, l] += dmat @ p.T
    if stride == 1:
        dz = dout
    else:
        dz = np.zeros((n, co, D, H, W), dtype=dout.dtype)
        dz[:, :, ::stride, ::stride, ::stride] = dout
    w_back = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx, _ = conv3d_forward(dz, w_back, None, 1)
    return dx, dw, db


def upsample_repeat_forward(x, factor=2):
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x.copy(), factor
    out = x.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)
    return out, factor


def upsample_repeat_backward(dout, factor):
    if factor == 1:
        return dout.copy()
    n, c, D, H, W = dout.shape
    f = factor
    return dout.reshape(n, c, D // f, f, H // f, f, W // f, f).sum(axis=(3, 5, 7))


def leaky_relu_forward(x, slope=0.01):
    pos = x >= 0
    return np.where(pos, x, slope * x), (pos, slope)


def leaky_relu_backward(dout, cache):
    pos, slope = cache
    return np.where(pos, dout, slope * dout)


def relu_forward(x):
    pos = x > 0
    return np.where(pos, x, 0).astype(x.dtype), pos


def relu_backward(dout, pos):
    return np.where(pos, dout, 0).astype(dout.dtype)


def instance_norm_forward(x, gamma, beta, eps=1e-5):
    """Per (sample, channel) normalization over the spatial axes."""
    axes = tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    shape = (1, -1) + (1,) * len(axes)
    g = gamma.astype(x.dtype).reshape(shape)
    out = xhat * g + beta.astype(x.dtype).reshape(shape)
    return out, (xhat, inv_std, g)


def instance_norm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, g = cache
    axes = tuple(range(2, dout.ndim))
    m = np.prod([dout.shape[a] for a in axes])
    dgamma = (dout * xhat).sum(axis=(0,) + axes)
    dbeta = dout.sum(axis=(0,) + axes)
    dxhat = dout * g
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
    return dx, dgamma, dbeta


def dropout_forward(x, p_drop, rng, training):
    """Inverted dropout; identity at inference or when p_drop == 0."""
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must be in [0, 1)")
    if not training or p_drop == 0:
        return x, None
    keep = rng.random(x.shape) >= p_drop
    scale = x.dtype.type(1.0 / (1.0 - p_drop))
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def global_max_pool_forward(x):
    """(n, c, d, h, w) -> (n, c, 1, 1, 1); ties go to the first voxel in scan order."""
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)
    return out.reshape(n, c, 1, 1, 1), (x.shape, arg)


def global_max_pool_backward(dout, cache):
    shape, arg = cache
    n, c = shape[:2]
    dflat = np.zeros((n, c, int(np.prod(shape[2:]))), dtype=dout.dtype)
    np.put_along_axis(dflat, arg[:, :, None], dout.reshape(n, c, 1), axis=2)
    return dflat.reshape(shape)


def dense_forward(x, w, b):
    """x: (n, c_in), w: (c_out, c_in), b: (c_out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape} incompatible with weights {w.shape}")
    out = x @ w.astype(x.dtype).T
    if b is not None:
        out = out + b.astype(x.dtype)
    return out, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    dx = dout @ w.astype(dout.dtype)
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dw, db


def sigmoid_forward(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def softmax_channels_forward(x):
    """Softmax across axis 1 at every voxel."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out, out


def softmax_channels_backward(dout, out):
    s = (dout * out).sum(axis=1, keepdims=True)
    return out * (dout - s)
