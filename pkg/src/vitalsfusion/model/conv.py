"""Dense 3-D cross-correlation, spatial average pooling and ELU, with gradients.

Layouts are channel-first: inputs ``[C, T, H, W]``, kernels ``[O, C, kT, kH, kW]``.
The forward pass lowers the input to a column matrix (one row per output
position) and uses a single matrix product; the same columns serve the weight
gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected an integer triple, got {v}")
    return v


def conv_output_shape(in_shape, kernel, stride=1, pad=0):
    stride, pad, kernel = _triple(stride), _triple(pad), _triple(kernel)
    out = []
    for n, k, s, p in zip(in_shape, kernel, stride, pad):
        if s < 1 or p < 0:
            raise DimensionError("stride must be >= 1 and padding >= 0")
        span = n + 2 * p - k
        if span < 0:
            raise DimensionError(f"kernel {kernel} does not fit padded input {in_shape}")
        out.append(span // s + 1)
    return tuple(out)


def _columns(x, kshape, stride, pad):
    C = x.shape[0]
    if any(pad):
        x = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    v = sliding_window_view(x, kshape, axis=(1, 2, 3))
    v = v[:, :: stride[0], :: stride[1], :: stride[2]]
    out_shape = v.shape[1:4]
    # rows ordered (t, h, w); columns ordered (c, kt, kh, kw) to match the kernel layout
    cols = v.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, C * int(np.prod(kshape)))
    return cols, out_shape


def _check(x, weights, bias):
    if x.ndim != 4:
        raise DimensionError(f"conv input must be [C, T, H, W], got {x.shape}")
    if weights.ndim != 5:
        raise DimensionError(f"kernel must be [O, C, kT, kH, kW], got {weights.shape}")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"kernel expects {weights.shape[1]} input channels, input has {x.shape[0]}"
        )
    if bias is not None and np.shape(bias) != (weights.shape[0],):
        raise DimensionError(f"bias must have shape ({weights.shape[0]},)")


def conv3d_forward_cols(x, weights, bias=None, stride=1, pad=0):
    """Forward pass that also returns the column matrix for reuse in backward."""
    x = np.asarray(x)
    _check(x, weights, bias)
    stride, pad = _triple(stride), _triple(pad)
    conv_output_shape(x.shape[1:], weights.shape[2:], stride, pad)
    cols, out_shape = _columns(x, weights.shape[2:], stride, pad)
    out = cols @ weights.reshape(weights.shape[0], -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.T).reshape((weights.shape[0],) + out_shape), cols


def conv3d_forward(x, weights, bias=None, stride=1, pad=0):
    """Direct 3-D cross-correlation of ``x`` with ``weights`` plus per-channel ``bias``."""
    return conv3d_forward_cols(x, weights, bias, stride, pad)[0]


def conv3d_backward_cols(grad_out, cols, in_shape, weights, stride=1, pad=0, need_input=True):
    stride, pad = _triple(stride), _triple(pad)
    O = weights.shape[0]
    g2 = grad_out.reshape(O, -1)
    grad_w = (g2 @ cols).reshape(weights.shape)
    grad_b = g2.sum(axis=1)
    if not need_input:
        return None, grad_w, grad_b
    C = in_shape[0]
    kT, kH, kW = weights.shape[2:]
    To, Ho, Wo = grad_out.shape[1:]
    gcols = (g2.T @ weights.reshape(O, -1)).reshape(To, Ho, Wo, C, kT, kH, kW)
    padded = tuple(n + 2 * p for n, p in zip(in_shape[1:], pad))
    gx = np.zeros((C,) + padded, dtype=grad_out.dtype)
    sT, sH, sW = stride
    for a in range(kT):
        for b in range(kH):
            for c in range(kW):
                gx[:, a : a + sT * To : sT, b : b + sH * Ho : sH, c : c + sW * Wo : sW] += (
                    gcols[..., a, b, c].transpose(3, 0, 1, 2)
                )
    pt, ph, pw = pad
    gx = gx[:, pt : pt + in_shape[1], ph : ph + in_shape[2], pw : pw + in_shape[3]]
    return gx, grad_w, grad_b


def conv3d_backward(grad_out, cached_input, weights, stride=1, pad=0):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`conv3d_forward`."""
    x = np.asarray(cached_input)
    _check(x, weights, None)
    stride, pad = _triple(stride), _triple(pad)
    expected = (weights.shape[0],) + conv_output_shape(x.shape[1:], weights.shape[2:], stride, pad)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out has shape {grad_out.shape}, forward produced {expected}")
    cols, _ = _columns(x, weights.shape[2:], stride, pad)
    return conv3d_backward_cols(grad_out, cols, x.shape, weights, stride, pad)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x, y):
    """Derivative of ELU given its input ``x`` and output ``y``."""
    return np.where(x > 0, 1.0, y + 1.0)


def avg_pool_spatial(x):
    """2x2 mean over the last two axes; a trailing odd row/column is dropped."""
    C, T, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise DimensionError(f"cannot pool spatial size {H}x{W}")
    return x[:, :, : 2 * H2, : 2 * W2].reshape(C, T, H2, 2, W2, 2).mean(axis=(3, 5))


def avg_pool_spatial_backward(grad, in_shape):
    C, T, H, W = in_shape
    g = np.repeat(np.repeat(grad * 0.25, 2, axis=2), 2, axis=3)
    if g.shape[2:] == (H, W):
        return g
    out = np.zeros(in_shape, dtype=grad.dtype)
    out[:, :, : g.shape[2], : g.shape[3]] = g
    return out
