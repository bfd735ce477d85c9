"""Forward/backward kernels for the layers the residual network needs.

Activations are channels-last ``(batch, row, col, channel)`` float64 arrays.
Convolution weights are ``(out, in, k, k)``. Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes that cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad=0):
    B, H, W, C = x.shape
    O, Cw, k, _ = w.shape
    assert C == Cw, (C, Cw)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    if k == 1:
        cols = x[:, ::stride, ::stride, :][:, :Ho, :Wo, :].reshape(B * Ho * Wo, C)
    else:
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        # (B, Ho, Wo, C, k, k) -> rows of C*k*k, matching w.reshape(O, -1)
        cols = win[:, :Ho, :Wo].reshape(B * Ho * Wo, C * k * k)
    out = cols @ w.reshape(O, -1).T
    out += b
    return out.reshape(B, Ho, Wo, O), (cols, x.shape, (H, W), w, stride, pad)


def conv2d_backward(dout, cache):
    cols, padded_shape, (H, W), w, stride, pad = cache
    B, Ho, Wo, O = dout.shape
    _, C, k, _ = w.shape
    d = dout.reshape(-1, O)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = d @ w.reshape(O, -1)
    dxp = np.zeros(padded_shape)
    if k == 1:
        dxp[:, : stride * Ho : stride, : stride * Wo : stride, :] = dcols.reshape(B, Ho, Wo, C)
    else:
        dcols = dcols.reshape(B, Ho, Wo, C, k, k)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[..., i, j]
    if pad:
        dxp = dxp[:, pad : pad + H, pad : pad + W, :]
    return dxp, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, k=3, stride=2, pad=1):
    B, H, W, C = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf)
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    flat = win.reshape(B, Ho, Wo, C, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, (H, W), k, stride, pad)


def maxpool_backward(dout, cache):
    arg, padded_shape, (H, W), k, stride, pad = cache
    B, Ho, Wo, C = dout.shape
    dxp = np.zeros(padded_shape)
    di, dj = np.divmod(arg, k)
    bb, oo, pp, cc = np.indices(arg.shape, sparse=True)
    np.add.at(dxp, (bb, oo * stride + di, pp * stride + dj, cc), dout)
    if pad:
        dxp = dxp[:, pad : pad + H, pad : pad + W, :]
    return dxp


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dout, shape):
    B, H, W, C = shape
    return np.broadcast_to(dout[:, None, None, :] / (H * W), shape).copy()


def linear_forward(x, w, b):
    # w is (out, in)
    return x @ w.T + b, x


def linear_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)
