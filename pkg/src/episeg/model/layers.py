"""Convolution, pooling and upsampling on (B, C, H, W) arrays with explicit backward passes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)


def conv2d(x, w, b):
    """Zero-padded 'same' convolution (cross-correlation). ``w`` is (O, C, k, k)."""
    k = w.shape[-1]
    cols = _windows(x, k)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], cols


def conv2d_backward(gout, cols, w):
    """Gradients of :func:`conv2d` with respect to input, weights and bias."""
    k = w.shape[-1]
    dw = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    db = gout.sum(axis=(0, 2, 3))
    # input gradient: full correlation of the upstream gradient with flipped kernels
    gcols = _windows(gout, k)
    dx = np.tensordot(gcols, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # (B, H, W, C)
    return dx.transpose(0, 3, 1, 2), dw, db


def relu(x):
    return np.maximum(x, 0.0)


def maxpool2(x):
    """2x2 max pooling; returns the output and the winning position per window."""
    B, C, H, W = x.shape
    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(gout, arg):
    B, C, h, w = gout.shape
    blocks = np.zeros((B, C, h, w, 4))
    np.put_along_axis(blocks, arg[..., None], gout[..., None], axis=-1)
    return blocks.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(gout):
    B, C, H, W = gout.shape
    return gout.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))
