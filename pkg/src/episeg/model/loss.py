"""Pixel-weighted softmax cross-entropy on channel-first logits."""

from __future__ import annotations

import numpy as np

from ..errors import InputError


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def weighted_ce_loss(logits, labels, weights=None):
    """Mean weighted cross-entropy and its gradient with respect to ``logits``.

    Parameters
    ----------
    logits : (B, K, H, W) array
    labels : (B, H, W) integer array in ``[0, K)``
    weights : (B, H, W) non-negative array, default all ones

    Returns
    -------
    loss : float
        ``(1/N) sum_x w(x) * -log p(x)[label(x)]`` with ``N = B*H*W``.
    grad : (B, K, H, W) array
        ``(1/N) w (softmax - onehot)``.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
        if weights is not None:
            weights = np.asarray(weights)[None]
        loss, g = weighted_ce_loss(logits, labels, weights)
        return loss, g[0]
    B, K, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise InputError(f"labels {labels.shape} do not match logits {logits.shape}")
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != labels.shape:
        raise InputError("weights must match labels")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    if labels.min() < 0 or labels.max() >= K:
        raise InputError("labels out of range")
    n = B * H * W
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, labels[:, None].astype(np.intp), axis=1)[:, 0]
    loss = float(np.sum(w * (lse - picked)) / n)
    p = np.exp(z - lse[:, None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    grad = (w[:, None] / n) * (p - onehot)
    return loss, grad
