"""Two-level U-Net style segmenter with hand-written backpropagation.

Layout::

    x ─ c1(F) ─ c2(F) ─────────────────────────┐ skip
                 └ pool ─ c3(2F) ─ c4(2F) ─ up ─ concat ─ c5(F) ─ c6(F) ─ c7 1x1 (2)

All 3x3 convolutions are followed by ReLU; c7 emits raw logits. Parameters
live in one flat float vector; per-layer weights are views into it.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from ..errors import BadInputSize, InputError
from . import layers as L
from .loss import weighted_ce_loss

ARCH_ID = "mini-unet-2"


def _layer_specs(F: int) -> List[Tuple[str, int, int, int]]:
    return [
        ("c1", 3, F, 3), ("c2", F, F, 3),
        ("c3", F, 2 * F, 3), ("c4", 2 * F, 2 * F, 3),
        ("c5", 3 * F, F, 3), ("c6", F, F, 3),
        ("c7", F, 2, 1),
    ]


def prepare_input(image) -> np.ndarray:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float (B, 3, H, W) centred on zero."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise InputError(f"expected RGB image(s), got shape {a.shape}")
    return a.transpose(0, 3, 1, 2).astype(float) / 255.0 - 0.5


class MiniSegmenter:
    def __init__(self, filters: int = 8, params=None, rng=None):
        if filters < 1:
            raise InputError("filters must be positive")
        self.filters = int(filters)
        self.specs = _layer_specs(self.filters)
        self.slices: Dict[str, Tuple[slice, tuple, slice, int]] = {}
        off = 0
        for name, cin, cout, k in self.specs:
            nw = cout * cin * k * k
            self.slices[name] = (slice(off, off + nw), (cout, cin, k, k), slice(off + nw, off + nw + cout), cout)
            off += nw + cout
        self.n_params = off
        if params is None:
            params = self.init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = np.asarray(params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise InputError(f"expected {self.n_params} parameters, got {self.params.shape}")

    def init_params(self, rng) -> np.ndarray:
        """He-normal weights, zero biases."""
        p = np.zeros(self.n_params)
        for name, cin, cout, k in self.specs:
            ws, shape, _, _ = self.slices[name]
            p[ws] = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=int(np.prod(shape)))
        return p

    def weights(self, name, params=None):
        p = self.params if params is None else params
        ws, shape, bs, _ = self.slices[name]
        return p[ws].reshape(shape), p[bs]

    # forward / backward ---------------------------------------------------

    def forward(self, x, params=None):
        """Logits (B, 2, H, W) and the cache needed by :meth:`backward`."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 4 or x.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2 or min(x.shape[2:]) < 2:
            raise BadInputSize(f"input size {x.shape[2:]} must be even")
        cache = {}

        def conv(name, a, act=True):
            w, b = self.weights(name, params)
            z, cols = L.conv2d(a, w, b)
            cache[name] = (cols, z)
            return L.relu(z) if act else z

        a1 = conv("c1", x)
        a2 = conv("c2", a1)
        p, arg = L.maxpool2(a2)
        cache["pool"] = arg
        a3 = conv("c3", p)
        a4 = conv("c4", a3)
        u = L.upsample2(a4)
        cat = np.concatenate([a2, u], axis=1)
        a5 = conv("c5", cat)
        a6 = conv("c6", a5)
        logits = conv("c7", a6, act=False)
        return logits, cache

    def backward(self, glogits, cache, params=None) -> np.ndarray:
        """Flat parameter gradient given dLoss/dlogits."""
        grad = np.zeros(self.n_params)
        F = self.filters

        def back(name, g, act=True):
            cols, z = cache[name]
            if act:
                g = g * (z > 0)
            w, _ = self.weights(name, params)
            dx, dw, db = L.conv2d_backward(g, cols, w)
            ws, _, bs, _ = self.slices[name]
            grad[ws] += dw.ravel()
            grad[bs] += db
            return dx

        g = back("c7", glogits, act=False)
        g = back("c6", g)
        g = back("c5", g)
        g_skip, g_up = g[:, :F], g[:, F:]
        g = L.upsample2_backward(g_up)
        g = back("c4", g)
        g = back("c3", g)
        g = L.maxpool2_backward(g, cache["pool"]) + g_skip
        g = back("c2", g)
        back("c1", g)
        return grad

    def loss_and_grad(self, x, labels, weights=None, params=None):
        logits, cache = self.forward(x, params)
        loss, gl = weighted_ce_loss(logits, labels, weights)
        return loss, self.backward(gl, cache, params), logits

    def logits(self, image) -> np.ndarray:
        x = prepare_input(image)
        return self.forward(x)[0]

    def predict_mask(self, image) -> np.ndarray:
        """Per-pixel argmax of the logits (ties -> 0). Odd dimensions are padded by reflection."""
        a = np.asarray(image)
        h, w = a.shape[:2]
        ph, pw = h % 2, w % 2
        if ph or pw:
            a = np.pad(a, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
        lg = self.logits(a)[0]
        return predict_from_logits(lg)[:h, :w]


def predict_from_logits(logits) -> np.ndarray:
    """Class 1 where its logit is strictly larger; ties go to class 0."""
    lg = np.asarray(logits)
    return (lg[1] > lg[0]).astype(np.uint8)


def mini_forward(net: MiniSegmenter, batch, params=None):
    """Logits and weighted loss for a :class:`~episeg.sampler.PatchBatch` (or a list of them)."""
    x, lab, wts = _stack(batch)
    logits, _ = net.forward(x, params)
    loss, _ = weighted_ce_loss(logits, lab, wts)
    return logits, loss


def mini_backward(net: MiniSegmenter, batch, params=None):
    """``(logits, loss, flat parameter gradient)`` for one batch."""
    x, lab, wts = _stack(batch)
    loss, grad, logits = net.loss_and_grad(x, lab, wts, params)
    return logits, loss, grad


def _stack(batch):
    items = batch if isinstance(batch, (list, tuple)) else [batch]
    x = np.concatenate([prepare_input(b.image) for b in items])
    lab = np.stack([np.asarray(b.labels) for b in items]).astype(np.intp)
    wts = np.stack([np.asarray(b.loss_weights, float) for b in items])
    return x, lab, wts
