"""Normalised gradient fields distance.

For fixed image R and (warped) template T, with ``|v|_e = sqrt(|v|^2 + e^2)``::

    r(x) = (<grad T, grad R> + e^2) / (|grad T|_e |grad R|_e)
    D    = sum_x 1 - r(x)^2

``r`` is the cosine between ``(grad T, e)`` and ``(grad R, e)``, so identical
images and pairs of constant images both give ``D = 0``. Gradients are
central differences, one-sided on the border (``np.gradient``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..errors import DimensionMismatch, InputError


def _diff_matrix(n: int) -> sparse.csr_matrix:
    if n < 2:
        return sparse.csr_matrix((n, n))
    rows, cols, vals = [], [], []
    for i in range(n):
        if i == 0:
            rows += [0, 0]; cols += [0, 1]; vals += [-1.0, 1.0]
        elif i == n - 1:
            rows += [i, i]; cols += [i - 1, i]; vals += [-1.0, 1.0]
        else:
            rows += [i, i]; cols += [i - 1, i + 1]; vals += [-0.5, 0.5]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def gradient_operators(shape):
    """Sparse matrices (Gx, Gy) acting on row-major flattened images."""
    h, w = shape
    gx = sparse.kron(sparse.identity(h), _diff_matrix(w), format="csr")
    gy = sparse.kron(_diff_matrix(h), sparse.identity(w), format="csr")
    return gx, gy


def image_gradient(img):
    a = np.asarray(img, float)
    gx = np.gradient(a, axis=1) if a.shape[1] > 1 else np.zeros_like(a)
    gy = np.gradient(a, axis=0) if a.shape[0] > 1 else np.zeros_like(a)
    return gx, gy


def _gradient_adjoint(px, py):
    """Apply Gx^T and Gy^T to per-pixel arrays and sum."""
    out = np.zeros_like(px)
    h, w = px.shape
    if w > 1:
        out[:, 2:] += 0.5 * px[:, 1:-1]
        out[:, :-2] -= 0.5 * px[:, 1:-1]
        out[:, 0] -= px[:, 0]
        out[:, 1] += px[:, 0]
        out[:, -1] += px[:, -1]
        out[:, -2] -= px[:, -1]
    if h > 1:
        out[2:, :] += 0.5 * py[1:-1, :]
        out[:-2, :] -= 0.5 * py[1:-1, :]
        out[0, :] -= py[0, :]
        out[1, :] += py[0, :]
        out[-1, :] += py[-1, :]
        out[-2, :] -= py[-1, :]
    return out


@dataclass
class NGFTerms:
    """Per-pixel quantities shared by the value, gradient and Gauss-Newton model."""

    value: float
    r: np.ndarray
    ax: np.ndarray  # d r / d (Gx T)
    ay: np.ndarray  # d r / d (Gy T)

    def image_gradient(self) -> np.ndarray:
        """dD/dT as an image."""
        return -2.0 * _gradient_adjoint(self.r * self.ax, self.r * self.ay)

    def residual_jacobian(self, gx, gy) -> sparse.csr_matrix:
        """Sparse dr/dT given the gradient operators of the grid."""
        return sparse.diags(self.ax.ravel()) @ gx + sparse.diags(self.ay.ravel()) @ gy


class FixedGradient:
    """Cached gradient of the fixed image."""

    def __init__(self, fixed, epsilon: float):
        if not epsilon > 0:
            raise InputError("NGF epsilon must be > 0")
        self.shape = np.shape(fixed)
        self.epsilon = float(epsilon)
        self.gx, self.gy = image_gradient(fixed)
        self.sq = self.gx ** 2 + self.gy ** 2 + self.epsilon ** 2
        self.norm = np.sqrt(self.sq)

    def terms(self, warped) -> NGFTerms:
        if np.shape(warped) != self.shape:
            raise DimensionMismatch(f"image shapes differ: {self.shape} vs {np.shape(warped)}")
        e2 = self.epsilon ** 2
        tx, ty = image_gradient(warped)
        tsq = tx ** 2 + ty ** 2 + e2
        num = tx * self.gx + ty * self.gy + e2
        # sqrt of the product keeps r == 1 exactly when both gradients agree
        r = num / np.sqrt(tsq * self.sq)
        value = float(np.maximum(1.0 - r * r, 0.0).sum())
        tn = np.sqrt(tsq)
        ax = (self.gx / self.norm - r * tx / tn) / tn
        ay = (self.gy / self.norm - r * ty / tn) / tn
        return NGFTerms(value, r, ax, ay)


def ngf_distance(fixed, warped, epsilon: float):
    """NGF distance and its gradient with respect to ``warped``.

    Returns
    -------
    value : float
    grad : ndarray, same shape as ``warped``
    """
    if np.shape(fixed) != np.shape(warped):
        raise DimensionMismatch(f"image shapes differ: {np.shape(fixed)} vs {np.shape(warped)}")
    t = FixedGradient(fixed, epsilon).terms(warped)
    return t.value, t.image_gradient()
