"""Multilevel affine registration under the NGF distance."""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .config import RegistrationConfig
from .ngf import FixedGradient, gradient_operators, image_gradient
from .sampling import bilinear, pyramid, smooth, to_grayscale
from .solver import gauss_newton
from .transforms import AffineTransform, pixel_grid


def _to_level(T: AffineTransform, k: int):
    """Affine map of level-``k`` pixel coordinates equivalent to ``T`` at level 0."""
    f = 2.0 ** k
    o = np.full(2, (f - 1) / 2)
    return T.A, (T.A @ o + T.t - o) / f


def _from_level(A, t_k, k: int) -> AffineTransform:
    f = 2.0 ** k
    o = np.full(2, (f - 1) / 2)
    return AffineTransform(A, f * t_k - A @ o + o)


class _AffineLevel:
    def __init__(self, fixed, moving, epsilon):
        self.shape = fixed.shape
        self.fg = FixedGradient(fixed, epsilon)
        self.gx_op, self.gy_op = gradient_operators(fixed.shape)
        self.moving = moving
        self.mgx, self.mgy = image_gradient(moving)
        h, w = fixed.shape
        self.center = np.array([(w - 1) / 2, (h - 1) / 2])
        self.x, self.y = pixel_grid(fixed.shape)
        self.xc = self.x - self.center[0]
        self.yc = self.y - self.center[1]

    def params(self, A, t_k):
        c = self.center
        return np.r_[A[0, 0] - 1, A[0, 1], A[1, 0], A[1, 1] - 1, A @ c + t_k - c]

    def transform(self, p):
        A = np.array([[1 + p[0], p[1]], [p[2], 1 + p[3]]])
        return A, p[4:6] - A @ self.center + self.center

    def evaluate(self, p, model):
        px = self.x + p[0] * self.xc + p[1] * self.yc + p[4]
        py = self.y + p[2] * self.xc + p[3] * self.yc + p[5]
        T = bilinear(self.moving, px, py, mode="clamp")
        terms = self.fg.terms(T)
        if not model:
            return terms.value, None, None
        mx = bilinear(self.mgx, px, py, mode="clamp").ravel()
        my = bilinear(self.mgy, px, py, mode="clamp").ravel()
        xc, yc = self.xc.ravel(), self.yc.ravel()
        dTdp = np.stack([mx * xc, mx * yc, my * xc, my * yc, mx, my], axis=1)
        dDdT = terms.image_gradient().ravel()
        grad = dDdT @ dTdp
        Jr = terms.residual_jacobian(self.gx_op, self.gy_op)
        JJ = Jr @ dTdp
        H = 2.0 * JJ.T @ JJ
        return terms.value, grad, H

    @staticmethod
    def solve(H, rhs):
        ridge = 1e-8 * max(np.trace(H), 1e-12) / 6
        return np.linalg.solve(H + ridge * np.eye(6), rhs)


def register_affine(fixed, moving, cfg: Optional[RegistrationConfig] = None,
                    init: Optional[AffineTransform] = None,
                    trace: Optional[List[dict]] = None) -> AffineTransform:
    """Affine transform ``T`` such that ``moving(T(x))`` matches ``fixed(x)``.

    ``fixed`` and ``moving`` may be RGB or gray; they are converted to gray
    and registered coarse-to-fine.
    """
    cfg = cfg or RegistrationConfig()
    levels = cfg.affine_levels or cfg.pyramid_levels
    fpyr = pyramid(to_grayscale(fixed), levels, cfg.min_level_size)
    mpyr = pyramid(to_grayscale(moving), levels, cfg.min_level_size)
    n = min(len(fpyr), len(mpyr))
    T = init or AffineTransform.identity()
    for k in reversed(range(n)):
        lvl = _AffineLevel(smooth(fpyr[k], cfg.smoothing_sigma), smooth(mpyr[k], cfg.smoothing_sigma),
                           cfg.ngf_epsilon)
        A, t_k = _to_level(T, k)
        p = gauss_newton(lvl.evaluate, lvl.solve, lvl.params(A, t_k),
                         max_iterations=cfg.max_iterations,
                         gradient_tolerance=cfg.gradient_tol(fpyr[k].size) * 1e-3,
                         armijo_c=cfg.armijo_c, max_backtracks=cfg.max_backtracks,
                         relative_tolerance=cfg.relative_tolerance * 1e-2,
                         trace=trace, tag={"stage": "affine", "level": k})
        T = _from_level(*lvl.transform(p), k)
    return T
