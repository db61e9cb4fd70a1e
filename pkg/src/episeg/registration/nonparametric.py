"""Multilevel deformable registration: NGF distance + curvature regulariser.

Unknowns are nodal displacements on the pixel grid of each pyramid level. The
Gauss-Newton model combines ``2 J^T J`` of the NGF residual with the exact
Hessian ``alpha L^T L`` of the regulariser; the system is solved by
Jacobi-preconditioned conjugate gradients.
"""

from __future__ import annotations

from typing import List, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from ..errors import Diverged, InputError
from .config import RegistrationConfig
from .curvature import laplacian_operator
from .ngf import FixedGradient, gradient_operators, image_gradient
from .sampling import bilinear, prolong, pyramid, restrict, smooth, to_grayscale
from .solver import gauss_newton
from .transforms import AffineTransform, DisplacementField, pixel_grid

Init = Union[None, AffineTransform, DisplacementField]


class _FieldLevel:
    """Objective and Gauss-Newton model on one pyramid level."""

    def __init__(self, fixed, moving, alpha, epsilon, origin=(0.0, 0.0)):
        self.shape = fixed.shape
        self.n = fixed.size
        self.alpha = alpha
        self.fg = FixedGradient(fixed, epsilon)
        self.gx_op, self.gy_op = gradient_operators(fixed.shape)
        L = laplacian_operator(fixed.shape)
        self.LtL = (L.T @ L).tocsr()
        self.moving = moving
        self.mgx, self.mgy = image_gradient(moving)
        self.x, self.y = pixel_grid(fixed.shape, origin)

    def _split(self, v):
        h, w = self.shape
        return v[:self.n].reshape(h, w), v[self.n:].reshape(h, w)

    def regularizer(self, v):
        return 0.5 * float(v[:self.n] @ (self.LtL @ v[:self.n]) + v[self.n:] @ (self.LtL @ v[self.n:]))

    def evaluate(self, v, model):
        ux, uy = self._split(v)
        px, py = self.x + ux, self.y + uy
        T = bilinear(self.moving, px, py, mode="clamp")
        terms = self.fg.terms(T)
        reg_grad = np.r_[self.LtL @ v[:self.n], self.LtL @ v[self.n:]]
        J = terms.value + 0.5 * self.alpha * float(v @ reg_grad)
        if not model:
            return J, None, None
        mx = bilinear(self.mgx, px, py, mode="clamp").ravel()
        my = bilinear(self.mgy, px, py, mode="clamp").ravel()
        dDdT = terms.image_gradient().ravel()
        grad = np.r_[dDdT * mx, dDdT * my] + self.alpha * reg_grad
        Jr = terms.residual_jacobian(self.gx_op, self.gy_op)
        JtJ = (Jr.T @ Jr).tocsr()
        Dx, Dy = sparse.diags(mx), sparse.diags(my)
        aL = self.alpha * self.LtL
        H = sparse.bmat([[2 * (Dx @ JtJ @ Dx) + aL, 2 * (Dx @ JtJ @ Dy)],
                         [2 * (Dy @ JtJ @ Dx), 2 * (Dy @ JtJ @ Dy) + aL]], format="csr")
        return J, grad, H

    def make_solver(self, cfg: RegistrationConfig):
        def solve(H, rhs):
            diag = H.diagonal()
            ridge = 1e-6 * max(diag.mean(), 1e-12)
            Hr = H + ridge * sparse.identity(H.shape[0], format="csr")
            M = sparse.diags(1.0 / (diag + ridge))
            d, _ = cg(Hr, rhs, rtol=cfg.cg_tolerance, maxiter=cfg.cg_iterations, M=M)
            return d
        return solve


def _initial_displacement(init: Init, shape, level: int, origin=(0.0, 0.0)) -> np.ndarray:
    """Init restricted to level-``level`` nodes of a grid with full-res ``shape``."""
    f = 2 ** level
    h, w = -(-shape[0] // f), -(-shape[1] // f)
    if init is None:
        return np.zeros((2, h, w))
    if isinstance(init, AffineTransform):
        o = np.full(2, (f - 1) / 2)
        A = init.A
        t_k = (A @ (o + np.asarray(origin)) + init.t - o - np.asarray(origin)) / f
        return AffineTransform(A, t_k).displacement((h, w))
    if isinstance(init, DisplacementField):
        dense = init.dense(shape)
        return dense if level == 0 else restrict(dense, level, (h, w))
    raise InputError(f"unsupported init type {type(init).__name__}")


def register_nonparametric(fixed, moving, init: Init = None,
                           cfg: Optional[RegistrationConfig] = None,
                           trace: Optional[List[dict]] = None,
                           origin=(0, 0), levels: Optional[int] = None,
                           stage: str = "nonparametric") -> DisplacementField:
    """Deformable registration of ``moving`` to ``fixed``.

    Parameters
    ----------
    fixed, moving : array
        RGB or gray images. ``moving`` may be larger than ``fixed``;
        ``origin`` gives the position of ``fixed``'s top-left pixel in
        ``moving`` coordinates (used by patch-wise refinement).
    init : AffineTransform or DisplacementField, optional
        Starting transform, expressed on ``fixed``'s pixel grid.

    Returns
    -------
    DisplacementField on ``fixed``'s pixel grid (spacing 1).
    """
    cfg = cfg or RegistrationConfig()
    levels = levels or cfg.pyramid_levels
    fgray, mgray = to_grayscale(fixed), to_grayscale(moving)
    full_shape = fgray.shape
    fpyr = pyramid(fgray, levels, cfg.min_level_size)
    mpyr = pyramid(mgray, len(fpyr), 1)
    n = min(len(fpyr), len(mpyr))
    origin = np.asarray(origin, float)
    correction = None
    u = None
    for k in reversed(range(n)):
        f = 2.0 ** k
        u_init = _initial_displacement(init, full_shape, k, origin)
        if correction is None:
            correction = np.zeros_like(u_init)
        else:
            correction = prolong(correction, u_init.shape[1:])
        level = _FieldLevel(smooth(fpyr[k], cfg.smoothing_sigma), smooth(mpyr[k], cfg.smoothing_sigma),
                            cfg.curvature_weight, cfg.ngf_epsilon, origin / f)
        v0 = (u_init + correction).ravel()
        v = gauss_newton(level.evaluate, level.make_solver(cfg), v0,
                         max_iterations=cfg.max_iterations,
                         gradient_tolerance=cfg.gradient_tol(fpyr[k].size),
                         armijo_c=cfg.armijo_c, max_backtracks=cfg.max_backtracks,
                         relative_tolerance=cfg.relative_tolerance,
                         trace=trace, tag={"stage": stage, "level": k})
        u = v.reshape(u_init.shape)
        correction = u - u_init
        limit = 2.0 * np.hypot(*mpyr[k].shape)
        if np.abs(u).max() > limit:
            raise Diverged(f"displacements exceed the image extent at level {k}")
    return DisplacementField(u)
