"""Curvature regulariser ``S(u) = 1/2 sum_i sum_nodes (Lap u_i)^2``.

The 5-point Laplacian uses linearly extrapolated ghost nodes on the border,
so the second difference across a boundary vanishes and every affine field
has zero energy.
"""

import numpy as np
from scipy import sparse

from ..errors import GridTooSmall


def _second_diff(n: int) -> sparse.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    d = sparse.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="lil")
    d[0, :] = 0
    d[n - 1, :] = 0
    return d.tocsr()


def laplacian_operator(shape) -> sparse.csr_matrix:
    h, w = shape
    if h < 3 or w < 3:
        raise GridTooSmall(f"curvature needs a grid of at least 3x3, got {h}x{w}")
    return (sparse.kron(sparse.identity(h), _second_diff(w))
            + sparse.kron(_second_diff(h), sparse.identity(w))).tocsr()


def laplacian(a: np.ndarray) -> np.ndarray:
    """Stencil form of :func:`laplacian_operator` applied to one component."""
    out = np.zeros_like(a, dtype=float)
    out[:, 1:-1] += a[:, :-2] - 2 * a[:, 1:-1] + a[:, 2:]
    out[1:-1, :] += a[:-2, :] - 2 * a[1:-1, :] + a[2:, :]
    return out


def curvature_energy(u):
    """Energy and gradient of a displacement array (2, h, w) or a field.

    Returns
    -------
    value : float
    grad : ndarray (2, h, w)
    """
    u = np.asarray(getattr(u, "u", u), float)
    if u.shape[1] < 3 or u.shape[2] < 3:
        raise GridTooSmall(f"curvature needs a grid of at least 3x3, got {u.shape[1]}x{u.shape[2]}")
    lap = np.stack([laplacian(u[0]), laplacian(u[1])])
    value = 0.5 * float((lap ** 2).sum())
    grad = np.stack([laplacian_adjoint(lap[0]), laplacian_adjoint(lap[1])])
    return value, grad


def laplacian_adjoint(b: np.ndarray) -> np.ndarray:
    """L^T applied to a node array (L is not symmetric because of the border rows)."""
    out = np.zeros_like(b)
    bx = np.zeros_like(b)
    bx[:, 1:-1] = b[:, 1:-1]
    out[:, :-2] += bx[:, 1:-1]
    out[:, 1:-1] -= 2 * bx[:, 1:-1]
    out[:, 2:] += bx[:, 1:-1]
    by = np.zeros_like(b)
    by[1:-1, :] = b[1:-1, :]
    out[:-2, :] += by[1:-1, :]
    out[1:-1, :] -= 2 * by[1:-1, :]
    out[2:, :] += by[1:-1, :]
    return out
