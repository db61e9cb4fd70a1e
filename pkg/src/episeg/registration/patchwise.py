"""Patch-wise refinement and merging of overlapping patch fields.

Patches are registered independently, initialised from the global field.
Outside overlaps each pixel takes its single patch's displacement. Inside
overlaps the merged field minimises::

    beta * sum_p w_p(x) |u(x) - u_p(x)|^2 + alpha * S(u)

with the non-overlap values acting as boundary conditions, where ``w_p`` are
triangular feathering weights normalised to sum to one.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .config import RegistrationConfig
from .curvature import laplacian_operator
from .nonparametric import register_nonparametric
from .transforms import DisplacementField


@dataclass
class Patch:
    y0: int
    x0: int
    height: int
    width: int

    @property
    def slices(self):
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)


def tile_starts(length: int, size: int, overlap: int, align: int = 1) -> List[int]:
    if length <= size:
        return [0]
    n = math.ceil((length - overlap) / (size - overlap))
    starts = np.linspace(0, length - size, n)
    starts = [int(s // align) * align for s in starts[:-1]] + [length - size]
    return sorted(set(starts))


def make_patches(shape, size: int, overlap: int, align: int = 1) -> List[Patch]:
    h, w = shape
    ph, pw = min(size, h), min(size, w)
    return [Patch(y, x, ph, pw)
            for y in tile_starts(h, size, overlap, align)
            for x in tile_starts(w, size, overlap, align)]


def _ramp(n: int, start: int, length: int, total: int, overlap: int) -> np.ndarray:
    d = np.arange(length, dtype=float)
    dist = np.full(length, np.inf)
    if start > 0:
        dist = np.minimum(dist, d)
    if start + length < total:
        dist = np.minimum(dist, length - 1 - d)
    return np.clip((dist + 0.5) / overlap, 0.0, 1.0)


def feather_weight(patch: Patch, shape, overlap: int) -> np.ndarray:
    """Triangular feathering weight of a patch (product of per-axis ramps)."""
    h, w = shape
    wy = _ramp(h, patch.y0, patch.height, h, overlap)
    wx = _ramp(w, patch.x0, patch.width, w, overlap)
    return wy[:, None] * wx[None, :]


def merge_patch_fields(shape, patches: Sequence[Patch], fields: Sequence[np.ndarray],
                       cfg: RegistrationConfig, diagnostics: Optional[dict] = None) -> np.ndarray:
    """Merge per-patch (2, ph, pw) displacement arrays into one (2, h, w) array."""
    h, w = shape
    wsum = np.zeros(shape)
    count = np.zeros(shape, int)
    weights = []
    for p in patches:
        wp = feather_weight(p, shape, cfg.patch_overlap_px)
        weights.append(wp)
        wsum[p.slices] += wp
        count[p.slices] += 1
    if np.any(count == 0):
        raise ValueError("patches do not cover the domain")
    target = np.zeros((2, h, w))
    for p, wp, up in zip(patches, weights, fields):
        target[(slice(None),) + p.slices] += wp * up
    target /= wsum
    overlap = (count >= 2).ravel()
    u = target.copy()
    if overlap.any():
        L = laplacian_operator(shape)
        LtL = (L.T @ L).tocsr()
        idx_o = np.flatnonzero(overlap)
        idx_f = np.flatnonzero(~overlap)
        beta, alpha = cfg.merge_data_weight, cfg.curvature_weight
        A = (2 * beta * sparse.identity(idx_o.size, format="csr")
             + alpha * LtL[idx_o][:, idx_o]).tocsr()
        coupling = LtL[idx_o][:, idx_f]
        M = sparse.diags(1.0 / A.diagonal())
        for c in range(2):
            b = target[c].ravel()
            rhs = 2 * beta * b[idx_o] - alpha * (coupling @ b[idx_f])
            sol, _ = cg(A, rhs, x0=b[idx_o], rtol=1e-12, maxiter=5000, M=M)
            uc = u[c].ravel()
            uc[idx_o] = sol
            u[c] = uc.reshape(shape)
    if diagnostics is not None:
        worst = np.zeros(shape)
        for p, up in zip(patches, fields):
            dev = np.sqrt(((u[(slice(None),) + p.slices] - up) ** 2).sum(axis=0))
            worst[p.slices] = np.maximum(worst[p.slices], dev)
        ov = count >= 2
        diagnostics["n_patches"] = len(patches)
        diagnostics["overlap_pixels"] = int(ov.sum())
        diagnostics["seam_disagreement"] = float(worst[ov].mean()) if ov.any() else 0.0
    return u


def register_patchwise(fixed, moving, global_field: DisplacementField,
                       cfg: Optional[RegistrationConfig] = None,
                       trace: Optional[List[dict]] = None, jobs: int = 1,
                       diagnostics: Optional[dict] = None) -> DisplacementField:
    cfg = cfg or RegistrationConfig()
    fixed = np.asarray(fixed)
    shape = fixed.shape[:2]
    align = 2 ** (cfg.patch_levels - 1)
    patches = make_patches(shape, cfg.patch_size_px, cfg.patch_overlap_px, align)
    dense = global_field.dense(shape)

    def run(i_patch):
        i, p = i_patch
        sub_trace: List[dict] = []
        init = DisplacementField(dense[(slice(None),) + p.slices])
        f = register_nonparametric(fixed[p.slices], moving, init, cfg, trace=sub_trace,
                                   origin=(p.x0, p.y0), levels=cfg.patch_levels,
                                   stage=f"patch{i}")
        return f.u, sub_trace

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, enumerate(patches)))
    else:
        results = [run(ip) for ip in enumerate(patches)]
    if trace is not None:
        for _, t in results:
            trace.extend(t)
    u = merge_patch_fields(shape, patches, [r[0] for r in results], cfg, diagnostics)
    return DisplacementField(u)
