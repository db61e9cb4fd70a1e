"""Transform containers: affine maps and dense displacement fields.

Coordinates are ``(x, y) = (column, row)`` in pixels. A transform maps a point
of the fixed image to the moving image: ``warped(x) = moving(x + u(x))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InputError
from .sampling import bilinear


def pixel_grid(shape, origin=(0.0, 0.0)):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    return x + origin[0], y + origin[1]


@dataclass
class AffineTransform:
    A: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, float).reshape(2, 2)
        self.t = np.asarray(self.t, float).reshape(2)
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.t)):
            raise InputError("affine transform must be finite")
        if np.linalg.det(self.A) <= 0:
            raise InputError("affine transform must preserve orientation (det(A) > 0)")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def rigid(cls, angle_deg: float, shift=(0.0, 0.0), center=(0.0, 0.0)) -> "AffineTransform":
        """Rotation by ``angle_deg`` about ``center`` followed by ``shift``."""
        a = np.deg2rad(angle_deg)
        A = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        c = np.asarray(center, float)
        return cls(A, c - A @ c + np.asarray(shift, float))

    @property
    def angle_deg(self) -> float:
        return float(np.rad2deg(np.arctan2(self.A[1, 0] - self.A[0, 1], self.A[0, 0] + self.A[1, 1])))

    def apply(self, x, y):
        return (self.A[0, 0] * x + self.A[0, 1] * y + self.t[0],
                self.A[1, 0] * x + self.A[1, 1] * y + self.t[1])

    def displacement(self, shape, origin=(0.0, 0.0)) -> np.ndarray:
        x, y = pixel_grid(shape, origin)
        px, py = self.apply(x, y)
        return np.stack([px - x, py - y])

    def to_field(self, shape) -> "DisplacementField":
        return DisplacementField(self.displacement(shape))


@dataclass
class DisplacementField:
    """Displacements ``u`` of shape (2, grid_h, grid_w), in level-0 pixels.

    Node ``(i, j)`` sits at pixel ``(spacing*j + (spacing-1)/2, spacing*i + (spacing-1)/2)``
    which is the centre of the corresponding pixel of pyramid level
    ``log2(spacing)``.
    """

    u: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.u = np.asarray(self.u, float)
        if self.u.ndim != 3 or self.u.shape[0] != 2:
            raise InputError("displacement array must have shape (2, h, w)")
        if not np.all(np.isfinite(self.u)):
            raise InputError("displacement field contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.u.shape[1]

    @property
    def grid_w(self) -> int:
        return self.u.shape[2]

    @classmethod
    def zeros(cls, shape, spacing: float = 1.0) -> "DisplacementField":
        return cls(np.zeros((2,) + tuple(shape)), spacing)

    def dense(self, shape) -> np.ndarray:
        """Displacement at every pixel of an image of ``shape`` (bilinear between nodes)."""
        shape = tuple(shape)
        if self.spacing == 1 and self.u.shape[1:] == shape:
            return self.u.copy()
        h = float(self.spacing)
        x, y = pixel_grid(shape)
        gx = (x - (h - 1) / 2) / h
        gy = (y - (h - 1) / 2) / h
        return np.stack([bilinear(self.u[c], gx, gy, mode="clamp") for c in range(2)])

    def max_norm(self) -> float:
        return float(np.sqrt((self.u ** 2).sum(axis=0)).max())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = {"grid_w": self.grid_w, "grid_h": self.grid_h, "spacing": float(self.spacing)}
        (d / "field.json").write_text(json.dumps(header, indent=2))
        inter = np.moveaxis(self.u, 0, -1).astype("<f4")
        inter.tofile(d / "field.bin")

    @classmethod
    def load(cls, directory) -> "DisplacementField":
        d = Path(directory)
        try:
            header = json.loads((d / "field.json").read_text())
            raw = np.fromfile(d / "field.bin", dtype="<f4")
        except FileNotFoundError as e:
            raise InputError(f"missing displacement field file: {e.filename}") from None
        gh, gw = int(header["grid_h"]), int(header["grid_w"])
        if raw.size != gh * gw * 2:
            raise InputError(f"field.bin holds {raw.size} floats, expected {gh * gw * 2}")
        u = np.moveaxis(raw.reshape(gh, gw, 2), -1, 0).astype(float)
        return cls(u, float(header.get("spacing", 1.0)))


def endpoint_error(u_est: np.ndarray, u_true: np.ndarray, mask=None) -> float:
    """Mean Euclidean distance between two dense displacement arrays."""
    err = np.sqrt(((u_est - u_true) ** 2).sum(axis=0))
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    return float(err.mean())
