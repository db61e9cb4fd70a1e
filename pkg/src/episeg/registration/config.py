from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from ..errors import InputError


@dataclass(frozen=True)
class RegistrationConfig:
    ngf_epsilon: float = 3.0
    curvature_weight: float = 10.0
    pyramid_levels: int = 4
    max_iterations: int = 50
    gradient_tolerance: Optional[float] = None  # None -> 1e-3 * pixel count
    patch_size_px: int = 512
    patch_overlap_px: int = 128
    merge_data_weight: float = 1.0
    # solver plumbing
    smoothing_sigma: float = 1.0
    min_level_size: int = 16
    affine_levels: Optional[int] = None  # None -> pyramid_levels
    patch_levels: int = 2
    armijo_c: float = 1e-4
    max_backtracks: int = 20
    relative_tolerance: float = 1e-6
    cg_iterations: int = 30
    cg_tolerance: float = 1e-2

    def __post_init__(self):
        if not self.ngf_epsilon > 0:
            raise InputError("ngf_epsilon must be > 0")
        if self.curvature_weight < 0:
            raise InputError("curvature_weight must be >= 0")
        if self.pyramid_levels < 1 or self.patch_levels < 1:
            raise InputError("pyramid levels must be >= 1")
        if not 0 < self.patch_overlap_px < self.patch_size_px:
            raise InputError("need 0 < patch_overlap_px < patch_size_px")
        if self.merge_data_weight <= 0:
            raise InputError("merge_data_weight must be > 0")

    def gradient_tol(self, n_pixels: int) -> float:
        if self.gradient_tolerance is None:
            return 1e-3 * n_pixels
        return self.gradient_tolerance

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown registration options: {sorted(unknown)}")
        return cls(**d)
