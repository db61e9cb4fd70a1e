"""H&E-to-IHC registration: gray-scale, affine, deformable NGF + curvature, patch-wise merge."""

from .affine import register_affine
from .config import RegistrationConfig
from .curvature import curvature_energy
from .ngf import ngf_distance
from .nonparametric import register_nonparametric
from .patchwise import merge_patch_fields, register_patchwise
from .sampling import to_grayscale
from .transforms import AffineTransform, DisplacementField, endpoint_error
from .warp import warp_image, warp_mask

__all__ = [
    "AffineTransform", "DisplacementField", "RegistrationConfig", "curvature_energy",
    "endpoint_error", "merge_patch_fields", "ngf_distance", "register", "register_affine",
    "register_nonparametric", "register_patchwise", "to_grayscale", "warp_image", "warp_mask",
]


def register(fixed, moving, cfg=None, trace=None, skip_patchwise=False, jobs=1, diagnostics=None):
    """Full chain: affine, then deformable, then patch-wise refinement."""
    cfg = cfg or RegistrationConfig()
    affine = register_affine(fixed, moving, cfg, trace=trace)
    field = register_nonparametric(fixed, moving, affine, cfg, trace=trace)
    if diagnostics is not None:
        diagnostics["affine_A"] = affine.A.tolist()
        diagnostics["affine_t"] = affine.t.tolist()
    if skip_patchwise:
        return field
    return register_patchwise(fixed, moving, field, cfg, trace=trace, jobs=jobs, diagnostics=diagnostics)
