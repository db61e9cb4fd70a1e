"""Layer bookkeeping for full-size U-Nets (sizes and parameter counts only).

Each level holds two 3x3 convolutions with ``base * 2**depth`` filters. The
decoder upsamples, concatenates the encoder output of the same level and
applies another pair of 3x3 convolutions; a final 1x1 convolution maps to the
class logits. The within-block skip connections are additive identities and
carry no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

from ..errors import IndivisibleInput, InputError


def conv_params(cin: int, cout: int, k: int = 3) -> int:
    return cin * cout * k * k + cout


@dataclass(frozen=True)
class LevelInfo:
    depth: int
    size_px: int
    filters: int
    encoder_params: int
    decoder_params: int


@dataclass(frozen=True)
class UNetTopology:
    levels: int
    base_filters: int
    input_size_px: int
    per_level: List[LevelInfo]
    head_params: int
    in_channels: int = 3
    n_classes: int = 2

    @property
    def total_params(self) -> int:
        return sum(l.encoder_params + l.decoder_params for l in self.per_level) + self.head_params

    @property
    def output_size_px(self) -> int:
        return self.input_size_px

    @property
    def level_sizes(self) -> List[int]:
        return [l.size_px for l in self.per_level]


def unet_topology(levels: int, base_filters: int = None, input_size: int = 512,
                  in_channels: int = 3, n_classes: int = 2) -> UNetTopology:
    """Sizes, filter counts and parameter counts of a ``levels``-deep U-Net.

    ``base_filters`` defaults to 32 for 5 levels and 16 otherwise.
    """
    if levels < 1:
        raise InputError("levels must be >= 1")
    if base_filters is None:
        base_filters = 32 if levels <= 5 else 16
    if base_filters < 1 or input_size < 1:
        raise InputError("base_filters and input_size must be positive")
    if input_size % 2 ** (levels - 1):
        raise IndivisibleInput(f"input size {input_size} is not divisible by 2^{levels - 1}")
    filters = [base_filters * 2 ** d for d in range(levels)]
    info = []
    cin = in_channels
    for d, f in enumerate(filters):
        enc = conv_params(cin, f) + conv_params(f, f)
        dec = 0
        if d < levels - 1:
            dec = conv_params(filters[d + 1] + f, f) + conv_params(f, f)
        info.append(LevelInfo(d, input_size // 2 ** d, f, enc, dec))
        cin = f
    head = conv_params(filters[0], n_classes, 1)
    return UNetTopology(levels, base_filters, input_size, info, head, in_channels, n_classes)
