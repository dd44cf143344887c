"""Reversible Laplacian pyramid on ``(N, C, H, W)`` tensors.

Downsampling is a separable 5-tap binomial blur (``[1, 4, 6, 4, 1] / 16``,
reflect padding) followed by stride-2 subsampling. Upsampling is bilinear
with ``align_corners=False``. Because ``reconstruct`` reuses the exact
upsampling operator of ``decompose``, the round trip is exact up to
floating-point rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

BINOMIAL_5 = (1.0, 4.0, 6.0, 4.0, 1.0)
MAX_DEPTH = 5


class DimensionError(ValueError):
    """Raised when spatial dimensions are incompatible with an operation."""


class PyramidStructureError(ValueError):
    """Raised when pyramid levels have mutually inconsistent sizes."""


def binomial_kernel(dtype=torch.float64, device=None) -> torch.Tensor:
    k = torch.tensor(BINOMIAL_5, dtype=dtype, device=device)
    return k / k.sum()


def _check_4d(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise DimensionError(f"expected an (N, C, H, W) tensor, got shape {tuple(x.shape)}")


def blur(x: torch.Tensor) -> torch.Tensor:
    """Separable binomial blur with reflect padding, same output size."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise DimensionError(f"reflect padding needs height and width >= 3, got {h}x{w}")
    k = binomial_kernel(x.dtype, x.device)
    y = x.reshape(n * c, 1, h, w)
    y = F.pad(y, (2, 2, 2, 2), mode="reflect")
    y = F.conv2d(y, k.view(1, 1, 1, 5))
    y = F.conv2d(y, k.view(1, 1, 5, 1))
    return y.reshape(n, c, h, w)


def blur_downsample(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x)
    h, w = x.shape[-2:]
    if h % 2:
        raise DimensionError(f"blur_downsample needs an even height, got {h}")
    if w % 2:
        raise DimensionError(f"blur_downsample needs an even width, got {w}")
    return blur(x)[..., ::2, ::2]


def upsample(x: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear 2x upsampling, ``align_corners=False`` (half-pixel centres)."""
    _check_4d(x)
    h, w = x.shape[-2:]
    if target_h != 2 * h or target_w != 2 * w:
        raise DimensionError(
            f"upsample target must be exactly 2x the input: {h}x{w} -> {target_h}x{target_w}"
        )
    return F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return upsample(x, 2 * x.shape[-2], 2 * x.shape[-1])


@dataclass
class Pyramid:
    """High-frequency bands, finest first, plus the low-frequency residual."""

    bands: list[torch.Tensor]
    residual: torch.Tensor

    @property
    def depth(self) -> int:
        return len(self.bands)


def check_divisible(h: int, w: int, divisor: int) -> None:
    if h % divisor or w % divisor:
        raise DimensionError(f"height and width must be divisible by {divisor}, got {h}x{w}")


def decompose(x: torch.Tensor, depth: int = 3) -> Pyramid:
    _check_4d(x)
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    check_divisible(x.shape[-2], x.shape[-1], 2**depth)
    bands = []
    current = x
    for _ in range(depth):
        down = blur_downsample(current)
        bands.append(current - upsample2x(down))
        current = down
    return Pyramid(bands=bands, residual=current)


def reconstruct(pyr: Pyramid) -> torch.Tensor:
    current = pyr.residual
    for level in range(pyr.depth - 1, -1, -1):
        band = pyr.bands[level]
        if band.shape[-2:] != (2 * current.shape[-2], 2 * current.shape[-1]) or band.shape[:2] != current.shape[:2]:
            raise PyramidStructureError(
                f"level {level + 1}: band shape {tuple(band.shape)} does not match "
                f"2x the coarser level {tuple(current.shape)}"
            )
        current = band + upsample2x(current)
    return current
