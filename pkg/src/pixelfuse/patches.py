"""Image <-> patch-token conversion.

Images are H x W x C arrays. Patches are ordered row-major over the patch
grid; inside a patch, pixels are row-major with channels fastest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    height_px: int
    width_px: int
    channels: int
    patch_size: int

    def __post_init__(self):
        for name in ("height_px", "width_px", "channels", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.height_px % self.patch_size or self.width_px % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide image {self.height_px}x{self.width_px}")

    @property
    def rows(self) -> int:
        return self.height_px // self.patch_size

    @property
    def cols(self) -> int:
        return self.width_px // self.patch_size

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height_px, self.width_px, self.channels)


def patchify(image, grid: PatchGrid):
    """(..., H, W, C) -> (..., N, D). Works for numpy arrays and torch tensors."""
    if tuple(image.shape[-3:]) != grid.image_shape:
        raise ValueError(f"image shape {tuple(image.shape[-3:])} does not match grid {grid.image_shape}")
    lead = tuple(image.shape[:-3])
    p = grid.patch_size
    x = image.reshape(*lead, grid.rows, p, grid.cols, p, grid.channels)
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, grid.token_count, grid.token_dim)


def unpatchify(tokens, grid: PatchGrid):
    """(..., N, D) -> (..., H, W, C); exact inverse of patchify."""
    if tuple(tokens.shape[-2:]) != (grid.token_count, grid.token_dim):
        raise ValueError(
            f"tokens shape {tuple(tokens.shape[-2:])} inconsistent with grid "
            f"({grid.token_count}, {grid.token_dim})")
    lead = tuple(tokens.shape[:-2])
    p = grid.patch_size
    x = tokens.reshape(*lead, grid.rows, grid.cols, p, p, grid.channels)
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, *grid.image_shape)


def position_ids(grid: PatchGrid) -> list[tuple[int, int]]:
    return [(r, c) for r in range(grid.rows) for c in range(grid.cols)]


def to_unit_range(pixels_u8: np.ndarray) -> np.ndarray:
    """8-bit pixels -> [-1, 1]."""
    return pixels_u8.astype(np.float64) / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> 8-bit, rounding to nearest."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
