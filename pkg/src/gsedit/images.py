"""Image buffers, PNG / raw-float IO, and 2x2 multi-view grid assembly."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DimensionMismatch


@dataclass
class ImageBuffer:
    """Row-major RGB image with float64 channels in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray = field(repr=False)  # (H, W, 3) float64

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (self.height, self.width, 3):
            raise DimensionMismatch(
                f"pixel array {px.shape} does not match {self.height}x{self.width}x3"
            )
        if not np.all(np.isfinite(px)):
            raise DimensionMismatch("pixel values must be finite")
        self.pixels = np.clip(px, 0.0, 1.0)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageBuffer":
        pixels = np.asarray(pixels, dtype=np.float64)
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, pixels=pixels)

    @classmethod
    def solid(cls, width: int, height: int, rgb) -> "ImageBuffer":
        px = np.empty((height, width, 3), dtype=np.float64)
        px[:] = np.asarray(rgb, dtype=np.float64)
        return cls(width=width, height=height, pixels=px)

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.width, self.height, self.pixels.copy())

    def same_size(self, other: "ImageBuffer") -> bool:
        return self.width == other.width and self.height == other.height

    # -- IO -----------------------------------------------------------------

    def save_png(self, path: str | os.PathLike) -> None:
        """8-bit RGB PNG (no alpha); values are rounded, not dithered."""
        data = np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")

    @classmethod
    def load_png(cls, path: str | os.PathLike) -> "ImageBuffer":
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls.from_array(data)

    def save_raw(self, path: str | os.PathLike) -> None:
        """Lossless float32 .npy buffer, for gradient-grade round trips."""
        np.save(path, self.pixels.astype(np.float32))

    @classmethod
    def load_raw(cls, path: str | os.PathLike) -> "ImageBuffer":
        return cls.from_array(np.load(path).astype(np.float64))


def load_gray_png(path: str | os.PathLike) -> np.ndarray:
    """Single-channel mask PNG -> (H, W) float64 array of {0, 1}."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (data > 0.5).astype(np.float64)


def save_gray_png(mask: np.ndarray, path: str | os.PathLike) -> None:
    data = (np.asarray(mask, dtype=np.float64) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path, format="PNG")


# -- 2x2 grid ----------------------------------------------------------------

def assemble_grid(frames: list[ImageBuffer]) -> ImageBuffer:
    """Tile four equal-size frames row-major: [0 1; 2 3] -> one 2W x 2H image."""
    if len(frames) != 4:
        raise DimensionMismatch(f"grid needs exactly 4 frames, got {len(frames)}")
    w, h = frames[0].width, frames[0].height
    for f in frames[1:]:
        if f.width != w or f.height != h:
            raise DimensionMismatch("grid frames must share dimensions")
    top = np.concatenate([frames[0].pixels, frames[1].pixels], axis=1)
    bottom = np.concatenate([frames[2].pixels, frames[3].pixels], axis=1)
    return ImageBuffer.from_array(np.concatenate([top, bottom], axis=0))


def split_grid(grid: ImageBuffer) -> list[ImageBuffer]:
    """Inverse of :func:`assemble_grid`; recovers the four quadrants bitwise."""
    if grid.width % 2 or grid.height % 2:
        raise DimensionMismatch("grid dimensions must be even")
    h, w = grid.height // 2, grid.width // 2
    px = grid.pixels
    quads = [px[:h, :w], px[:h, w:], px[h:, :w], px[h:, w:]]
    return [ImageBuffer.from_array(q.copy()) for q in quads]


def assemble_grid_array(tiles: list[np.ndarray]) -> np.ndarray:
    """Grid assembly for plain 2D arrays (masks); same [0 1; 2 3] placement."""
    if len(tiles) != 4:
        raise DimensionMismatch(f"grid needs exactly 4 tiles, got {len(tiles)}")
    top = np.concatenate([tiles[0], tiles[1]], axis=1)
    bottom = np.concatenate([tiles[2], tiles[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)
