"""8-bit RGB image container, PNG round-trip, and the shared crop-window rule."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import VoiError


@dataclass
class Image:
    """RGB image, 8 bits per channel, row-major (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise VoiError(f"expected (H,W,3) pixel array, got {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def save_png(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(self.pixels, mode="RGB").save(str(path), format="PNG")

    @classmethod
    def load_png(cls, path):
        with PILImage.open(str(path)) as im:
            return cls(np.asarray(im.convert("RGB")))

    def to_float(self) -> np.ndarray:
        """(H,W,3) float32 in [0,1]."""
        return self.pixels.astype(np.float32) / 255.0

    @classmethod
    def from_float(cls, arr) -> "Image":
        return cls(np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8))


def place_crop_window(cx: int, cy: int, side: int, width: int, height: int):
    """Top-left corner of a side*side window nominally centered at (cx, cy).

    When the window would cross an image border it is shifted by the minimal
    amount that keeps it fully inside; no padding is ever introduced.
    Returns (left, top, dx, dy) where (dx, dy) is the requested center minus
    the actual window center.
    """
    if side > width or side > height:
        raise VoiError(f"crop side {side} exceeds frame size {width}x{height}")
    if not (0 <= cx < width and 0 <= cy < height):
        raise VoiError(f"crop center ({cx},{cy}) outside frame")
    left = min(max(cx - side // 2, 0), width - side)
    top = min(max(cy - side // 2, 0), height - side)
    return left, top, cx - (left + side // 2), cy - (top + side // 2)


def crop(image: Image, left: int, top: int, side: int) -> Image:
    return Image(image.pixels[top : top + side, left : left + side].copy())
