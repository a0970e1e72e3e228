"""Radiograph preprocessing to the classifier's input convention.

Images become single-channel, square via center crop, 224x224 via
bilinear resize, with intensities mapped linearly onto [-1024, 1024].
By default the mapping uses the source format's full nominal range
(e.g. 0..255 for 8-bit files), matching the convention the classifier
was trained with; a per-image min/max mode exists for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage.transform import resize

TARGET_SIZE = 224
INTENSITY_LIMIT = 1024.0

#: Nominal intensity maxima by PIL mode after grayscale conversion.
_NOMINAL_MAX = {"L": 255.0, "I;16": 65535.0, "I": 65535.0}


@dataclass(frozen=True)
class PreprocessedImage:
    """224x224 grid in [-1024, 1024] plus where it came from."""

    pixels: np.ndarray
    source: str
    crop_box: tuple[int, int, int, int]  # (left, top, width, height)

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.shape != (TARGET_SIZE, TARGET_SIZE):
            raise ValueError(
                f"pixels must be {TARGET_SIZE}x{TARGET_SIZE}, got {pixels.shape}"
            )
        if not np.all(np.isfinite(pixels)):
            raise ValueError("pixels contain non-finite values")
        if pixels.min() < -INTENSITY_LIMIT or pixels.max() > INTENSITY_LIMIT:
            raise ValueError("pixels outside [-1024, 1024]")


def load_grayscale(path: str | Path) -> tuple[np.ndarray, float]:
    """Decode an image to a float grayscale array plus its nominal max."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I"):
                mode = img.mode
                array = np.asarray(img, dtype=np.float64)
                if array.ndim == 3:  # multi-channel 16-bit: average channels
                    array = array.mean(axis=2)
            else:
                mode = "L"
                array = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None
    return array, _NOMINAL_MAX[mode]


def center_crop_box(height: int, width: int) -> tuple[int, int, int, int]:
    side = min(height, width)
    if side == 0:
        raise ValueError("zero-area image")
    top = (height - side) // 2
    left = (width - side) // 2
    return left, top, side, side


def preprocess(
    path: str | Path, per_image_range: bool = False
) -> PreprocessedImage:
    """Grayscale, center crop, resize to 224x224, rescale to [-1024, 1024]."""
    array, nominal_max = load_grayscale(path)
    left, top, side, _ = center_crop_box(*array.shape)
    cropped = array[top : top + side, left : left + side]
    resized = resize(
        cropped, (TARGET_SIZE, TARGET_SIZE), mode="constant", preserve_range=True
    )

    if per_image_range:
        lo, hi = float(resized.min()), float(resized.max())
        if hi == lo:
            raise ValueError(f"{path}: zero intensity range in per-image mode")
        scaled = (resized - lo) / (hi - lo)
    else:
        scaled = resized / nominal_max
    pixels = scaled * (2.0 * INTENSITY_LIMIT) - INTENSITY_LIMIT
    # bilinear resampling cannot overshoot, so this only guards the contract
    np.clip(pixels, -INTENSITY_LIMIT, INTENSITY_LIMIT, out=pixels)
    return PreprocessedImage(
        pixels=pixels.astype(np.float32),
        source=str(path),
        crop_box=(left, top, side, side),
    )
