"""Composition, blurring, and rendering of input-gradient saliency maps.

Per-task input gradients arrive as XGRD rasters (a minimal binary grid
format, below). Because the probe is linear in the network outputs, the
gradient of its prediction is the weight-sum of the per-task gradients;
that composed map is smoothed with a 5x5 Gaussian kernel and rendered
as an 8-bit grayscale image.

XGRD format: 16-byte header = magic ``XGRD``, then unsigned 32-bit
little-endian width, height, and a reserved zero word; followed by
width*height IEEE-754 32-bit little-endian floats, row-major.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .regress import RegressionModel, feature_set_columns

XGRD_MAGIC = b"XGRD"
XGRD_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class GradientRaster:
    """One task's input-gradient grid for one image."""

    image_id: str
    task: str
    values: np.ndarray  # float32, shape (height, width)

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("gradient raster contains non-finite values")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class SaliencyMap:
    image_id: str
    values: np.ndarray  # float, shape (height, width)

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("saliency map contains non-finite values")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def raster_filename(image_id: str, task: str) -> str:
    return f"{image_id}__{task}.xgrd"


def _split_raster_stem(stem: str) -> tuple[str, str]:
    image_id, sep, task = stem.rpartition("__")
    if not sep:
        return stem, ""
    return image_id, task


def load_gradient_raster(path: str | Path) -> GradientRaster:
    """Read an XGRD file; image id and task are taken from the filename.

    Files written by :func:`store_gradient_raster` follow the
    ``<image_id>__<task>.xgrd`` convention; a stem without ``__``
    yields an empty task.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < XGRD_HEADER.size:
        raise ValueError(
            f"{path}: truncated header, expected {XGRD_HEADER.size} bytes,"
            f" got {len(blob)}"
        )
    magic, width, height, _reserved = XGRD_HEADER.unpack_from(blob)
    if magic != XGRD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {XGRD_MAGIC!r}")
    expected = XGRD_HEADER.size + 4 * width * height
    if len(blob) != expected:
        raise ValueError(
            f"{path}: payload size mismatch, expected {expected} bytes"
            f" for {width}x{height}, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=XGRD_HEADER.size)
    values = values.reshape(height, width)
    image_id, task = _split_raster_stem(path.stem)
    return GradientRaster(image_id=image_id, task=task, values=values)


def store_gradient_raster(raster: GradientRaster, path: str | Path) -> None:
    """Write an XGRD file. Values are stored as little-endian float32."""
    values = np.ascontiguousarray(raster.values, dtype="<f4")
    header = XGRD_HEADER.pack(XGRD_MAGIC, raster.width, raster.height, 0)
    Path(path).write_bytes(header + values.tobytes())


def compose_saliency(
    model: RegressionModel, grads: dict[str, GradientRaster]
) -> SaliencyMap:
    """Weight-sum the per-task gradients into the probe's saliency map.

    The intercept contributes nothing. Requires one raster per model
    feature, all of the same shape.
    """
    if model.feature_set is None:
        raise ValueError("model does not name its feature set; cannot compose")
    columns = feature_set_columns(model.feature_set)
    if not columns:
        raise ValueError("model has no features; nothing to compose")
    missing = [c for c in columns if c not in grads]
    if missing:
        raise ValueError(f"missing gradient rasters for: {missing}")
    shapes = {grads[c].values.shape for c in columns}
    if len(shapes) > 1:
        raise ValueError(f"gradient rasters disagree in shape: {sorted(shapes)}")

    first = grads[columns[0]]
    total = np.zeros(first.values.shape, dtype=float)
    for weight, column in zip(model.weights, columns):
        total += weight * np.asarray(grads[column].values, dtype=float)
    return SaliencyMap(image_id=first.image_id, values=total)


def gaussian_kernel_5x5(sigma: float = 1.0) -> np.ndarray:
    """Normalized 5x5 kernel sampled from a 2-D Gaussian at offsets -2..2."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(-2, 3, dtype=float)
    one_d = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kernel = np.outer(one_d, one_d)
    return kernel / kernel.sum()


def gaussian_blur_5x5(smap: SaliencyMap, sigma: float = 1.0) -> SaliencyMap:
    """Convolve with the normalized 5x5 Gaussian, replicate-edge padding."""
    values = np.asarray(smap.values, dtype=float)
    if values.shape[0] < 5 or values.shape[1] < 5:
        raise ValueError(f"raster must be at least 5x5, got {values.shape}")
    kernel = gaussian_kernel_5x5(sigma)
    padded = np.pad(values, 2, mode="edge")
    out = np.zeros_like(values)
    for di in range(5):
        for dj in range(5):
            out += kernel[di, dj] * padded[
                di : di + values.shape[0], dj : dj + values.shape[1]
            ]
    return SaliencyMap(image_id=smap.image_id, values=out)


def render_saliency(smap: SaliencyMap, path: str | Path) -> None:
    """Min-max normalize to 0..255 and write a binary graymap (P5).

    A constant map carries no contrast to normalize; it is rendered as
    uniform mid-gray (128) with a warning.
    """
    values = np.asarray(smap.values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        warnings.warn(
            f"saliency map {smap.image_id!r} is constant; rendering mid-gray",
            stacklevel=2,
        )
        pixels = np.full(values.shape, 128, dtype=np.uint8)
    else:
        scaled = (values - lo) / (hi - lo)
        pixels = np.rint(scaled * 255.0).astype(np.uint8)
    write_graymap(pixels, path)


def write_graymap(pixels: np.ndarray, path: str | Path) -> None:
    """Write an 8-bit binary portable graymap (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("pixels must be a 2-D uint8 array")
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_graymap(path: str | Path) -> np.ndarray:
    """Read back a P5 graymap as written by :func:`write_graymap`."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 graymap written by this toolkit")
    width, height = (int(tok) for tok in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: unsupported maxval {parts[2]!r}")
    payload = parts[3]
    if len(payload) != width * height:
        raise ValueError(
            f"{path}: payload size mismatch, expected {width * height} bytes,"
            f" got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
