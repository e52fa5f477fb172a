"""Image decode/encode and resampling helpers.

PNG and PPM are the two supported pixel formats (one compressed, one
trivially parseable); Pillow handles both codecs. Resampling is a
hand-rolled bilinear kernel so the exact arithmetic is pinned down for
train/serve consistency.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

SUPPORTED_EXTENSIONS = (".png", ".ppm")


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a uint8 [H, W, 3] RGB array."""
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_EXTENSIONS:
        raise DataError(f"unsupported image format {path.suffix!r} for {path} (expected .png/.ppm)")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write a uint8 [H, W, 3] or [H, W, 4] array as PNG or PPM (by extension)."""
    path = Path(path)
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected uint8 [H, W, 3|4] pixels, got dtype {arr.dtype} shape {arr.shape}")
    if path.suffix.lower() not in SUPPORTED_EXTENSIONS:
        raise ValueError(f"unsupported image format {path.suffix!r} (expected .png/.ppm)")
    mode = "RGBA" if arr.shape[2] == 4 else "RGB"
    if path.suffix.lower() == ".ppm" and mode == "RGBA":
        raise ValueError("PPM cannot store an alpha channel")
    Image.fromarray(arr, mode=mode).save(path)


def bilinear_resize(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of an [H, W] or [H, W, C] array.

    Uses half-pixel sample centers (source x = (dst + 0.5) * scale - 0.5,
    clamped at the borders), so resizing to the same size is the identity
    and constant images stay constant.  uint8 input is promoted to float32;
    float input keeps its dtype.  The caller rounds/clips if 8-bit output
    is needed.
    """
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected 2-d or 3-d image, got shape {arr.shape}")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output size must be positive, got {out_hw}")
    in_h, in_w = arr.shape[:2]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32)
    if (out_h, out_w) == (in_h, in_w):
        return arr.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    fy = fy.reshape(-1, 1) if arr.ndim == 2 else fy.reshape(-1, 1, 1)
    fx = fx.reshape(1, -1) if arr.ndim == 2 else fx.reshape(1, -1, 1)

    top = arr[y0][:, x0] * (1.0 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1.0 - fx) + arr[y1][:, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    return out.astype(arr.dtype, copy=False)
