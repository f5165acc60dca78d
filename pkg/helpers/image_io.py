# helpers/image_io.py
import os
from typing import Optional

import numpy as np
from PIL import Image, PngImagePlugin, UnidentifiedImageError

from errors import DataError


def _open_gray(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}")


SUPPORTED_READERS = {
    ".png": _open_gray,
    ".pgm": _open_gray,
    ".pnm": _open_gray,
    ".bmp": _open_gray,
    ".tif": _open_gray,
    ".tiff": _open_gray,
}


def read_gray(path: str) -> np.ndarray:
    """8-bit grayscale pixels [H, W] as uint8."""
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    reader = SUPPORTED_READERS.get(ext)
    if reader is None:
        raise DataError(f"unsupported image type {ext!r}: {path}")
    return reader(path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> 8-bit, rounded to nearest."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path: str, pixels: np.ndarray, header: Optional[str] = None) -> str:
    """Write [H, W] uint8 (or [0, 1] floats). PNG files carry ``header`` as a text chunk."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img = Image.fromarray(arr)
    if header and path.lower().endswith(".png"):
        info = PngImagePlugin.PngInfo()
        info.add_text("provenance", header)
        img.save(path, pnginfo=info)
    else:
        img.save(path)
    return path
