"""
Image I/O - portable anymap (P6/P5) and PNG codecs through OpenCV

Images load as ImageSample pixels (3, H, W) in [0, 1], RGB order.
Masks are stored single-channel with 255 = valid, 0 = hole, and load as
uint8 (H, W) arrays with 1 = valid.
"""

import logging
import os

import cv2
import numpy as np

from errors import ImageIOError, ValidationError
from synthetic_data import ImageSample

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = (".ppm", ".pgm", ".pnm", ".png")


def _check_extension(path: str) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext not in SUPPORTED_EXTENSIONS:
        raise ImageIOError(path, f"unsupported extension '{ext}' (use {', '.join(SUPPORTED_EXTENSIONS)})")


def _read(path: str, flags: int) -> np.ndarray:
    _check_extension(path)
    if not os.path.isfile(path):
        raise ImageIOError(path, "file not found")
    data = cv2.imread(path, flags)
    if data is None:
        raise ImageIOError(path, "unreadable or malformed image")
    if data.dtype != np.uint8:
        raise ImageIOError(path, f"expected 8-bit samples, got {data.dtype}")
    return data


def _write(path: str, data: np.ndarray) -> None:
    _check_extension(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        ok = cv2.imwrite(path, data)
    except cv2.error as e:
        raise ImageIOError(path, f"encoder failed: {e}")
    if not ok:
        raise ImageIOError(path, "could not write image")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str) -> ImageSample:
    """
    Raises:
        ImageIOError: missing, unreadable or malformed file
    """
    path = str(path)
    bgr = _read(path, cv2.IMREAD_COLOR)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return ImageSample(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0, f"file({path})")


def save_image(pixels, path: str) -> None:
    """Write an ImageSample or (3, H, W) array in [0, 1]."""
    path = str(path)
    arr = pixels.pixels if isinstance(pixels, ImageSample) else np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValidationError(f"save_image needs (3, H, W) pixels, got {arr.shape}")
    bgr = cv2.cvtColor(np.ascontiguousarray(to_uint8(arr).transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    _write(path, bgr)
    logger.debug(f"Saved image {path}")


def load_mask(path: str) -> np.ndarray:
    """Grayscale file -> binary mask (pixels >= 128 are valid)."""
    path = str(path)
    gray = _read(path, cv2.IMREAD_GRAYSCALE)
    if not np.isin(gray, (0, 255)).all():
        logger.warning(f"⚠️ Mask {path} has values other than 0/255; thresholding at 128")
    return (gray >= 128).astype(np.uint8)


def save_mask(mask: np.ndarray, path: str) -> None:
    path = str(path)
    arr = np.asarray(mask)
    if arr.ndim == 4:
        arr = arr[0, 0]
    if arr.ndim != 2 or not np.isin(arr, (0, 1)).all():
        raise ValidationError("save_mask needs a binary (H, W) mask")
    _write(path, (arr * 255).astype(np.uint8))


def save_gray(arr: np.ndarray, path: str) -> None:
    """Write an (H, W) uint8 array, e.g. a kernel grid."""
    path = str(path)
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError(f"save_gray needs a uint8 (H, W) array, got {arr.dtype} {arr.shape}")
    _write(path, arr)
