"""8-bit RGB image I/O; in memory images are float arrays in [0, 1] of shape (H, W, 3)."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB")))


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(Path(path), format="PNG")


def image_hash(image: np.ndarray) -> str:
    arr = to_uint8(image)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def resize_to(image: np.ndarray, size: tuple[int, int], scale: float = 1.0) -> np.ndarray:
    """Fit ``image`` to ``size`` = (H, W); ``scale`` zooms the content about the centre first."""
    H, W = size
    if image.shape[:2] == (H, W) and scale == 1.0:
        return to_float(image)
    im = Image.fromarray(to_uint8(image), mode="RGB").resize((W, H), Image.Resampling.BICUBIC)
    if scale != 1.0:
        sw, sh = max(1, round(W * scale)), max(1, round(H * scale))
        scaled = im.resize((sw, sh), Image.Resampling.BICUBIC)
        canvas = Image.new("RGB", (W, H), (0, 0, 0))
        canvas.paste(scaled, ((W - sw) // 2, (H - sh) // 2))
        im = canvas
    return to_float(np.asarray(im))
