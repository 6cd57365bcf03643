"""8-bit grayscale image files (PGM/PNG) via Pillow."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import UnreadableImage

IMAGE_SUFFIXES = (".pgm", ".png", ".pnm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def write_gray(path, pixels: np.ndarray) -> None:
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_gray(path) -> np.ndarray:
    """Load an image as uint8 luma (ITU-R 601 weights for colour input)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                top = 65535.0 if arr.max() > 255 else 255.0
                return np.clip(np.round(arr * 255.0 / top), 0, 255).astype(np.uint8)
            if im.mode != "L":
                im = im.convert("L")
            return np.array(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise UnreadableImage(path) from exc


def list_images(directory) -> list[str]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]
