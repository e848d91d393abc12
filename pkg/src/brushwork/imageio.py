"""8-bit RGB PNG input and output."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """Decode any Pillow-readable file to an (H, W, 3) float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    return path


def resize(image, height: int, width: int) -> np.ndarray:
    """Box-filter resize of an (H, W, 3) float image; identity when sizes agree."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (height, width):
        return image.copy()
    chans = [
        np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F").resize((width, height), Image.Resampling.BOX))
        for c in range(image.shape[2])
    ]
    return np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)


def grid(rows, pad: int = 2) -> np.ndarray:
    """Tile a list of rows (each a list of equally sized images) with white gutters."""
    h, w = np.asarray(rows[0][0]).shape[:2]
    ncols = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = np.asarray(im)
    return out
