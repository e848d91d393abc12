"""Public-domain sample photographs for demos and tests.

Every image here is a photograph or a scientific image; drawings, paintings,
and synthetic graphics from the same collections are left out on purpose.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TRAIN = ("astronaut", "coffee", "rocket", "hubble_deep_field", "immunohistochemistry", "retina",
         "camera", "coins", "moon", "grass", "gravel", "brick", "china", "flower")
HELD_OUT = ("chelsea",)


def load_photo(name: str) -> np.ndarray:
    """uint8 (H, W, 3) array; gray images are repeated over three channels."""
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image
        arr = load_sample_image(f"{name}.jpg")
    else:
        import skimage.data
        arr = getattr(skimage.data, name)()
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return np.ascontiguousarray(arr[..., :3])


def export_photos(directory, names=TRAIN) -> list:
    """Write the named photos as PNG files into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        path = directory / f"{name}.png"
        if not path.exists():
            Image.fromarray(load_photo(name)).save(path)
        paths.append(path)
    return paths
