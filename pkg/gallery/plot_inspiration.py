"""
Painting from an inspiration
============================

Style transfer moves a cat photo toward the filter statistics of a brick
texture.  An optional HSV remap keeps the cat's colours.  The result is
then painted with the edge-following fallback painter.
"""
from pathlib import Path

import numpy as np

from brushwork import imageio
from brushwork.inspiration import InspireOptions, fallback_baseline, fallback_painter, inspire_paint
from brushwork.photos import load_photo

OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)
subject = imageio.resize(load_photo("chelsea")[50:250, 100:300] / 255.0, 64, 64)
inspiration = imageio.resize(load_photo("brick")[:256, :256] / 255.0, 64, 64)

# %%
result = inspire_paint(subject, inspiration, fallback_baseline(3000), InspireOptions(steps=100, seed=1))
history = result.imagination.history
print(f"style loss {history[0]:.2e} -> {history[-1]:.2e}")
print(result.manifest())

# %%
remapped = inspire_paint(subject, inspiration, fallback_baseline(3000),
                         InspireOptions(steps=100, hsv_remap=True, seed=1))

# %%
# The fallback painter on its own gets closer to the subject with more strokes.
for count in (100, 1000, 10000):
    out = fallback_painter(subject, count, np.random.default_rng(0))
    print(f"{count:5d} strokes: L1 {np.abs(out - subject).mean():.4f}")

imageio.write_png(OUT / "inspiration.png", imageio.grid([
    [subject, inspiration, result.imagination.image, result.painting],
    [subject, inspiration, remapped.imagination.image, remapped.painting],
]))
