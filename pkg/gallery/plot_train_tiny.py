"""
Training a small artist
=======================

Export the public-domain photo corpus, cut patches, train artist and
decoder jointly for a few hundred steps at 32x32, then paint a photo the
networks never saw.  The full-size run (64x64, 2000 steps) is the same
call with ``TrainConfig()``.
"""
import logging
import tempfile
from pathlib import Path

import numpy as np

from brushwork import imageio
from brushwork.photos import HELD_OUT, export_photos, load_photo
from brushwork.training import TrainConfig, ingest, paint, save_checkpoint, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)
work = Path(tempfile.mkdtemp())

# %%
# Patches are random square crops resized to the working resolution.
export_photos(work / "photos")
corpus = ingest(work / "photos", 32, 8, 0, manifest_path=work / "photos" / "manifest.txt")
print(len(corpus), "patches")

# %%
config = TrainConfig(resolution=32, widths=(16, 32, 16), steps=300, sample_every=100)
ck = train(corpus, config, out_dir=OUT / "train_tiny")
save_checkpoint(ck, OUT / "train_tiny" / "checkpoint.aiap")
rec = ck.history["reconstruction"]
print(f"reconstruction term: first 50 {np.mean(rec[:50]):.3f}, last 50 {np.mean(rec[-50:]):.3f}")

# %%
# Paint the held-out photo in 32x32 patches with more iterations than in training.
subject = imageio.resize(load_photo(HELD_OUT[0]) / 255.0, 128, 128)
painting, _ = paint(ck, subject, 8, np.random.default_rng(0), patch_size=32)
print("L1 painting:", np.abs(painting - subject).mean(),
      "mean-colour fill:", np.abs(subject - subject.mean(axis=(0, 1))).mean())
imageio.write_png(OUT / "train_tiny_painting.png", imageio.grid([[subject, painting]]))
