"""Style transfer onto the subject, HSV recolouring, and painting the result.

An inspiration photo lends its texture statistics (Gram matrices of fixed
filter-bank responses) to the subject; the resulting "imagination" image is
then handed to a painting routine, either a trained artist or the
hand-written :func:`fallback_painter`.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import imageio
from .medium import bilinear_sample, projection_field, rasterize_stroke, trace_strokes
from .perception import structure_field
from .tensor import Tape, Tensor, as_tensor, conv2d, custom_op, leaf, no_grad

SCALES = (3, 5, 9)


# --- feature extractor --------------------------------------------------------

def _oriented(size: int, theta: float, kind: str) -> np.ndarray:
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    sigma = max(size / 4.0, 0.6)
    u = x * np.cos(theta) + y * np.sin(theta)      # across the edge
    v = -x * np.sin(theta) + y * np.cos(theta)     # along the edge
    envelope = np.exp(-(u * u + v * v) / (2 * sigma * sigma))
    if kind == "edge":
        k = u * envelope
    else:
        k = (1 - u * u / (sigma * sigma)) * envelope
    return k


def _center_surround(size: int, sign: float) -> np.ndarray:
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    s1 = max(size / 6.0, 0.5)
    d2 = x * x + y * y
    center = np.exp(-d2 / (2 * s1 * s1))
    surround = np.exp(-d2 / (2 * (2 * s1) ** 2))
    return sign * (center / center.sum() - surround / surround.sum())


def filter_bank(size: int) -> np.ndarray:
    """16 zero-sum filters (8 edge, 6 bar, on- and off-centre), each of unit L1 norm."""
    ks = [_oriented(size, t, "edge") for t in np.arange(8) * np.pi / 4]
    ks += [_oriented(size, t, "bar") for t in np.arange(6) * np.pi / 6]
    ks += [_center_surround(size, 1.0), _center_surround(size, -1.0)]
    out = []
    for k in ks:
        k = k - k.mean()
        out.append(k / np.abs(k).sum())
    return np.stack(out)


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed list of conv layers, each applied to the RGB image and rectified.

    The default bank filters every colour channel separately, so each layer
    has ``3 * 16`` output maps.  Layers are ordered fine to coarse; the last
    one is used for the content term.
    """

    kernels: tuple
    seed: int = 0

    def __post_init__(self):
        for k in self.kernels:
            k.setflags(write=False)

    @classmethod
    def default(cls, seed: int = 0, scales=SCALES) -> "FeatureExtractor":
        # the bank is analytic; the seed only fixes the channel order
        rng = np.random.default_rng(seed)
        layers = []
        for size in scales:
            bank = filter_bank(size)
            bank = bank[rng.permutation(len(bank))]
            w = np.zeros((3 * len(bank), 3, size, size))
            for c in range(3):
                w[c * len(bank):(c + 1) * len(bank), c] = bank
            layers.append(w)
        return cls(tuple(layers), seed)

    @property
    def depth(self) -> int:
        return len(self.kernels)

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        for k in self.kernels:
            h.update(str(k.shape).encode())
            h.update(np.ascontiguousarray(k, dtype="<f8").tobytes())
        return h.digest()

    def save(self, path) -> Path:
        """Store the kernels in the checkpoint container format."""
        from .training import MAGIC, VERSION, _record
        buf = bytearray(MAGIC + struct.pack("<I", VERSION) + self.fingerprint())
        for i, k in enumerate(self.kernels):
            buf += _record(f"layer{i}.weight", np.asarray(k, dtype=np.float64))
        buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
        path = Path(path)
        path.write_bytes(bytes(buf))
        return path

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        from .training import _parse
        _, tensors = _parse(Path(path).read_bytes())
        names = sorted((n for n in tensors if n.startswith("layer")), key=lambda n: int(n[5:].split(".")[0]))
        if not names:
            raise ValueError(f"{path} holds no layer weights")
        return cls(tuple(np.asarray(tensors[n], dtype=np.float64) for n in names))


def extract_features(image, extractor: FeatureExtractor) -> list:
    """One rectified (C, H, W) response map per layer for an (H, W, 3) image."""
    x = as_tensor(image)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"extract_features: expected an (H, W, 3) image, got {x.shape}")
    chw = x.transpose((2, 0, 1))
    return [conv2d(chw, Tensor(k)).relu() for k in extractor.kernels]


def gram(features) -> Tensor:
    """``F F^T / (H W)`` for a (C, H, W) map."""
    f = as_tensor(features)
    c, h, w = f.shape
    flat = f.reshape((c, h * w))
    v = flat.values

    def bw(g):
        return ((g + g.T) @ v / (h * w),)

    return custom_op(v @ v.T / (h * w), (flat,), bw)


# --- style transfer -------------------------------------------------------------

@dataclass
class ImaginationResult:
    image: np.ndarray
    style_loss: float
    content_loss: float
    iterations: int
    seed: object = None
    history: list = field(default_factory=list)


def _targets(subject, inspiration, extractor):
    with no_grad():
        grams = [gram(f).values for f in extract_features(inspiration, extractor)]
        content = extract_features(subject, extractor)[-1].values
    return grams, content


def _losses(work, grams, content, extractor, style_weight, content_weight):
    feats = extract_features(work, extractor)
    style = None
    for f, g in zip(feats, grams):
        d = gram(f) - Tensor(g)
        term = (d * d).sum()
        style = term if style is None else style + term
    dc = feats[-1] - Tensor(content)
    content_term = (dc * dc).sum()
    total = style * style_weight + content_term * content_weight
    return total, float(style.values), float(content_term.values)


def style_transfer(subject, inspiration, extractor: FeatureExtractor | None = None, steps: int = 200,
                   style_weight: float = 1.0, content_weight: float = 3e-6, rng=None,
                   step_size: float = 0.05, max_halvings: int = 30) -> ImaginationResult:
    """Move the subject toward the inspiration's filter statistics.

    Gradient descent with a max-normalized step: a trial step that raises
    the loss is halved until it does not (or abandoned after
    ``max_halvings``), and an accepted step grows the next trial by 1.5.
    Pixels are clamped to [0, 1] after every step, so the loss sequence in
    ``history`` never increases.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    extractor = extractor or FeatureExtractor.default()
    subject = np.asarray(subject, dtype=np.float64)
    inspiration = np.asarray(inspiration, dtype=np.float64)
    if subject.ndim != 3 or subject.shape[-1] != 3 or inspiration.ndim != 3 or inspiration.shape[-1] != 3:
        raise ValueError("style_transfer: subject and inspiration must be (H, W, 3) images")
    inspiration = imageio.resize(inspiration, subject.shape[0], subject.shape[1])
    grams, content = _targets(subject, inspiration, extractor)
    work = subject.copy()

    def evaluate(x, grad=False):
        if not grad:
            with no_grad():
                return _losses(Tensor(x), grams, content, extractor, style_weight, content_weight)
        t = leaf(x)
        with Tape() as tape:
            total, s, c = _losses(t, grams, content, extractor, style_weight, content_weight)
            tape.backward(total)
        return total, s, c, t.grad

    total, s, c = evaluate(work)
    history = [float(total.values)]
    lr = step_size
    for _ in range(steps):
        tot, s, c, g = evaluate(work, grad=True)
        scale = np.max(np.abs(g))
        if scale == 0:
            history.append(history[-1])
            continue
        direction = g / scale
        current = float(tot.values)
        for _ in range(max_halvings):
            trial = np.clip(work - lr * direction, 0.0, 1.0)
            new, ns, nc = evaluate(trial)
            if float(new.values) <= current:
                work, s, c, current = trial, ns, nc, float(new.values)
                lr *= 1.5
                break
            lr *= 0.5
        history.append(current)
    total, s, c = evaluate(work)
    return ImaginationResult(work, s, c, steps, rng, history)


# --- colour -----------------------------------------------------------------------

def hsv_remap(imagination, subject) -> np.ndarray:
    """Hue and saturation from ``subject``, value from ``imagination``."""
    a = np.clip(np.asarray(imagination, dtype=np.float64), 0, 1)
    b = np.clip(np.asarray(subject, dtype=np.float64), 0, 1)
    if a.shape != b.shape:
        raise ValueError(f"hsv_remap: shapes differ {a.shape} vs {b.shape}")
    hsv = rgb_to_hsv(b)
    hsv[..., 2] = rgb_to_hsv(a)[..., 2]
    return np.clip(hsv_to_rgb(hsv), 0, 1)


# --- painting -----------------------------------------------------------------------

def fallback_painter(image, stroke_count: int, rng, radius: float = 1.5, max_steps: int = 6,
                     step_length: float = 1.5, sigma: float = 2.0) -> np.ndarray:
    """Hand-written stroke painter used when no trained artist is available.

    Starts from the image's mean colour.  Each stroke starts at a uniformly
    random point, takes the image colour there, and follows the local edge
    direction (the dominant eigenvector of the rotated-gradient structure
    field) for up to ``max_steps`` steps.
    """
    if stroke_count < 0:
        raise ValueError("stroke_count must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    H, W, _ = img.shape
    canvas = np.broadcast_to(img.mean(axis=(0, 1)), img.shape).copy()
    if stroke_count == 0:
        return canvas
    with no_grad():
        field = projection_field(structure_field(img, sigma))[None]
        starts = np.stack([rng.uniform(0, W - 1, stroke_count), rng.uniform(0, H - 1, stroke_count)], axis=-1)[None]
        probe = rng.normal(size=(1, stroke_count, 2))
        P = bilinear_sample(field, Tensor(starts)).values[0]
        v0 = np.stack([P[:, 0] * probe[0, :, 0] + P[:, 1] * probe[0, :, 1],
                       P[:, 1] * probe[0, :, 0] + P[:, 2] * probe[0, :, 1]], axis=-1)[None]
        colors = bilinear_sample(img[None], Tensor(starts)).values[0]
        points, steps = trace_strokes(field, starts, v0, max_steps, step_length)
        out = Tensor(canvas)
        r = Tensor(np.array(radius))
        for i in range(stroke_count):
            polyline = points.values[0, i, : int(steps[0, i]) + 1]
            out = rasterize_stroke(polyline, r, np.clip(colors[i], 0, 1), out)
    return out.values


@dataclass
class InspireOptions:
    steps: int = 200
    style_weight: float = 1.0
    content_weight: float = 3e-6
    hsv_remap: bool = False
    seed: int = 0


@dataclass
class InspireResult:
    imagination: ImaginationResult
    painting: np.ndarray
    options: InspireOptions

    def manifest(self) -> str:
        o = self.options
        lines = [f"seed {o.seed}", f"steps {o.steps}", f"style_weight {o.style_weight!r}",
                 f"content_weight {o.content_weight!r}", f"hsv_remap {int(o.hsv_remap)}",
                 f"style_loss {self.imagination.style_loss!r}", f"content_loss {self.imagination.content_loss!r}"]
        return "\n".join(lines) + "\n"


def inspire_paint(subject, inspiration, baseline: Callable, options: InspireOptions = InspireOptions(),
                  extractor: FeatureExtractor | None = None) -> InspireResult:
    """Imagination by style transfer, optional recolouring, then ``baseline(imagination, rng)``."""
    subject = np.asarray(subject, dtype=np.float64)
    result = style_transfer(subject, inspiration, extractor, options.steps, options.style_weight,
                            options.content_weight, options.seed)
    if options.hsv_remap:
        result.image = hsv_remap(result.image, subject)
    painting = np.asarray(baseline(result.image, np.random.default_rng(options.seed)), dtype=np.float64)
    if painting.shape != subject.shape:
        raise ValueError(f"baseline returned {painting.shape}, expected {subject.shape}")
    return InspireResult(result, painting, options)


def fallback_baseline(stroke_count: int = 2000, **kwargs) -> Callable:
    return lambda image, rng: fallback_painter(image, stroke_count, rng, **kwargs)


def artist_baseline(checkpoint, iterations: int = 4, patch_size: int | None = None) -> Callable:
    """Paint with a trained artist; the checkpoint's parameters are only read."""
    from .training import paint

    def run(image, rng):
        return paint(checkpoint, image, iterations, rng, patch_size)[0]
    return run
