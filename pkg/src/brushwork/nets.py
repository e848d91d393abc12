"""Artist and decoder networks and the iterative painting loop.

The artist sees ``(canvas, subject)`` stacked into six channels and emits a
13-channel action tensor at canvas resolution.  Painting starts from a
uniform background whose colour the artist picks on its first call, then
alternates artist and medium for a number of iterations.  With a patch size
the image is cut into tiles that are painted independently with shared
weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .medium import ACTION_CHANNELS, BACKGROUND, COLOR, LOGIT, RADIUS, BrushConfig, apply_medium
from .tensor import Tensor, as_tensor, broadcast_to, concat, conv2d, leaf

ARTIST_WIDTHS = (32, 64, 64, 32)
INITIAL_RADIUS = 2.0


@dataclass
class ConvNet:
    """Fully convolutional stack with same padding, ReLU between layers."""

    in_channels: int
    out_channels: int
    widths: tuple
    kernel_size: int = 3
    final: str | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        n = len(self.widths) + 1
        for i in range(n):
            h = conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], channels_last=True)
            if i < n - 1:
                h = h.relu()
        if self.final == "sigmoid":
            h = h.sigmoid()
        return h

    @property
    def layer_sizes(self) -> tuple:
        return (self.in_channels,) + tuple(self.widths) + (self.out_channels,)

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def describe(self) -> str:
        return f"conv{self.kernel_size}x{self.kernel_size}:" + "-".join(str(c) for c in self.layer_sizes)


def make_convnet(in_channels, out_channels, widths, rng, dtype=np.float32, kernel_size=3, final=None) -> ConvNet:
    sizes = (in_channels,) + tuple(widths) + (out_channels,)
    params = {}
    for i, (ci, co) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(ci * kernel_size * kernel_size)
        w = rng.uniform(-bound, bound, size=(co, ci, kernel_size, kernel_size)).astype(dtype)
        params[f"conv{i}.weight"] = leaf(w, name=f"conv{i}.weight")
        params[f"conv{i}.bias"] = leaf(np.zeros(co, dtype=dtype), name=f"conv{i}.bias")
    return ConvNet(in_channels, out_channels, tuple(widths), kernel_size, final, params)


def make_artist(rng, widths=ARTIST_WIDTHS, dtype=np.float32) -> ConvNet:
    """Artist with zeroed colour and start-logit heads and a 2 px initial radius."""
    net = make_convnet(6, ACTION_CHANNELS, widths, rng, dtype)
    last = len(widths)
    w = net.params[f"conv{last}.weight"].values
    b = net.params[f"conv{last}.bias"].values
    for ch in (LOGIT, *range(COLOR.start, COLOR.stop)):
        w[ch] = 0
    b[RADIUS] = np.log(np.expm1(INITIAL_RADIUS))
    return net


def make_decoder(rng, widths=ARTIST_WIDTHS, dtype=np.float32) -> ConvNet:
    return make_convnet(3, 3, widths, rng, dtype, final="sigmoid")


def artist_forward(canvas, subject, artist: ConvNet) -> Tensor:
    canvas, subject = as_tensor(canvas), as_tensor(subject)
    if canvas.shape != subject.shape:
        raise ValueError(f"artist_forward: canvas {canvas.shape} and subject {subject.shape} differ")
    return artist(concat([canvas, subject], axis=-1))


def decoder_forward(painting, decoder: ConvNet) -> Tensor:
    return decoder(painting)


def init_background(action0) -> Tensor:
    """Uniform canvas in the colour ``sigmoid(mean of channels 10-12)``."""
    action0 = as_tensor(action0)
    color = action0[..., BACKGROUND].mean(axis=(-3, -2), keepdims=True).sigmoid()
    return broadcast_to(color, action0.shape[:-1] + (3,))


@dataclass
class PaintRun:
    subject: np.ndarray
    iterations: int
    patch_size: int | None
    canvases: list
    painting: Tensor
    seed: object = None
    plans: list | None = None


def _tile(x: Tensor, ps: int) -> Tensor:
    B, H, W, C = x.shape
    x = x.reshape((B, H // ps, ps, W // ps, ps, C)).transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((B * (H // ps) * (W // ps), ps, ps, C))


def _untile(x: Tensor, shape) -> Tensor:
    B, H, W, C = shape
    ps = x.shape[1]
    x = x.reshape((B, H // ps, W // ps, ps, ps, C)).transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((B, H, W, C))


def iterative_paint(subject, artist: ConvNet, iterations: int, rng, brush: BrushConfig = BrushConfig(),
                    patch_size: int | None = None, record_plans: bool = False) -> PaintRun:
    """Paint ``subject`` (H, W, 3) or (B, H, W, 3) from a blank canvas.

    The artist's first action, computed on a blank canvas, picks the
    background colour and also drives the first round of strokes; every later
    round computes a fresh action from the current canvas.  ``iterations = 0``
    returns the bare background.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    seed = rng
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    s = as_tensor(subject)
    single = s.ndim == 3
    if single:
        s = s.reshape((1,) + s.shape)
    full_shape = s.shape
    if patch_size:
        H, W = s.shape[1:3]
        if patch_size <= 0 or H % patch_size or W % patch_size:
            raise ValueError(f"patch size {patch_size} does not tile a {H}x{W} image")
        s = _tile(s, patch_size)
    blank = Tensor(np.zeros(s.shape, dtype=s.dtype))
    action = artist_forward(blank, s, artist)
    canvas = init_background(action)
    canvases = [canvas]
    plans = [] if record_plans else None
    for t in range(iterations):
        if t > 0:
            action = artist_forward(canvas, s, artist)
        canvas = apply_medium(action, canvas, brush.strokes, rng, brush.max_steps, brush.step_length, plans=plans)
        canvases.append(canvas)

    def restore(c):
        if patch_size:
            c = _untile(c, full_shape)
        return c[0] if single else c

    canvases = [restore(c) for c in canvases]
    return PaintRun(np.asarray(as_tensor(subject).values), iterations, patch_size, canvases, canvases[-1], seed, plans)
