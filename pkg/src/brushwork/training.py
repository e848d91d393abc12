"""Corpus ingestion, the training loop, and checkpoints.

Training reads images exclusively through :func:`ingest` or
:func:`load_corpus`; both record every patch in a manifest of
``path  x  y  w  h`` lines, so a trained model can always be traced back to
the photographs it saw.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imageio
from .medium import BrushConfig
from .nets import ConvNet, decoder_forward, iterative_paint, make_artist, make_decoder
from .perception import LossWeights, total_loss
from .tensor import Tape, no_grad

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".ppm", ".webp"}
TERMS = ("reconstruction", "direction", "realism", "total")


class EmptyCorpusError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, indices, terms, dump_path=None):
        self.step, self.indices, self.terms, self.dump_path = step, indices, terms, dump_path
        super().__init__(f"non-finite loss at step {step} (batch {list(indices)}): {terms}")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# --- corpus -----------------------------------------------------------------

@dataclass(frozen=True)
class Crop:
    path: str
    x: int
    y: int
    w: int
    h: int

    def line(self) -> str:
        return f"{self.path}\t{self.x}\t{self.y}\t{self.w}\t{self.h}"


@dataclass
class Corpus:
    patches: np.ndarray
    manifest: list
    resolution: int
    natural_only: bool = True

    def __post_init__(self):
        if len(self.patches) != len(self.manifest):
            raise ValueError("every patch needs a manifest record")
        if len(self.patches) and self.patches.shape[1:] != (self.resolution, self.resolution, 3):
            raise ValueError(f"patches must be {self.resolution}x{self.resolution}x3")

    def __len__(self):
        return len(self.patches)

    def subset(self, indices) -> "Corpus":
        indices = list(indices)
        return Corpus(self.patches[indices], [self.manifest[i] for i in indices], self.resolution, self.natural_only)


def _crop(image: np.ndarray, c: Crop, resolution: int) -> np.ndarray:
    return imageio.resize(image[c.y:c.y + c.h, c.x:c.x + c.w], resolution, resolution)


def ingest(directory, resolution: int, patches_per_image: int, rng, manifest_path=None) -> Corpus:
    """Random square crops from every image in ``directory``, resized to ``resolution``.

    Files are visited in sorted order.  Unreadable files and images smaller
    than the resolution are skipped with a warning.  The manifest is written
    to ``manifest_path`` (default ``directory/manifest.txt``).
    """
    if resolution <= 0 or patches_per_image <= 0:
        raise ValueError("resolution and patches_per_image must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES) \
        if directory.is_dir() else []
    patches, crops = [], []
    for path in files:
        try:
            image = imageio.read_image(path)
        except Exception as exc:  # any decoder failure means "skip"
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        h, w = image.shape[:2]
        if min(h, w) < resolution:
            log.warning("skipping %s: %dx%d is smaller than %d", path, w, h, resolution)
            continue
        for _ in range(patches_per_image):
            side = int(rng.integers(resolution, min(h, w) + 1))
            x = int(rng.integers(0, w - side + 1))
            y = int(rng.integers(0, h - side + 1))
            c = Crop(str(path.resolve()), x, y, side, side)
            crops.append(c)
            patches.append(_crop(image, c, resolution))
    if not patches:
        raise EmptyCorpusError(f"no usable images in {directory}")
    corpus = Corpus(np.stack(patches), crops, resolution)
    write_manifest(corpus, manifest_path or directory / "manifest.txt")
    return corpus


def write_manifest(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolution {corpus.resolution}"] + [c.line() for c in corpus.manifest]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> tuple[list, int | None]:
    crops, resolution = [], None
    for raw in Path(path).read_text().splitlines():
        if raw.startswith("# resolution"):
            resolution = int(raw.split()[-1])
            continue
        if not raw.strip() or raw.startswith("#"):
            continue
        p, x, y, w, h = raw.rsplit("\t", 4)
        crops.append(Crop(p, int(x), int(y), int(w), int(h)))
    return crops, resolution


def load_corpus(manifest_path, resolution: int | None = None) -> Corpus:
    """Rebuild a corpus by re-cropping the images listed in a manifest."""
    crops, stored = read_manifest(manifest_path)
    resolution = resolution or stored
    if not crops or not resolution:
        raise EmptyCorpusError(f"manifest {manifest_path} lists no patches")
    cache, patches = {}, []
    for c in crops:
        if c.path not in cache:
            cache = {c.path: imageio.read_image(c.path)}
        patches.append(_crop(cache[c.path], c, resolution))
    return Corpus(np.stack(patches), crops, resolution)


# --- configuration ----------------------------------------------------------

@dataclass
class TrainConfig:
    resolution: int = 64
    beta: float = 1.0
    strokes: int = 8
    iterations: int = 4
    max_steps: int = 16
    step_length: float = 2.0
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    sigma: float = 2.0
    precision: str = "float32"
    widths: tuple = (32, 64, 64, 32)
    sample_every: int = 250

    # fields that do not change the trajectory, so resuming may alter them
    RUN_ONLY = ("steps", "sample_every")

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("resolution", "strokes", "max_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.steps < 0 or self.sample_every < 0:
            raise ValueError("iterations, steps and sample_every must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.learning_rate <= 0 or self.step_length <= 0 or self.sigma < 0:
            raise ValueError("learning_rate and step_length must be positive, sigma nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def brush(self) -> BrushConfig:
        return BrushConfig(self.strokes, self.max_steps, self.step_length)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(beta=self.beta, sigma=self.sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def fingerprint(self) -> bytes:
        d = {k: v for k, v in self.to_dict().items() if k not in self.RUN_ONLY}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


# --- optimizer --------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent over a dict of named leaf tensors."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.values)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.values -= update.astype(p.values.dtype)


# --- checkpoint -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    artist: ConvNet
    decoder: ConvNet
    m: dict
    v: dict
    step: int = 0
    adam_t: int = 0
    history: dict = field(default_factory=lambda: {t: [] for t in TERMS})

    @property
    def fingerprint(self) -> bytes:
        return self.config.fingerprint()

    def parameters(self) -> dict:
        out = {f"artist/{k}": p for k, p in self.artist.params.items()}
        out.update({f"decoder/{k}": p for k, p in self.decoder.params.items()})
        return out

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()


def init_checkpoint(config: TrainConfig) -> Checkpoint:
    rng = np.random.default_rng([config.seed, 0])
    artist = make_artist(rng, config.widths, config.dtype)
    decoder = make_decoder(rng, config.widths, config.dtype)
    ck = Checkpoint(config, artist, decoder, {}, {})
    ck.m = {k: np.zeros_like(p.values) for k, p in ck.parameters().items()}
    ck.v = {k: np.zeros_like(p.values) for k, p in ck.parameters().items()}
    return ck


MAGIC = b"AIAP"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {v.str: k for k, v in _DTYPES.items()}


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    code = _CODES[dt.str]
    body = struct.pack("<H", len(name.encode())) + name.encode()
    body += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body += arr.astype(dt, copy=False).tobytes()
    return struct.pack("<Q", len(body)) + body


def _tensors(ck: Checkpoint) -> list:
    out = [("meta/config", np.frombuffer(json.dumps(ck.config.to_dict(), sort_keys=True).encode(), np.uint8)),
           ("meta/step", np.array(ck.step, np.int64)),
           ("meta/adam_t", np.array(ck.adam_t, np.int64)),
           ("meta/rng_seed", np.array(ck.config.seed, np.int64))]
    for k, p in ck.parameters().items():
        out.append((f"param/{k}", p.values))
    for k in ck.parameters():
        out.append((f"adam_m/{k}", ck.m[k]))
        out.append((f"adam_v/{k}", ck.v[k]))
    for t in TERMS:
        out.append((f"history/{t}", np.asarray(ck.history.get(t, []), np.float64)))
    return out


def save_checkpoint(ck: Checkpoint, path) -> Path:
    """Write the binary container: header, named tensors, crc32 trailer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = bytearray(MAGIC + struct.pack("<I", VERSION) + ck.fingerprint)
    for name, arr in _tensors(ck):
        buf += _record(name, arr)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path.write_bytes(bytes(buf))
    return path


def _parse(data: bytes):
    if len(data) < 44 or data[:4] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic or too short)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError("checksum mismatch: file is corrupt or truncated")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    fingerprint = data[8:40]
    pos, end, tensors = 40, len(data) - 4, {}
    while pos < end:
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + ln].decode()
        q = pos + 2 + ln
        code, rank = struct.unpack_from("<BB", data, q)
        shape = struct.unpack_from(f"<{rank}Q", data, q + 2)
        q += 2 + 8 * rank
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dt, count, q).reshape(shape).copy()
        pos += n
    return fingerprint, tensors


def load_checkpoint(path) -> Checkpoint:
    fingerprint, t = _parse(Path(path).read_bytes())
    config = TrainConfig.from_dict(json.loads(t["meta/config"].tobytes().decode()))
    if config.fingerprint() != fingerprint:
        raise CheckpointCorruptError("stored configuration does not match the header fingerprint")
    ck = init_checkpoint(config)
    for k, p in ck.parameters().items():
        p.values = t[f"param/{k}"]
        ck.m[k] = t[f"adam_m/{k}"]
        ck.v[k] = t[f"adam_v/{k}"]
    ck.step = int(t["meta/step"].item())
    ck.adam_t = int(t["meta/adam_t"].item())
    ck.history = {k: [float(x) for x in t[f"history/{k}"]] for k in TERMS}
    return ck


# --- training ---------------------------------------------------------------

def step_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for one training step; depends only on (seed, step) so runs resume exactly."""
    return np.random.default_rng([seed, 1, step])


def forward(ck: Checkpoint, subjects, rng, iterations: int | None = None):
    """Paint, decode and score a batch; returns (loss, terms, painting, reconstruction)."""
    cfg = ck.config
    run = iterative_paint(subjects, ck.artist, cfg.iterations if iterations is None else iterations, rng, cfg.brush)
    recon = decoder_forward(run.painting, ck.decoder)
    loss, terms = total_loss(subjects, run.painting, recon, cfg.weights)
    return loss, terms, run.painting, recon


def _dump_batch(out_dir, step, subjects, indices, terms):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite-step-{step:06d}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, subjects=subjects, indices=np.asarray(indices), step=step,
             terms=json.dumps({k: repr(v) for k, v in terms.items()}))
    return path


def _sample_grid(out_dir, step, subjects, painting, recon):
    rows = [[s, p, r] for s, p, r in zip(subjects, painting, recon)]
    return imageio.write_png(Path(out_dir) / f"step-{step:06d}.png", imageio.grid(rows))


def train(corpus: Corpus, config: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          callback=None) -> Checkpoint:
    """Jointly optimize artist and decoder on ``corpus`` for ``config.steps`` total steps.

    A resumed checkpoint continues from its step counter; its fingerprint
    must match ``config``.  ``callback(step, terms)`` runs after every update.
    """
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot train on an empty corpus")
    if corpus.resolution != config.resolution:
        raise ValueError(f"corpus resolution {corpus.resolution} != config resolution {config.resolution}")
    if resume is not None:
        if resume.fingerprint != config.fingerprint():
            raise CheckpointError("checkpoint was trained with a different configuration")
        ck = resume
        ck.config = config
    else:
        ck = init_checkpoint(config)
    params = ck.parameters()
    opt = Adam(params, lr=config.learning_rate)
    opt.m, opt.v, opt.t = ck.m, ck.v, ck.adam_t
    patches = corpus.patches.astype(config.dtype)
    replace = len(corpus) < config.batch_size
    t0 = time.perf_counter()
    while ck.step < config.steps:
        step = ck.step
        rng = step_rng(config.seed, step)
        idx = np.sort(rng.choice(len(corpus), config.batch_size, replace=replace))
        subjects = patches[idx]
        with Tape() as tape:
            loss, terms, painting, recon = forward(ck, subjects, rng)
            if not np.isfinite(loss.values):
                dump = _dump_batch(out_dir, step, subjects, idx, terms)
                raise NonFiniteLossError(step, idx, terms, dump)
            tape.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        opt.step(grads)
        ck.adam_t = opt.t
        ck.step = step + 1
        for t in TERMS:
            ck.history[t].append(terms[t])
        if out_dir is not None and config.sample_every and (ck.step % config.sample_every == 0 or ck.step == config.steps):
            _sample_grid(out_dir, ck.step, subjects, painting.values, recon.values)
        if callback is not None:
            callback(ck.step, terms)
        if ck.step % 50 == 0:
            log.info("step %d  %s  (%.1fs)", ck.step, " ".join(f"{k}={v:.4f}" for k, v in terms.items()),
                     time.perf_counter() - t0)
    return ck


def paint(ck: Checkpoint, subject, iterations: int, rng, patch_size=None):
    """Inference: painting and reconstruction as numpy arrays, no tape."""
    with no_grad():
        run = iterative_paint(np.asarray(subject, dtype=ck.config.dtype), ck.artist, iterations, rng,
                              ck.config.brush, patch_size=patch_size)
        recon = decoder_forward(run.painting, ck.decoder)
    return run.painting.values.astype(np.float64), recon.values.astype(np.float64)
from .gradcheck import COMPONENTS, GradReport, grad_check  # noqa: E402,F401
