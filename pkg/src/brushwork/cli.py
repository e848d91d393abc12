"""Command-line entry point: ``brushwork {ingest,train,paint,inspire,gradcheck}``.

Options resolve as built-in defaults < ``AIAP_SEED`` (seed only) < ``--config``
file < command-line flags.  Every command writes the resolved options as a
flat ``key = value`` file next to its outputs; passing that file back with
``--config`` repeats the run.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import imageio
from .gradcheck import COMPONENTS, grad_check
from .inspiration import FeatureExtractor, InspireOptions, artist_baseline, fallback_baseline, inspire_paint
from .tensor import NonFiniteError
from .training import (
    TERMS, CheckpointError, EmptyCorpusError, NonFiniteLossError, TrainConfig, ingest, load_checkpoint,
    load_corpus, paint, save_checkpoint, train,
)

OK, VERIFY_FAILED, USAGE, NUMERIC = 0, 1, 2, 3
log = logging.getLogger("brushwork")


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


# --- option resolution ----------------------------------------------------------

def _train_defaults() -> dict:
    return {f.name: f.default for f in fields(TrainConfig)}


DEFAULTS = {
    "ingest": {"images": None, "out": None, "resolution": 64, "patches_per_image": 20, "seed": 0},
    "train": {"manifest": None, "out": None, "resume": None, **_train_defaults()},
    "paint": {"subject": None, "checkpoint": None, "iterations": None, "patch_size": None, "seed": 0,
              "out": None, "emit_reconstruction": False},
    "inspire": {"subject": None, "inspiration": None, "steps": 200, "hsv_remap": False, "baseline": "fallback",
                "checkpoint": None, "seed": 0, "out": None, "style_weight": 1.0, "content_weight": 3e-6,
                "strokes": 2000, "iterations": None, "extractor": None},
    "gradcheck": {"component": "all", "tolerance": None, "seed": 0},
}
REQUIRED = {"ingest": ("images",), "train": ("manifest", "out"), "paint": ("subject", "checkpoint", "out"),
            "inspire": ("subject", "inspiration", "out"), "gradcheck": ()}


def _coerce(text: str, default):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.strip("()[] ").split(",") if v.strip())
    try:
        return int(text)
    except ValueError:
        return text


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file (``#`` starts a comment)."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


def write_config(path, command: str, options: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}"] + [f"{k} = {_format(v)}" for k, v in sorted(options.items())]
    path.write_text("\n".join(lines) + "\n")
    return path


def resolve(command: str, args: argparse.Namespace, base: dict | None = None) -> dict:
    defaults = dict(DEFAULTS[command])
    if base:
        defaults.update({k: v for k, v in base.items() if k in defaults})
    opts = dict(defaults)
    if "seed" in opts and os.environ.get("AIAP_SEED"):
        opts["seed"] = int(os.environ["AIAP_SEED"])
    if args.config:
        for k, v in read_config(args.config).items():
            if k == "command":
                if v != command:
                    raise InputError(f"config file is for '{v}', not '{command}'")
                continue
            if k not in opts:
                raise InputError(f"unknown option '{k}' in {args.config}")
            opts[k] = _coerce(v, defaults[k] if defaults[k] is not None else "")
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise InputError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


# --- commands --------------------------------------------------------------------

def _read(path, what: str) -> np.ndarray:
    try:
        return imageio.read_image(path)
    except Exception as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from exc


def _checkpoint(path):
    if path is None or not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_ingest(opts: dict) -> int:
    images = Path(opts["images"])
    out = Path(opts["out"]) if opts["out"] else images / "manifest.txt"
    try:
        corpus = ingest(images, opts["resolution"], opts["patches_per_image"], opts["seed"], manifest_path=out)
    except EmptyCorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    opts["out"] = str(out)
    write_config(str(out) + ".run.txt", "ingest", opts)
    sources = len({c.path for c in corpus.manifest})
    mean = corpus.patches.mean(axis=(0, 1, 2))
    print(f"{len(corpus)} patches of {corpus.resolution}x{corpus.resolution} from {sources} images -> {out}")
    print(f"mean colour {mean[0]:.3f} {mean[1]:.3f} {mean[2]:.3f}, std {corpus.patches.std():.3f}")
    return OK


def cmd_train(opts: dict) -> int:
    manifest, out = Path(opts["manifest"]), Path(opts["out"])
    if not manifest.is_file():
        raise InputError(f"manifest not found: {manifest}")
    resume = _checkpoint(opts["resume"]) if opts["resume"] else None
    config = TrainConfig.from_dict({k: opts[k] for k in _train_defaults()})
    try:
        corpus = load_corpus(manifest, config.resolution)
    except (EmptyCorpusError, OSError) as exc:
        raise InputError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "run-config.txt", "train", opts)
    try:
        ck = train(corpus, config, out_dir=out, resume=resume)
    except (NonFiniteLossError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    save_checkpoint(ck, out / "checkpoint.aiap")
    with open(out / "history.tsv", "w") as fh:
        fh.write("step\t" + "\t".join(TERMS) + "\n")
        for i in range(len(ck.history["total"])):
            fh.write(f"{i + 1}\t" + "\t".join(repr(ck.history[t][i]) for t in TERMS) + "\n")
    print(f"trained to step {ck.step}; checkpoint {out / 'checkpoint.aiap'}")
    return OK


def cmd_paint(opts: dict) -> int:
    subject = _read(opts["subject"], "subject")
    ck = _checkpoint(opts["checkpoint"])
    if opts["iterations"] is None:
        opts["iterations"] = ck.config.iterations
    ps = opts["patch_size"]
    if ps and (subject.shape[0] % ps or subject.shape[1] % ps):
        raise InputError(f"patch size {ps} does not tile a {subject.shape[1]}x{subject.shape[0]} image")
    painting, recon = paint(ck, subject, opts["iterations"], np.random.default_rng(opts["seed"]), ps)
    out = Path(opts["out"])
    imageio.write_png(out, painting)
    if opts["emit_reconstruction"]:
        imageio.write_png(out.with_name(out.stem + "-reconstruction.png"), recon)
    write_config(str(out) + ".run.txt", "paint", opts)
    print(f"painting -> {out}")
    return OK


def cmd_inspire(opts: dict) -> int:
    subject = _read(opts["subject"], "subject")
    inspiration = _read(opts["inspiration"], "inspiration")
    if opts["baseline"] == "artist":
        if not opts["checkpoint"]:
            raise InputError("--baseline artist needs --checkpoint")
        ck = _checkpoint(opts["checkpoint"])
        iterations = ck.config.iterations if opts["iterations"] is None else opts["iterations"]
        baseline = artist_baseline(ck, iterations)
    elif opts["baseline"] == "fallback":
        baseline = fallback_baseline(opts["strokes"])
    else:
        raise InputError(f"unknown baseline {opts['baseline']!r}")
    extractor = None
    if opts["extractor"]:
        try:
            extractor = FeatureExtractor.load(opts["extractor"])
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot load extractor {opts['extractor']}: {exc}") from exc
    options = InspireOptions(opts["steps"], opts["style_weight"], opts["content_weight"], opts["hsv_remap"], opts["seed"])
    result = inspire_paint(subject, inspiration, baseline, options, extractor)
    out = Path(opts["out"])
    imageio.write_png(out / "imagination.png", result.imagination.image)
    imageio.write_png(out / "painting.png", result.painting)
    (out / "inspire-manifest.txt").write_text(result.manifest())
    write_config(out / "run-config.txt", "inspire", opts)
    print(f"imagination and painting -> {out}")
    return OK


def cmd_gradcheck(opts: dict) -> int:
    names = COMPONENTS if opts["component"] == "all" else (opts["component"],)
    ok = True
    for name in names:
        report = grad_check(name, opts["tolerance"], np.random.default_rng(opts["seed"]))
        print(report.render())
        ok &= report.passed
    return OK if ok else VERIFY_FAILED


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "paint": cmd_paint, "inspire": cmd_inspire,
            "gradcheck": cmd_gradcheck}


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file with option values")
    common.add_argument("--threads", type=int, default=1, help="BLAS/numba threads; 1 is bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="brushwork", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="cut a directory of photos into a patch manifest")
    s.add_argument("--images", help="directory of photographs")
    s.add_argument("--out", help="manifest path (default IMAGES/manifest.txt)")
    s.add_argument("--resolution", type=int)
    s.add_argument("--patches-per-image", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train", parents=[common], help="train artist and decoder on a manifest")
    s.add_argument("--manifest")
    s.add_argument("--out", help="output directory")
    s.add_argument("--resume", help="checkpoint to continue from")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "widths":
            s.add_argument(flag, type=lambda t: tuple(int(v) for v in t.split(",")), help="e.g. 32,64,64,32")
        elif f.name == "precision":
            s.add_argument(flag, choices=("float32", "float64"))
        else:
            s.add_argument(flag, type=type(f.default))

    s = sub.add_parser("paint", parents=[common], help="paint a subject with a trained artist")
    s.add_argument("--subject")
    s.add_argument("--checkpoint")
    s.add_argument("--iterations", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="painting PNG path")
    s.add_argument("--emit-reconstruction", action="store_const", const=True)

    s = sub.add_parser("inspire", parents=[common], help="style transfer, then paint the result")
    s.add_argument("--subject")
    s.add_argument("--inspiration")
    s.add_argument("--steps", type=int)
    s.add_argument("--hsv-remap", action="store_const", const=True)
    s.add_argument("--baseline", choices=("artist", "fallback"))
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory")
    s.add_argument("--style-weight", type=float)
    s.add_argument("--content-weight", type=float)
    s.add_argument("--strokes", type=int, help="fallback painter stroke count")
    s.add_argument("--iterations", type=int, help="artist iterations")
    s.add_argument("--extractor", help="feature extractor weights file")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    s.add_argument("--component", choices=COMPONENTS + ("all",))
    s.add_argument("--tolerance", type=float)
    s.add_argument("--seed", type=int)
    return p


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=n)  # the numba kernels are serial, so BLAS is the only pool


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _limit_threads(max(1, args.threads))
    try:
        base = None
        if args.command == "train" and args.resume:
            base = _checkpoint(args.resume).config.to_dict()
            base["widths"] = tuple(base["widths"])
        opts = resolve(args.command, args, base)
        return COMMANDS[args.command](opts)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


def console():
    sys.exit(main())


if __name__ == "__main__":
    console()
