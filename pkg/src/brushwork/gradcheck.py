"""Finite-difference verification of every differentiable operation.

Each suite evaluates operations in float64 on random inputs and compares the
tape gradient with central differences (``h = 1e-5``, shrunk tenfold at most
twice when the one-sided slopes reveal a kink inside the probe interval).  The error of one
check is ``max|analytic - numeric| / max(max|numeric|, max|analytic|)`` over
the checked entries; an operation's error is the worst over its instances.

Operations whose forward pass deliberately differs from the function being
differentiated (straight-through) are evaluated under
:func:`brushwork.tensor.surrogate`, which swaps in the smooth forward path,
and are reported with status ``surrogate-checked``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import medium, nets, perception
from . import tensor as T
from .tensor import Tape, Tensor, leaf, no_grad, surrogate

H = 1e-5
KINK = 1e-3
COMPONENTS = ("tensor-ops", "medium", "perception", "nets", "end-to-end")
DEFAULT_TOLERANCE = {"tensor-ops": 1e-4, "perception": 1e-4, "medium": 1e-3, "nets": 1e-3, "end-to-end": 1e-3}


@dataclass
class OpResult:
    name: str
    error: float
    tolerance: float
    instances: int
    surrogate: bool = False

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    @property
    def status(self) -> str:
        if not self.passed:
            return "fail"
        return "surrogate-checked" if self.surrogate else "pass"


@dataclass
class GradReport:
    component: str
    tolerance: float
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    def render(self) -> str:
        lines = [f"{self.component}: tolerance {self.tolerance:g}, {len(self.results)} ops, {self.seconds:.1f}s"]
        for r in self.results:
            lines.append(f"  {r.name:<28} {r.error:10.3e}  x{r.instances:<3} {r.status}")
        lines.append(f"  => {'PASS' if self.passed else 'FAIL'} (max error {self.max_error:.3e})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradient(fn, arrays, rng=None, max_entries: int | None = None, h: float = H,
                   use_surrogate: bool = False) -> float:
    """Compare tape and finite-difference gradients of ``fn(*tensors)``.

    ``fn`` returns a tensor; non-scalar outputs are contracted with fixed
    random weights.  At most ``max_entries`` entries per input are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    weights = {}

    def scalar(ts):
        out = fn(*ts)
        if out.size == 1:
            return out.reshape(())
        if "w" not in weights:
            weights["w"] = np.random.default_rng(12345).normal(size=out.shape)
        return (out * weights["w"]).sum()

    def run(ts):
        if use_surrogate:
            with surrogate():
                return scalar(ts)
        return scalar(ts)

    leaves = [leaf(a.copy()) for a in arrays]
    with Tape() as tape:
        out = run(leaves)
        tape.backward(out)
    center = float(out.values)

    def probe(i, j, step):
        shifted = [b.copy() for b in arrays]
        shifted[i].flat[j] += step
        with no_grad():
            return float(run([Tensor(b) for b in shifted]).values)

    analytic, numeric = [], []
    for i, a in enumerate(arrays):
        flat = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            flat = np.sort(rng.choice(a.size, max_entries, replace=False))
        g = leaves[i].grad.ravel()
        for j in flat:
            # a kink (ReLU, clip, max) inside [x-h, x+h] shows up as one-sided slopes that disagree;
            # shrink the interval until it is gone or the retries run out
            step = h
            for attempt in range(3):
                up, down = probe(i, j, step), probe(i, j, -step)
                right, left = (up - center) / step, (center - down) / step
                if attempt == 2 or abs(right - left) <= KINK * max(abs(right), abs(left), 1e-6):
                    break
                step /= 10
            numeric.append((up - down) / (2 * step))
            analytic.append(g[j])
    return relative_error(np.asarray(analytic), np.asarray(numeric))


class _Suite:
    def __init__(self, component, tolerance, rng):
        self.report = GradReport(component, tolerance)
        self.rng = rng

    def op(self, name, make_case, instances=20, max_entries=None, use_surrogate=False):
        """``make_case(rng) -> (fn, arrays)``; records the worst error over instances."""
        worst = 0.0
        for _ in range(instances):
            fn, arrays = make_case(self.rng)
            err = check_gradient(fn, arrays, self.rng, max_entries, use_surrogate=use_surrogate)
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        self.report.results.append(OpResult(name, worst, self.report.tolerance, instances, use_surrogate))

    def definitional(self, name, error, instances=1):
        """Ops with no finite-difference counterpart: ``error`` measures the defining identity."""
        self.report.results.append(OpResult(name, error, self.report.tolerance, instances, True))


def _away(rng, shape, lo=0.2, hi=2.0):
    """Values with magnitude in [lo, hi] and random sign (clear of kinks at 0)."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    """Entries pairwise at least 0.1 apart, so max/argmax are unambiguous."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.02, n)).reshape(shape) - 0.05 * n


def _stop_grad_error(rng) -> float:
    """Forward must copy the input and the backward pass must send nothing."""
    x = leaf(rng.normal(size=(3, 4)))
    with Tape() as tape:
        y = T.stop_grad(x)
        out = (y * y).sum() + x.sum() * 0.0
        tape.backward(out)
    return float(np.max(np.abs(y.values - x.values)) + np.max(np.abs(x.grad)))


def _tensor_ops(s: _Suite):
    r = lambda rng, *sh: rng.normal(size=sh)
    for kind in ("add", "sub", "mul"):
        s.op(kind, lambda rng, k=kind: (lambda x, y: T.elementwise(k, x, y), [r(rng, 3, 4), r(rng, 3, 1)]))
    s.op("div", lambda rng: (lambda x, y: x / y, [r(rng, 3, 4), _away(rng, (3, 4), 0.5)]))
    s.op("pow", lambda rng: (lambda x, y: x ** y, [rng.uniform(0.5, 2, (3, 4)), r(rng, 3, 4)]))
    for kind in ("min", "max"):
        def case(rng, k=kind):
            x = _distinct(rng, (3, 4))
            y = x + _away(rng, (3, 4), 0.05, 0.5)
            return (lambda a, b: T.elementwise(k, a, b)), [x, y]
        s.op(kind, case)
    s.op("log", lambda rng: (lambda x: x.log(), [rng.uniform(0.2, 3, (3, 4))]))
    s.op("exp", lambda rng: (lambda x: x.exp(), [r(rng, 3, 4)]))
    s.op("sqrt", lambda rng: (lambda x: x.sqrt(), [rng.uniform(0.2, 3, (3, 4))]))
    for kind in ("abs", "relu"):
        s.op(kind, lambda rng, k=kind: (lambda x: T.elementwise(k, x), [_away(rng, (3, 4))]))
    for kind in ("sigmoid", "tanh"):
        s.op(kind, lambda rng, k=kind: (lambda x: T.elementwise(k, x), [r(rng, 3, 4)]))
    s.op("neg", lambda rng: (lambda x: -x, [r(rng, 5)]))
    s.op("softplus", lambda rng: (lambda x: x.softplus(), [r(rng, 3, 4) * 3]))
    s.op("clip", lambda rng: (lambda x: x.clip(-0.5, 0.5),
                              [np.where(rng.random((3, 4)) < 0.5, rng.uniform(-0.4, 0.4, (3, 4)), _away(rng, (3, 4), 0.6))]))
    s.op("composite log|x-y|", lambda rng: (lambda x, y: (x - y).abs().log(), [r(rng, 4) + 3, r(rng, 4)]))
    for kind in ("sum", "mean"):
        s.op(f"reduce {kind}", lambda rng, k=kind: (lambda x: T.reduce(k, x, (0, 2)), [r(rng, 3, 2, 4)]))
    s.op("reduce max", lambda rng: (lambda x: T.reduce("max", x, 1), [_distinct(rng, (4, 4))]))
    s.op("reshape", lambda rng: (lambda x: x.reshape((6, 2)) * x.reshape((6, 2)), [r(rng, 3, 4)]))
    s.op("transpose", lambda rng: (lambda x: x.transpose((2, 0, 1)), [r(rng, 2, 3, 4)]))
    s.op("broadcast_to", lambda rng: (lambda x: T.broadcast_to(x, (3, 4)), [r(rng, 1, 4)]))
    s.op("getitem slice", lambda rng: (lambda x: x[1:, ::2], [r(rng, 3, 4)]))
    s.op("getitem fancy", lambda rng: (lambda x: x[np.array([0, 2, 2]), np.array([1, 1, 3])], [r(rng, 3, 4)]))
    s.op("concat", lambda rng: (lambda x, y: T.concat([x, y], axis=1), [r(rng, 2, 3), r(rng, 2, 2)]))
    s.op("stack", lambda rng: (lambda x, y: T.stack([x, y], axis=-1), [r(rng, 2, 3), r(rng, 2, 3)]))
    s.op("where", lambda rng: (lambda x, y: T.where(np.arange(6).reshape(2, 3) % 2 == 0, x, y), [r(rng, 2, 3), r(rng, 2, 3)]))
    s.op("conv2d same", lambda rng: (lambda x, k, b: T.conv2d(x, k, b), [r(rng, 2, 5, 6), r(rng, 3, 2, 3, 3), r(rng, 3)]))
    s.op("conv2d valid stride2", lambda rng: (lambda x, k: T.conv2d(x, k, stride=2, padding="valid"),
                                              [r(rng, 2, 7, 7), r(rng, 2, 2, 3, 3)]))
    s.op("conv2d channels-last", lambda rng: (lambda x, k, b: T.conv2d(x, k, b, channels_last=True),
                                              [r(rng, 2, 5, 5, 3), r(rng, 4, 3, 3, 3), r(rng, 4)]))
    s.op("softmax2d", lambda rng: (lambda x: T.softmax2d(x), [r(rng, 2, 3, 4)]))
    s.definitional("stop_grad", _stop_grad_error(s.rng))
    s.op("straight_thru", lambda rng: (lambda x, y: T.straight_thru(x.sigmoid(), y) * 2.0,
                                       [r(rng, 3, 4), r(rng, 3, 4)]), use_surrogate=True)


def _random_sym(rng, shape, gap=0.3):
    """Symmetric-matrix channels whose eigenvalues differ by at least ``gap``."""
    theta = rng.uniform(0, np.pi, shape)
    l1 = rng.uniform(-1, 1, shape)
    l2 = l1 + rng.uniform(gap, 2, shape)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([l1 * c * c + l2 * s * s, (l2 - l1) * c * s, l1 * s * s + l2 * c * c], axis=-1)


def _medium(s: _Suite):
    n = 8
    s.op("projection_field", lambda rng: (lambda a: medium.projection_field(a), [_random_sym(rng, (3,))]))

    def bilinear(rng):
        pos = rng.integers(0, n - 1, (1, 4, 2)) + rng.uniform(0.1, 0.9, (1, 4, 2))
        return (lambda g, p: medium.bilinear_sample(g, p)), [rng.normal(size=(1, n, n, 2)), pos]
    s.op("bilinear_sample", bilinear)

    def trace(rng):
        sym = _random_sym(rng, (1, 12, 12))
        x0 = rng.uniform(5, 7, (1, 2, 2))
        v0 = rng.normal(size=(1, 2, 2))

        def fn(a, v):
            points, _ = medium.trace_strokes(medium.projection_field(a), x0, v, 3, 1.0)
            return points
        return fn, [sym, v0]
    s.op("trace_strokes", trace, instances=5, max_entries=40)

    def distance(rng):
        pts = rng.uniform(1, n - 2, (1, 2, 4, 2))
        return (lambda p: medium.polyline_distance(p, n, n)), [pts]
    s.op("polyline_distance", distance)

    def masks(rng):
        pts = rng.uniform(1, n - 2, (1, 2, 4, 2))
        rad = rng.uniform(1, 2.5, (1, 2))
        return (lambda p, rr: medium.stroke_masks(p, rr, n, n)), [pts, rad]
    s.op("stroke_masks", masks, instances=10, use_surrogate=True)

    def rasterize(rng):
        pl = rng.uniform(1, n - 2, (3, 2))
        return (lambda p, rr, c, cv: medium.rasterize_stroke(p, rr, c, cv)), \
            [pl, np.array(2.0), rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, (n, n, 3))]
    s.op("rasterize_stroke", rasterize, instances=10, use_surrogate=True)

    def apply(rng):
        seed = int(rng.integers(1 << 30))
        action = rng.normal(size=(1, n, n, medium.ACTION_CHANNELS)) * 0.5
        canvas = rng.uniform(0.2, 0.8, (1, n, n, 3))
        return (lambda a, c: medium.apply_medium(a, c, 2, np.random.default_rng(seed), 4, 1.0)), [action, canvas]
    s.op("apply_medium", apply, instances=5, max_entries=60, use_surrogate=True)


def _perception(s: _Suite):
    n = 8
    img = lambda rng: rng.uniform(0, 1, (n, n, 3))
    m = 48
    s.op("rotated_gradient", lambda rng: (perception.rotated_gradient, [img(rng)]), 10, m)
    s.op("smooth", lambda rng: (lambda f: perception.smooth(f, 1.5), [rng.normal(size=(n, n, 3))]), 10, m)
    s.op("structure_field", lambda rng: (lambda f: perception.structure_field(f, 1.5), [img(rng)]), 10, m)
    s.op("dirdist", lambda rng: (lambda a, b: perception.dirdist(a, b, 2.0), [img(rng), img(rng)]), 10, m)
    s.op("log_l1", lambda rng: (perception.log_l1, [img(rng), img(rng)]), 10, m)
    s.op("total_loss", lambda rng: (lambda a, b, c: perception.total_loss(a, b, c)[0],
                                    [img(rng)[None], img(rng)[None], img(rng)[None]]), 5, m)


def _small_nets(rng, widths=(4, 4)):
    artist = nets.make_artist(rng, widths, np.float64)
    decoder = nets.make_decoder(rng, widths, np.float64)
    # break the zero initialisation of the colour and logit heads so every path is exercised
    last = artist.params[f"conv{len(widths)}.weight"]
    last.values = last.values + rng.normal(scale=0.1, size=last.shape)
    # with zero biases, pixels whose inputs are all rectified away sit exactly on the ReLU kink
    for net in (artist, decoder):
        for name, p in net.params.items():
            if name.endswith("bias"):
                p.values = p.values + rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    # near-degenerate spectra make P vary on scales close to h; keep the field well conditioned
    artist.params[f"conv{len(widths)}.bias"].values[1] = 1.0
    return artist, decoder


def _with_params(net, names, values):
    saved = {k: net.params[k] for k in names}
    for k, v in zip(names, values):
        net.params[k] = v
    return saved


def _net_case(rng, n=8, iterations=1, widths=(4, 4), full=False):
    artist, decoder = _small_nets(rng, widths)
    subject = rng.uniform(0.1, 0.9, (1, n, n, 3))
    seed = int(rng.integers(1 << 30))
    a_names = list(artist.params)
    d_names = list(decoder.params)

    def fn(*ts):
        a_vals, d_vals = ts[:len(a_names)], ts[len(a_names):]
        old_a = _with_params(artist, a_names, a_vals)
        old_d = _with_params(decoder, d_names, d_vals)
        try:
            run = nets.iterative_paint(subject, artist, iterations, np.random.default_rng(seed),
                                       medium.BrushConfig(strokes=2, max_steps=4, step_length=1.0))
            if not full:
                return run.painting
            recon = nets.decoder_forward(run.painting, decoder)
            return perception.total_loss(subject, run.painting, recon)[0]
        finally:
            _with_params(artist, a_names, old_a.values())
            _with_params(decoder, d_names, old_d.values())

    arrays = [p.values for p in artist.params.values()] + [p.values for p in decoder.params.values()]
    return fn, arrays


def _nets(s: _Suite):
    n = 8

    def artist_case(rng):
        artist, _ = _small_nets(rng)
        names = list(artist.params)

        def fn(c, subj, *ps):
            old = _with_params(artist, names, ps)
            try:
                return nets.artist_forward(c, subj, artist)
            finally:
                _with_params(artist, names, old.values())
        return fn, [rng.uniform(0, 1, (1, n, n, 3)), rng.uniform(0, 1, (1, n, n, 3))] + [p.values for p in artist.params.values()]
    s.op("artist_forward", artist_case, instances=5, max_entries=30)

    def decoder_case(rng):
        _, decoder = _small_nets(rng)
        names = list(decoder.params)

        def fn(x, *ps):
            old = _with_params(decoder, names, ps)
            try:
                return nets.decoder_forward(x, decoder)
            finally:
                _with_params(decoder, names, old.values())
        return fn, [rng.uniform(0, 1, (1, n, n, 3))] + [p.values for p in decoder.params.values()]
    s.op("decoder_forward", decoder_case, instances=5, max_entries=30)
    s.op("init_background", lambda rng: (nets.init_background, [rng.normal(size=(1, n, n, 13))]))
    s.op("iterative_paint T=1", lambda rng: _net_case(rng, n, 1), instances=3, max_entries=25, use_surrogate=True)


def _end_to_end(s: _Suite):
    s.op("loss wrt artist+decoder, T=1", lambda rng: _net_case(rng, 8, 1, full=True),
         instances=3, max_entries=25, use_surrogate=True)
    s.op("loss wrt artist+decoder, T=2", lambda rng: _net_case(rng, 8, 2, full=True),
         instances=2, max_entries=20, use_surrogate=True)


_SUITES = {"tensor-ops": _tensor_ops, "medium": _medium, "perception": _perception, "nets": _nets,
           "end-to-end": _end_to_end}


def grad_check(component: str, tolerance: float | None = None, rng=None) -> GradReport:
    """Run the finite-difference suite for one component."""
    if component not in _SUITES:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    tolerance = DEFAULT_TOLERANCE[component] if tolerance is None else tolerance
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    suite = _Suite(component, tolerance, rng)
    t0 = time.perf_counter()
    _SUITES[component](suite)
    suite.report.seconds = time.perf_counter() - t0
    return suite.report
