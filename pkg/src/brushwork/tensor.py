"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation on a :class:`Tensor` that needs a gradient is appended to the
current thread's :class:`Tape`.  Calling :func:`backward` on a scalar replays
the tape in reverse and fills the ``grad`` slot of every leaf that took part.
A tape is consumed by its backward pass; the next recorded operation starts a
fresh one.

Only the handful of operations the painting pipeline needs are provided,
including the two-input straight-through primitive::

    straight_thru(x, y) == x - stop_grad(x) + stop_grad(y)

whose forward value is ``y`` and whose gradient flows to ``x``.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _flag(name, default=False):
    return getattr(_local, name, default)


@contextmanager
def _setting(name, value):
    old = _flag(name)
    setattr(_local, name, value)
    try:
        yield
    finally:
        setattr(_local, name, old)


def no_grad():
    """Context manager: operations inside are not recorded."""
    return _setting("no_grad", True)


def strict(enabled: bool = True):
    """Context manager: raise :class:`NonFiniteError` on non-finite operands."""
    return _setting("strict", enabled)


def surrogate():
    """Context manager: ``straight_thru(x, y)`` evaluates to ``x`` in the forward pass.

    Inside this context the forward computation is the smooth function whose
    derivative the straight-through backward pass computes, so it can be
    compared against finite differences.
    """
    return _setting("surrogate", True)


class Tape:
    """Ordered record of executed operations."""

    _ids = itertools.count(1)

    def __init__(self):
        self.id = next(Tape._ids)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        if self.consumed:
            raise TapeError(f"tape {self.id} was already consumed by a backward pass")
        if loss.values.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node_tape is not self:
                    leaves[id(p)] = p
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for out, parents, _ in self.nodes:
            for p in parents:
                if p.requires_grad and p._node_tape is not self:
                    leaves.setdefault(id(p), p)
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(leaf.values) if g is None else np.asarray(g, dtype=leaf.values.dtype).reshape(leaf.shape)
            leaf.grad = g
            result[leaf] = g
        self.nodes = []
        return result


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


class Tensor:
    """Dense array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(values, Tensor):
            values = values.values
        arr = np.asarray(values, dtype=dtype)
        if dtype is None and arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None
        self._node_tape: Tape | None = None

    # grad slot -------------------------------------------------------------
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value).reshape(self.shape)

    @property
    def tape_id(self) -> int | None:
        return None if self._node_tape is None else self._node_tape.id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return self.values.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.values)

    def detach(self) -> Tensor:
        return Tensor(self.values)

    # arithmetic ------------------------------------------------------------
    def __add__(self, o): return elementwise("add", self, o)
    def __radd__(self, o): return elementwise("add", o, self)
    def __sub__(self, o): return elementwise("sub", self, o)
    def __rsub__(self, o): return elementwise("sub", o, self)
    def __mul__(self, o): return elementwise("mul", self, o)
    def __rmul__(self, o): return elementwise("mul", o, self)
    def __truediv__(self, o): return elementwise("div", self, o)
    def __rtruediv__(self, o): return elementwise("div", o, self)
    def __pow__(self, o): return elementwise("pow", self, o)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def log(self, eps=EPS): return elementwise("log", self, eps=eps)
    def exp(self): return elementwise("exp", self)
    def sqrt(self, eps=EPS): return elementwise("sqrt", self, eps=eps)
    def abs(self): return elementwise("abs", self)
    def relu(self): return elementwise("relu", self)
    def sigmoid(self): return elementwise("sigmoid", self)
    def tanh(self): return elementwise("tanh", self)
    def softplus(self): return softplus(self)
    def clip(self, lo, hi): return clip(self, lo, hi)

    def sum(self, axis=None, keepdims=False): return reduce("sum", self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce("mean", self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def custom_op(values, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``values`` as the output of an operation on ``parents``.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    ``None``) per parent.
    """
    out = Tensor(values)
    if _flag("no_grad"):
        return out
    if any(p.requires_grad for p in parents):
        tape = current_tape()
        out.requires_grad = True
        out._node_tape = tape
        tape.nodes.append((out, tuple(parents), backward))
    return out


def _check_finite(op, *arrays):
    if _flag("strict"):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input")


def _broadcast_shape(op, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(op, a, b)
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(op, a, b)
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


_BINARY = {"add", "sub", "mul", "div", "pow", "min", "max"}
_UNARY = {"log", "exp", "sqrt", "abs", "relu", "sigmoid", "tanh"}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elementwise(kind: str, x, y=None, eps: float = EPS) -> Tensor:
    """Pointwise operation ``kind`` on ``x`` (and ``y`` for binary kinds).

    ``log``, ``sqrt`` and ``div`` add ``eps`` inside the singular operand.
    """
    if kind in _BINARY:
        if y is None:
            raise TypeError(f"{kind} needs two operands")
        if not isinstance(x, Tensor) and isinstance(y, Tensor):
            x = Tensor(np.asarray(x, dtype=y.dtype))
        x = as_tensor(x)
        y = as_tensor(y, dtype=x.dtype) if not isinstance(y, Tensor) else y
        shape = _broadcast_shape(kind, x.shape, y.shape)
        a, b = x.values, y.values
        _check_finite(kind, a, b)
        if kind == "add":
            v = a + b
            bw = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        elif kind == "sub":
            v = a - b
            bw = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        elif kind == "mul":
            v = a * b
            bw = lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
        elif kind == "div":
            den = b + eps
            v = a / den
            bw = lambda g: (_unbroadcast(g / den, a.shape), _unbroadcast(-g * a / den**2, b.shape))
        elif kind == "pow":
            v = a**b

            def bw(g):
                ga = g * b * a ** (b - 1) if x.requires_grad else None
                gb = None
                if y.requires_grad:
                    gb = _unbroadcast(g * v * np.log(np.abs(a) + eps), b.shape)
                return (None if ga is None else _unbroadcast(ga, a.shape), gb)
        elif kind == "min":
            v = np.minimum(a, b)
            pick = a <= b
            bw = lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape))
        else:  # max
            v = np.maximum(a, b)
            pick = a >= b
            bw = lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape))
        v = np.broadcast_to(v, shape) if v.shape != shape else v
        return custom_op(v, (x, y), bw)

    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    x = as_tensor(x)
    a = x.values
    _check_finite(kind, a)
    if kind == "log":
        v = np.log(a + eps)
        bw = lambda g: (g / (a + eps),)
    elif kind == "exp":
        v = np.exp(a)
        bw = lambda g: (g * v,)
    elif kind == "sqrt":
        v = np.sqrt(a + eps)
        bw = lambda g: (g * 0.5 / v,)
    elif kind == "abs":
        v = np.abs(a)
        bw = lambda g: (g * np.sign(a),)
    elif kind == "relu":
        v = np.maximum(a, 0)
        mask = a > 0
        bw = lambda g: (g * mask,)
    elif kind == "sigmoid":
        v = _sigmoid(a)
        bw = lambda g: (g * v * (1 - v),)
    else:
        v = np.tanh(a)
        bw = lambda g: (g * (1 - v * v),)
    return custom_op(v, (x,), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(-x.values, (x,), lambda g: (-g,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    a = x.values
    return custom_op(np.logaddexp(0, a), (x,), lambda g: (g * _sigmoid(a),))


def clip(x, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes where the input is inside the closed range."""
    x = as_tensor(x)
    a = x.values
    inside = (a >= lo) & (a <= hi)
    return custom_op(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Reduction ``kind`` in {sum, mean, max} over ``axes`` (all axes when None)."""
    x = as_tensor(x)
    a = x.values
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if a.size == 0 or count == 0:
        raise ValueError(f"{kind}: empty reduction over shape {a.shape}")

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if kind == "sum":
        v = a.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(expand(g), a.shape),)
    elif kind == "mean":
        v = a.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(expand(g) / count, a.shape),)
    elif kind == "max":
        v = a.max(axis=axes, keepdims=keepdims)

        def bw(g):
            # route to the first maximal entry in C order of the reduced axes
            keep = [i for i in range(a.ndim) if i not in axes]
            moved = np.transpose(a, keep + list(axes)).reshape([a.shape[i] for i in keep] + [count])
            first = np.argmax(moved, axis=-1)
            mask = np.zeros_like(moved)
            np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
            mask = mask.reshape([a.shape[i] for i in keep] + [a.shape[i] for i in axes])
            mask = np.transpose(mask, np.argsort(keep + list(axes)))
            return (mask * expand(g),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return custom_op(np.asarray(v), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return custom_op(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", x.shape, shape)
    old = x.shape
    return custom_op(np.broadcast_to(x.values, shape), (x,), lambda g: (_unbroadcast(g, old),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    v = x.values[idx]
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.values)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom_op(np.array(v), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    v = np.concatenate([t.values for t in ts], axis=axis)
    ax = axis % v.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return custom_op(v, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    v = np.stack([t.values for t in ts], axis=axis)
    ax = axis % v.ndim
    return custom_op(v, ts, lambda g: tuple(np.moveaxis(g, ax, 0)))


def where(cond, x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    cond = np.asarray(cond, dtype=bool)
    v = np.where(cond, x.values, y.values)
    return custom_op(
        v, (x, y), lambda g: (_unbroadcast(np.where(cond, g, 0), x.shape), _unbroadcast(np.where(cond, 0, g), y.shape))
    )


# convolution ---------------------------------------------------------------

def _conv_hwc(xp, w, stride, out_hw):
    """xp: (B, Hp, Wp, Ci) padded, w: (k, k, Ci, Co)."""
    k = w.shape[0]
    Ho, Wo = out_hw
    B = xp.shape[0]
    out = np.zeros((B, Ho, Wo, w.shape[3]), dtype=np.result_type(xp, w))
    for di in range(k):
        for dj in range(k):
            sl = xp[:, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride, :]
            out += sl @ w[di, dj]
    return out


def _stacked_rows(a, p, k):
    """Zero-padded input flattened to rows, with the k horizontal taps side by side.

    For stride 1, output pixel (b, i, j) reads padded row ``b*Hp*Wp + i*Wp + j``.
    Row ``r`` of the result holds padded rows ``r, r+1, ..., r+k-1`` concatenated,
    so kernel row ``di`` is one matmul on the contiguous slice starting at ``di*Wp``.
    """
    B, H, W, ci = a.shape
    Hp, Wp = H + 2 * p, W + 2 * p
    M = B * Hp * Wp
    L = M + (k - 1) * Wp
    # k - 1 spare leading rows, so block dj can be written as padded input shifted up by dj
    buf = np.zeros((L + k - 1, k * ci), dtype=a.dtype)
    for dj in range(k):
        block = buf[k - 1 - dj:k - 1 - dj + M, dj * ci:(dj + 1) * ci]
        block.reshape(B, Hp, Wp, ci)[:, p:p + H, p:p + W] = a
    return buf[k - 1:], M


def _channel_sum(g):
    """Sum over all but the last axis; a matrix-vector product is faster than ``sum``."""
    flat = g.reshape(-1, g.shape[-1])
    return np.ones(flat.shape[0], dtype=g.dtype) @ flat


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same", channels_last: bool = False) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` (or ``[B, C_in, H, W]``); with ``channels_last``
    it is ``[H, W, C_in]`` (or ``[B, H, W, C_in]``).  ``kernel`` is always
    ``[C_out, C_in, k, k]`` with odd ``k``.  ``padding`` is ``"same"``
    (zero padding ``k // 2``) or ``"valid"``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    co, ci, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    a = x.values
    batched = a.ndim == 4
    if a.ndim not in (3, 4):
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if not batched:
        a = a[None]
    if not channels_last:
        a = np.transpose(a, (0, 2, 3, 1))
    if a.shape[3] != ci:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    _check_finite("conv2d", a, kernel.values)
    p = k // 2 if padding == "same" else 0
    B, H, W, _ = a.shape
    if H + 2 * p < k or W + 2 * p < k:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, kernel.shape)
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    w = np.ascontiguousarray(np.transpose(kernel.values, (2, 3, 1, 0)))
    Hp, Wp = H + 2 * p, W + 2 * p
    if stride == 1:
        rows, M = _stacked_rows(a, p, k)
        wrows = w.reshape(k, k * ci, co)
        full = rows[:M] @ wrows[0]
        for di in range(1, k):
            full += rows[di * Wp:di * Wp + M] @ wrows[di]
        if bias is not None:
            full += as_tensor(bias).values
        out = full.reshape(B, Hp, Wp, co)[:, :Ho, :Wo]
    else:
        xp = np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a
        out = _conv_hwc(xp, w, stride, (Ho, Wo))
        if bias is not None:
            out = out + as_tensor(bias).values.reshape(1, 1, 1, co)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)

    def bw(g):
        g4 = g if batched else g[None]
        if not channels_last:
            g4 = np.transpose(g4, (0, 2, 3, 1))
        gx = gk = None
        if stride == 1:
            # k - 1 leading zero rows let every shifted copy below be a plain slice
            gext = np.zeros((M + k - 1, co), dtype=g4.dtype)
            gext[k - 1:].reshape(B, Hp, Wp, co)[:, :Ho, :Wo] = g4
            gfull = gext[k - 1:]
            if x.requires_grad:
                # transposed convolution with the taps stacked as in the forward pass:
                # input row q collects output rows q - di*Wp - dj
                grows = np.empty((M, k * co), dtype=g4.dtype)
                for dj in range(k):
                    grows[:, dj * co:(dj + 1) * co] = gext[k - 1 - dj:k - 1 - dj + M]
                wt = np.transpose(w, (0, 1, 3, 2)).reshape(k, k * co, ci)
                gflat_in = grows @ wt[0]
                for di in range(1, k):
                    gflat_in[di * Wp:] += grows[:M - di * Wp] @ wt[di]
                gx = gflat_in.reshape(B, Hp, Wp, ci)[:, p:p + H, p:p + W, :]
                if not channels_last:
                    gx = np.transpose(gx, (0, 3, 1, 2))
                if not batched:
                    gx = gx[0]
            if kernel.requires_grad:
                gw = np.stack([rows[di * Wp:di * Wp + M].T @ gfull for di in range(k)]).reshape(k, k, ci, co)
                gk = np.transpose(gw, (3, 2, 0, 1))
        elif x.requires_grad:
            g4 = np.ascontiguousarray(g4)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride, :] += g4 @ w[di, dj].T
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
            if not channels_last:
                gx = np.transpose(gx, (0, 3, 1, 2))
            if not batched:
                gx = gx[0]
        if stride != 1 and kernel.requires_grad:
            gflat = np.ascontiguousarray(g4).reshape(-1, co)
            gw = np.empty_like(w)
            for di in range(k):
                for dj in range(k):
                    sl = xp[:, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride, :]
                    gw[di, dj] = sl.reshape(-1, ci).T @ gflat
            gk = np.transpose(gw, (3, 2, 0, 1))
        grads = [gx, gk]
        if bias is not None:
            grads.append(_channel_sum(g4) if bias.requires_grad else None)
        return grads

    if not channels_last:
        out = np.transpose(out, (0, 3, 1, 2))
    if not batched:
        out = out[0]
    return custom_op(out, parents, bw)


# softmax, gradient routing, sampling ---------------------------------------

def softmax2d(field) -> Tensor:
    """Softmax over the last two (spatial) axes."""
    field = as_tensor(field)
    a = field.values
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("softmax2d: non-finite logits")
    if a.ndim < 2:
        raise ShapeError("softmax2d", field.shape)
    shifted = a - a.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=(-2, -1), keepdims=True)

    def bw(g):
        return (v * (g - (g * v).sum(axis=(-2, -1), keepdims=True)),)

    return custom_op(v, (field,), bw)


def stop_grad(x) -> Tensor:
    """Same values, no gradient."""
    x = as_tensor(x)
    return Tensor(x.values.copy())


def straight_thru(x, y) -> Tensor:
    """Forward value of ``y``, gradient routed to ``x`` with unit factor."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError("straight_thru", x.shape, y.shape)
    v = x.values if _flag("surrogate") else y.values
    return custom_op(np.array(v, copy=True), (x, y), lambda g: (g, None))


def categorical_sample(probs, rng: np.random.Generator):
    """Draw one cell of a 2-D distribution.

    Returns ``((row, col), p)`` where ``p`` is the gradient-carrying entry of
    ``probs`` at the drawn cell.
    """
    probs = as_tensor(probs)
    p = probs.values
    if p.ndim != 2:
        raise ShapeError("categorical_sample", probs.shape)
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("categorical_sample: probabilities must be nonnegative and sum to 1")
    cdf = np.cumsum(p.ravel())
    flat = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), p.size - 1))
    idx = np.unravel_index(flat, p.shape)
    idx = (int(idx[0]), int(idx[1]))
    return idx, getitem(probs, idx)


def backward(loss: Tensor) -> dict:
    """Populate the gradient slot of every leaf reachable from scalar ``loss``."""
    if loss.values.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    tape = loss._node_tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.values)
            return {loss: loss.grad}
        return {}
    return tape.backward(loss)


def leaf(values, name: str | None = None, dtype=None) -> Tensor:
    """A tensor that receives gradients."""
    return Tensor(values, requires_grad=True, name=name, dtype=dtype)
