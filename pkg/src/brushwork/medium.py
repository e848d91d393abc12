"""Differentiable brush engine.

An action tensor of shape ``(n, n, 13)`` (optionally with a leading batch
axis) is turned into brush strokes painted onto a canvas.  Channel layout:

====== =====================================================
0-2    symmetric matrix entries ``a11, a12, a22`` of the field
3      start logits
4-5    initial direction ``(x, y)``
6-8    stroke colour (sigmoid)
9      stroke radius in pixels (softplus)
10-12  background colour (only read by the first iteration)
====== =====================================================

Positions are continuous ``(x, y) = (column, row)`` coordinates; cell
``(i, j)`` has its center at ``(j, i)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    custom_op,
    no_grad,
    softmax2d,
    stack,
    straight_thru,
)

SYM = slice(0, 3)
LOGIT = 3
DIRECTION = slice(4, 6)
COLOR = slice(6, 9)
RADIUS = 9
BACKGROUND = slice(10, 13)
ACTION_CHANNELS = 13

SPECTRUM_EPS = 1e-6
STOP_FRACTION = 0.05


@dataclass(frozen=True)
class BrushConfig:
    strokes: int = 8
    max_steps: int = 16
    step_length: float = 2.0


@dataclass
class StrokePlan:
    start: tuple
    start_prob: float
    steps: int
    radius: float
    color: tuple
    polyline: np.ndarray

    def dump(self) -> str:
        r, g, b = self.color
        return (
            f"start=({self.start[0]:.2f},{self.start[1]:.2f}) p={self.start_prob:.6g} k={self.steps} "
            f"radius={self.radius:.3f} color=({r:.3f},{g:.3f},{b:.3f})"
        )


def dump_plans(plans) -> str:
    return "\n".join(p.dump() for p in plans)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return x.reshape((1,) + x.shape), True
    return x, False


# direction field -------------------------------------------------------------

def projection_field(sym) -> Tensor:
    """Map symmetric-matrix channels ``(..., 3)`` to projection matrices ``(..., 3)``.

    Output channels are ``(p11, p12, p22)`` of
    ``P = (A - lambda_min I) / max(lambda_max - lambda_min, eps)``.  For a
    nondegenerate ``A`` this is the orthogonal projection onto the eigenvector
    of the larger eigenvalue; for ``A = cI`` it is the zero matrix.
    """
    sym = as_tensor(sym)
    a = sym.values
    a11, a12, a22 = a[..., 0], a[..., 1], a[..., 2]
    d = 0.5 * (a11 - a22)
    b = a12
    r = np.sqrt(d * d + b * b)
    gap = 2.0 * r
    den = np.maximum(gap, SPECTRUM_EPS)
    out = np.stack([(d + r) / den, b / den, (r - d) / den], axis=-1)

    def bw(g):
        g11, g12, g22 = g[..., 0], g[..., 1], g[..., 2]
        wide = gap > SPECTRUM_EPS
        rs = np.where(r > 0, r, 1.0)
        r3 = rs**3
        # nondegenerate: p11 = (1 + d/r)/2, p12 = b/(2r), p22 = (1 - d/r)/2
        gu = 0.5 * (g11 - g22)
        gw = 0.5 * g12
        gd_w = gu * b * b / r3 - gw * b * d / r3
        gb_w = -gu * d * b / r3 + gw * d * d / r3
        # degenerate: P = (D + rI)/eps
        dr_dd = np.where(r > 0, d / rs, 0.0)
        dr_db = np.where(r > 0, b / rs, 0.0)
        gd_n = ((g11 - g22) + (g11 + g22) * dr_dd) / SPECTRUM_EPS
        gb_n = (g12 + (g11 + g22) * dr_db) / SPECTRUM_EPS
        gd = np.where(wide, gd_w, gd_n)
        gb = np.where(wide, gb_w, gb_n)
        return (np.stack([0.5 * gd, gb, -0.5 * gd], axis=-1),)

    return custom_op(out, (sym,), bw)


def bilinear_sample(grid, pos) -> Tensor:
    """Read ``grid`` (B, H, W, C) at continuous positions ``pos`` (B, N, 2).

    Positions are clamped to the grid; gradients flow to the grid entries of
    the four neighbours and to the positions.
    """
    grid, pos = as_tensor(grid), as_tensor(pos)
    G = grid.values
    P = pos.values
    B, H, W, C = G.shape
    x = np.clip(P[..., 0], 0, W - 1)
    y = np.clip(P[..., 1], 0, H - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0).astype(G.dtype)[..., None]
    fy = (y - y0).astype(G.dtype)[..., None]
    bi = np.arange(B)[:, None]
    g00, g01 = G[bi, y0, x0], G[bi, y0, x1]
    g10, g11 = G[bi, y1, x0], G[bi, y1, x1]
    out = (1 - fx) * (1 - fy) * g00 + fx * (1 - fy) * g01 + (1 - fx) * fy * g10 + fx * fy * g11
    free_x = ((P[..., 0] >= 0) & (P[..., 0] <= W - 1))[..., None]
    free_y = ((P[..., 1] >= 0) & (P[..., 1] <= H - 1))[..., None]

    def bw(g):
        gg = gp = None
        if grid.requires_grad:
            gg = np.zeros_like(G)
            np.add.at(gg, (bi, y0, x0), g * (1 - fx) * (1 - fy))
            np.add.at(gg, (bi, y0, x1), g * fx * (1 - fy))
            np.add.at(gg, (bi, y1, x0), g * (1 - fx) * fy)
            np.add.at(gg, (bi, y1, x1), g * fx * fy)
        if pos.requires_grad:
            dfx = (1 - fy) * (g01 - g00) + fy * (g11 - g10)
            dfy = (1 - fx) * (g10 - g00) + fx * (g11 - g01)
            gx = (g * dfx).sum(-1, keepdims=True) * free_x * (W > 1)
            gy = (g * dfy).sum(-1, keepdims=True) * free_y * (H > 1)
            gp = np.concatenate([gx, gy], axis=-1)
        return gg, gp

    return custom_op(out, (grid, pos), bw)


# start positions -------------------------------------------------------------

def sample_starts(logits, rng: np.random.Generator, count: int):
    """Sample ``count`` start cells per batch item from ``softmax2d(logits)``.

    ``logits`` is (B, H, W).  Returns ``(positions, probs)``: positions as a
    (B, count, 2) array of cell centers in ``(x, y)`` order and the
    gradient-carrying probabilities (B, count) of the drawn cells.
    """
    probs = softmax2d(logits)
    p = probs.values
    B, H, W = p.shape
    u = rng.random((B, count))
    cdf = np.cumsum(p.reshape(B, -1), axis=1)
    flat = np.empty((B, count), dtype=np.int64)
    for b in range(B):
        flat[b] = np.searchsorted(cdf[b], u[b] * cdf[b, -1], side="right")
    flat = np.minimum(flat, H * W - 1)
    rows, cols = flat // W, flat % W
    positions = np.stack([cols, rows], axis=-1).astype(p.dtype)
    bi = np.arange(B)[:, None]
    return positions, probs[bi, rows, cols]


def sample_start(logits, rng: np.random.Generator):
    """Single start position ``(x0, p)`` from an (n, n) logit field."""
    logits = as_tensor(logits)
    pos, probs = sample_starts(logits.reshape((1,) + logits.shape), rng, 1)
    return pos[0, 0], probs.reshape(())


# stroke tracing --------------------------------------------------------------

def trace_strokes(field, x0, v0, max_steps: int, step_length: float):
    """Trace strokes through a projection field.

    ``field`` (B, H, W, 3) holds ``(p11, p12, p22)``; ``x0`` (B, N, 2) the
    start positions and ``v0`` (B, N, 2) the initial step vectors.  Each step
    projects the previous direction, renormalizes it to ``step_length`` and
    adds it to the running position, so every point depends on all earlier
    directions.  A stroke stops when the projected direction is shorter than
    ``0.05 * step_length`` or the next point would leave the canvas.

    Returns ``(points, steps)``: points (B, N, max_steps + 1, 2), where
    stopped strokes repeat their last point, and the number of taken steps.
    """
    field, v = as_tensor(field), as_tensor(v0)
    x0 = np.asarray(x0.values if isinstance(x0, Tensor) else x0, dtype=field.dtype)
    B, H, W, _ = field.shape
    if np.any(x0[..., 0] < 0) or np.any(x0[..., 0] > W - 1) or np.any(x0[..., 1] < 0) or np.any(x0[..., 1] > H - 1):
        raise ValueError("trace_strokes: start position outside the canvas")
    pos = Tensor(x0)
    points = [pos]
    active = np.ones(x0.shape[:-1], dtype=bool)
    steps = np.zeros(x0.shape[:-1], dtype=np.int64)
    for _ in range(max_steps):
        if not active.any():
            points.append(pos)
            continue
        P = bilinear_sample(field, pos)
        p11, p12, p22 = P[..., 0:1], P[..., 1:2], P[..., 2:3]
        vx, vy = v[..., 0:1], v[..., 1:2]
        px = p11 * vx + p12 * vy
        py = p12 * vx + p22 * vy
        norm = (px * px + py * py).sqrt()
        active &= norm.values[..., 0] >= STOP_FRACTION * step_length
        scale = step_length / (norm + SPECTRUM_EPS)
        v_new = stack([px[..., 0], py[..., 0]], axis=-1) * scale
        cand = pos.values + v_new.values
        inside = (cand[..., 0] >= 0) & (cand[..., 0] <= W - 1) & (cand[..., 1] >= 0) & (cand[..., 1] <= H - 1)
        active &= inside
        v = v_new * active[..., None].astype(field.dtype)
        pos = pos + v
        steps += active
        points.append(pos)
    return stack(points, axis=2), steps


def trace_stroke(field, x0, v0, max_steps: int, step_length: float) -> Tensor:
    """Single-stroke form of :func:`trace_strokes`; ``field`` is (n, n, 3).

    Returns the polyline (taken steps + 1, 2).
    """
    field, v0 = as_tensor(field), as_tensor(v0)
    x0 = np.asarray(x0, dtype=field.dtype)
    if np.any(x0 < 0) or x0[0] > field.shape[1] - 1 or x0[1] > field.shape[0] - 1:
        raise ValueError("trace_stroke: start position outside the canvas")
    pts, steps = trace_strokes(field.reshape((1,) + field.shape), x0.reshape(1, 1, 2), v0.reshape(1, 1, 2), max_steps, step_length)
    return pts[0, 0, : int(steps[0, 0]) + 1]


# rasterization ---------------------------------------------------------------

@numba.njit(cache=True)
def _polyline_distance_kernel(pts, height, width):
    M, K = pts.shape[0], pts.shape[1]
    nseg = max(K - 1, 1)
    dist = np.empty((M, height, width), dtype=pts.dtype)
    seg = np.empty((M, height, width), dtype=np.int32)
    tpar = np.empty((M, height, width), dtype=pts.dtype)
    for m in range(M):
        for i in range(height):
            for j in range(width):
                best = np.inf
                bs = 0
                bt = 0.0
                for s in range(nseg):
                    ax = pts[m, s, 0]
                    ay = pts[m, s, 1]
                    e = min(s + 1, K - 1)
                    abx = pts[m, e, 0] - ax
                    aby = pts[m, e, 1] - ay
                    qax = j - ax
                    qay = i - ay
                    len2 = abx * abx + aby * aby
                    t = 0.0
                    if len2 > 1e-12:
                        t = (qax * abx + qay * aby) / len2
                        t = min(max(t, 0.0), 1.0)
                    dx = qax - t * abx
                    dy = qay - t * aby
                    d2 = dx * dx + dy * dy
                    if d2 < best:
                        best = d2
                        bs = s
                        bt = t
                dist[m, i, j] = np.sqrt(best)
                seg[m, i, j] = bs
                tpar[m, i, j] = bt
    return dist, seg, tpar


@numba.njit(cache=True)
def _polyline_distance_grad(g, pts, dist, seg, tpar):
    M, K = pts.shape[0], pts.shape[1]
    height, width = dist.shape[1], dist.shape[2]
    gp = np.zeros_like(pts)
    for m in range(M):
        for i in range(height):
            for j in range(width):
                d = dist[m, i, j]
                if d <= 0.0:
                    continue
                s = seg[m, i, j]
                t = tpar[m, i, j]
                e = min(s + 1, K - 1)
                ax = pts[m, s, 0]
                ay = pts[m, s, 1]
                cx = ax + t * (pts[m, e, 0] - ax)
                cy = ay + t * (pts[m, e, 1] - ay)
                # d(dist)/d(closest point) = (c - q) / dist
                ux = (cx - j) / d * g[m, i, j]
                uy = (cy - i) / d * g[m, i, j]
                gp[m, s, 0] += (1.0 - t) * ux
                gp[m, s, 1] += (1.0 - t) * uy
                gp[m, e, 0] += t * ux
                gp[m, e, 1] += t * uy
    return gp


def polyline_distance(points, height: int, width: int) -> Tensor:
    """Distance from every pixel center to each polyline.

    ``points`` is (..., K, 2); the result is (..., height, width).  A single
    point gives the distance to that point.
    """
    points = as_tensor(points)
    pts = points.values
    lead = pts.shape[:-2]
    K = pts.shape[-2]
    if K == 0:
        raise ValueError("polyline_distance: empty polyline")
    flat = np.ascontiguousarray(pts.reshape((-1, K, 2)))
    dist, seg, tpar = _polyline_distance_kernel(flat, height, width)

    def bw(g):
        g = np.ascontiguousarray(g.reshape(dist.shape), dtype=pts.dtype)
        return (_polyline_distance_grad(g, flat, dist, seg, tpar).reshape(pts.shape),)

    return custom_op(dist.reshape(lead + (height, width)), (points,), bw)


def stroke_masks(points, radius, height: int, width: int) -> Tensor:
    """Hard-edged stroke masks that back-propagate through a soft edge.

    ``points`` (..., K, 2), ``radius`` (...) -> masks (..., height, width).
    """
    radius = as_tensor(radius)
    dist = polyline_distance(points, height, width)
    r = radius.reshape(radius.shape + (1, 1))
    soft = ((r - dist) / (r * 0.5)).sigmoid()
    hard = (dist.values < r.values).astype(dist.dtype)
    return straight_thru(soft, Tensor(hard))


def rasterize_stroke(polyline, radius, color, canvas) -> Tensor:
    """Paint one stroke onto an (H, W, 3) canvas."""
    polyline, radius, color, canvas = map(as_tensor, (polyline, radius, color, canvas))
    if polyline.ndim != 2 or polyline.shape[0] == 0:
        raise ValueError("rasterize_stroke: empty polyline")
    if np.any(radius.values <= 0):
        raise ValueError("rasterize_stroke: radius must be positive")
    if np.any(color.values < 0) or np.any(color.values > 1):
        raise ValueError("rasterize_stroke: color must lie in [0, 1]")
    H, W, _ = canvas.shape
    m = stroke_masks(polyline, radius.reshape(()), H, W).reshape((H, W, 1))
    out = canvas * (1.0 - m) + m * color.reshape((1, 1, 3))
    return out.clip(0.0, 1.0)


def _stroke_params(action: Tensor, x0: np.ndarray, step_length: float):
    attrs = bilinear_sample(action[..., 4:10], Tensor(x0))
    direction = attrs[..., 0:2]
    norm = (direction * direction).sum(axis=-1, keepdims=True).sqrt()
    v0 = direction / (norm + SPECTRUM_EPS) * step_length
    color = attrs[..., 2:5].sigmoid()
    radius = attrs[..., 5].softplus()
    return v0, color, radius


def apply_medium(action, canvas, strokes: int, rng: np.random.Generator, max_steps: int = 16,
                 step_length: float = 2.0, plans: list | None = None) -> Tensor:
    """Paint ``strokes`` brush strokes described by ``action`` onto ``canvas``.

    ``action`` is (n, n, 13) or (B, n, n, 13); ``canvas`` has the matching
    (..., n, n, 3) shape.  Strokes are composited in sampling order.  Each
    stroke mask ``m`` enters as ``straight_thru(p * m, m)`` with ``p`` the
    probability of its start cell, so the loss reaches the start logits.
    If ``plans`` is a list, one :class:`StrokePlan` per stroke is appended.
    """
    if strokes < 0:
        raise ValueError("apply_medium: number of strokes must be >= 0")
    action, canvas = as_tensor(action), as_tensor(canvas)
    action, single = _batched(action, 3)
    canvas, _ = _batched(canvas, 3)
    if action.shape[-1] != ACTION_CHANNELS or action.shape[:3] != canvas.shape[:3]:
        raise ValueError(f"apply_medium: action {action.shape} does not match canvas {canvas.shape}")
    if strokes == 0:
        return canvas[0] if single else canvas
    B, H, W, _ = canvas.shape
    field = projection_field(action[..., SYM])
    x0, pi0 = sample_starts(action[..., LOGIT], rng, strokes)
    v0, color, radius = _stroke_params(action, x0, step_length)
    points, steps = trace_strokes(field, x0, v0, max_steps, step_length)
    masks = stroke_masks(points, radius, H, W)
    weight = pi0.reshape((B, strokes, 1, 1))
    masks = straight_thru(masks * weight, masks)
    for s in range(strokes):
        m = masks[:, s].reshape((B, H, W, 1))
        c = color[:, s].reshape((B, 1, 1, 3))
        canvas = canvas * (1.0 - m) + m * c
    canvas = canvas.clip(0.0, 1.0)
    if plans is not None:
        for b in range(B):
            for s in range(strokes):
                plans.append(StrokePlan(
                    start=tuple(float(v) for v in x0[b, s]),
                    start_prob=float(pi0.values[b, s]),
                    steps=int(steps[b, s]),
                    radius=float(radius.values[b, s]),
                    color=tuple(float(c) for c in color.values[b, s]),
                    polyline=points.values[b, s, : int(steps[b, s]) + 1].copy(),
                ))
    return canvas[0] if single else canvas


def paint_strokes(canvas: np.ndarray, polylines, radii, colors) -> np.ndarray:
    """Non-differentiable helper: composite many strokes onto an (H, W, 3) array."""
    out = Tensor(np.asarray(canvas, dtype=np.float64))
    with no_grad():
        for pl, r, c in zip(polylines, radii, colors):
            out = rasterize_stroke(pl, r, c, out)
    return out.values
