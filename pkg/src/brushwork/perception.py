"""Image losses: log-L1 distance and the structure-field direction distance.

Images are ``(..., H, W, C)`` arrays.  The direction distance compares the
smoothed field of outer products of 90-degree rotated gradients; it ignores
contrast scale and gradient sign, so it measures only local orientation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor, as_tensor, custom_op, stack

L1_EPS = 1e-8
COS_EPS = 1e-12
TRUNCATE = 3.0


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    sigma: float = 2.0
    l1_eps: float = L1_EPS
    cos_eps: float = COS_EPS

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    return np.gradient(a, axis=axis, edge_order=1)


def _diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    out = np.zeros_like(g)
    out[0] -= g[0]
    out[1] += g[0]
    out[n - 1] += g[n - 1]
    out[n - 2] -= g[n - 1]
    if n > 2:
        out[2:] += 0.5 * g[1:-1]
        out[:-2] -= 0.5 * g[1:-1]
    return np.moveaxis(out, 0, axis)


def rotated_gradient(f) -> Tensor:
    """``(-d/dy f, d/dx f)`` per channel: (..., H, W, C) -> (..., H, W, C, 2).

    Central differences inside, one-sided differences on the border.
    """
    f = as_tensor(f)
    a = f.values
    if a.ndim < 3 or a.shape[-3] < 2 or a.shape[-2] < 2:
        raise ValueError(f"rotated_gradient: need an (..., H, W, C) image with H, W >= 2, got {a.shape}")
    ry, rx = a.ndim - 3, a.ndim - 2
    out = np.stack([-_diff(a, ry), _diff(a, rx)], axis=-1)

    def bw(g):
        return (_diff_adjoint(-g[..., 0], ry) + _diff_adjoint(g[..., 1], rx),)

    return custom_op(out, (f,), bw)


def smooth(field, sigma: float) -> Tensor:
    """Gaussian blur over the spatial axes of an (..., H, W, K) field.

    Truncated at ``3 sigma`` with half-sample reflective borders; ``sigma = 0``
    is the identity.  The operator is self-adjoint.
    """
    field = as_tensor(field)
    if sigma == 0:
        return field
    a = field.values
    axes = (a.ndim - 3, a.ndim - 2)

    def blur(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=TRUNCATE, axes=axes)

    return custom_op(blur(a), (field,), lambda g: (blur(np.asarray(g)),))


def structure_field(f, sigma: float = 2.0) -> Tensor:
    """Smoothed sum over channels of ``G^T G`` with ``G`` the rotated gradient.

    Returns (..., H, W, 3) holding the symmetric entries ``(r11, r12, r22)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    g = rotated_gradient(f)
    g1, g2 = g[..., 0], g[..., 1]
    rho = stack([(g1 * g1).sum(axis=-1), (g1 * g2).sum(axis=-1), (g2 * g2).sum(axis=-1)], axis=-1)
    return smooth(rho, sigma)


def _frobenius(r: Tensor, s: Tensor) -> Tensor:
    return r[..., 0] * s[..., 0] + 2.0 * r[..., 1] * s[..., 1] + r[..., 2] * s[..., 2]


def _chord(num: Tensor, m1: Tensor, m2: Tensor, eps: float) -> Tensor:
    """``sqrt(max(0, 1 - (num + eps) / (sqrt(m1 m2) + eps)))`` elementwise."""
    n, a, b = num.values, m1.values, m2.values
    s = np.sqrt(a * b)
    cos = (n + eps) / (s + eps)
    gap = np.maximum(0.0, 1.0 - cos)
    out = np.sqrt(gap)

    def bw(g):
        dcos = np.where(gap > 0, -0.5 / np.sqrt(gap + 1e-12), 0.0) * g
        dnum = dcos / (s + eps)
        ds = -dcos * (n + eps) / (s + eps) ** 2
        safe = np.where(s > 0, s, 1.0)
        dm1 = np.where(s > 0, ds * 0.5 * b / safe, 0.0)
        dm2 = np.where(s > 0, ds * 0.5 * a / safe, 0.0)
        return dnum, dm1, dm2

    return custom_op(out, (num, m1, m2), bw)


def dirdist(f1, f2, sigma: float = 2.0, eps: float = COS_EPS) -> Tensor:
    """Scale-invariant orientation distance between two (..., H, W, C) images.

    The Frobenius inner product of the two smoothed structure fields and
    their squared norms are averaged over pixels before forming the cosine,
    so flat regions do not cause divisions by zero.  Result lies in [0, 1].
    """
    f1, f2 = as_tensor(f1), as_tensor(f2)
    if f1.shape != f2.shape:
        raise ValueError(f"dirdist: shapes differ {f1.shape} vs {f2.shape}")
    r1 = structure_field(f1, sigma)
    r2 = structure_field(f2, sigma)
    axes = (-2, -1)
    num = _frobenius(r1, r2).mean(axis=axes)
    m1 = _frobenius(r1, r1).mean(axis=axes)
    m2 = _frobenius(r2, r2).mean(axis=axes)
    return _chord(num, m1, m2, eps)


def log_l1(a, b, eps: float = L1_EPS) -> Tensor:
    """``log(mean |a - b| + eps)`` over the trailing (H, W, C) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"log_l1: shapes differ {a.shape} vs {b.shape}")
    return (a - b).abs().mean(axis=(-3, -2, -1)).log(eps=eps)


def total_loss(subject, painting, reconstruction, weights: LossWeights = LossWeights()):
    """Training objective and its per-term breakdown.

    ``reconstruction`` and ``direction`` compare the decoder output with the
    subject; ``realism`` compares the painting itself with the subject and
    is weighted by ``beta``.  Leading batch axes are averaged.

    Returns ``(loss, terms)`` where ``terms`` maps term names to floats.
    """
    s, p, r = as_tensor(subject), as_tensor(painting), as_tensor(reconstruction)
    if not (s.shape == p.shape == r.shape):
        raise ValueError(f"total_loss: shapes differ {s.shape}, {p.shape}, {r.shape}")
    rec = log_l1(r, s, weights.l1_eps).mean()
    direction = (dirdist(r, s, weights.sigma, weights.cos_eps)).log(eps=weights.l1_eps).mean()
    realism = log_l1(p, s, weights.l1_eps).mean()
    loss = rec + direction + realism * weights.beta
    terms = {
        "reconstruction": float(rec.values),
        "direction": float(direction.values),
        "realism": float(realism.values),
        "total": float(loss.values),
    }
    return loss, terms
