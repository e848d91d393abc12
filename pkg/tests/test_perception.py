import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brushwork import perception
from brushwork.gradcheck import check_gradient
from brushwork.perception import (
    LossWeights, dirdist, log_l1, rotated_gradient, structure_field, total_loss,
)
from brushwork.tensor import Tape, leaf


# --- straight-loop oracles, written independently of the vectorised code ----

def loop_derivative(img, axis):
    """Central differences inside, one-sided at the two ends, along axis 0 (rows) or 1 (cols)."""
    H, W = img.shape
    out = [[0.0] * W for _ in range(H)]
    n = H if axis == 0 else W
    for i in range(H):
        for j in range(W):
            k = i if axis == 0 else j

            def at(t):
                return img[t, j] if axis == 0 else img[i, t]
            if k == 0:
                out[i][j] = at(1) - at(0)
            elif k == n - 1:
                out[i][j] = at(n - 1) - at(n - 2)
            else:
                out[i][j] = (at(k + 1) - at(k - 1)) / 2
    return out


def loop_blur(field, sigma):
    """Truncated normalized Gaussian (radius round(3 sigma)), half-sample mirror padding."""
    H, W = len(field), len(field[0])
    r = int(3 * sigma + 0.5)
    w = [math.exp(-0.5 * (t / sigma) ** 2) for t in range(-r, r + 1)]
    s = sum(w)
    w = [v / s for v in w]

    def mirror(t, n):
        while t < 0 or t >= n:
            t = -t - 1 if t < 0 else 2 * n - t - 1
        return t
    tmp = [[sum(w[u + r] * field[i][mirror(j + u, W)] for u in range(-r, r + 1)) for j in range(W)] for i in range(H)]
    return [[sum(w[u + r] * tmp[mirror(i + u, H)][j] for u in range(-r, r + 1)) for j in range(W)] for i in range(H)]


def loop_structure(img, sigma):
    H, W, C = img.shape
    r11 = [[0.0] * W for _ in range(H)]
    r12 = [[0.0] * W for _ in range(H)]
    r22 = [[0.0] * W for _ in range(H)]
    for c in range(C):
        dy = loop_derivative(img[..., c], 0)
        dx = loop_derivative(img[..., c], 1)
        for i in range(H):
            for j in range(W):
                g1, g2 = -dy[i][j], dx[i][j]
                r11[i][j] += g1 * g1
                r12[i][j] += g1 * g2
                r22[i][j] += g2 * g2
    return [loop_blur(r, sigma) for r in (r11, r12, r22)]


def loop_dirdist(f1, f2, sigma=2.0, eps=1e-12):
    a, b = loop_structure(f1, sigma), loop_structure(f2, sigma)
    H, W = f1.shape[:2]
    num = m1 = m2 = 0.0
    for i in range(H):
        for j in range(W):
            p = (a[0][i][j], a[1][i][j], a[2][i][j])
            q = (b[0][i][j], b[1][i][j], b[2][i][j])
            num += p[0] * q[0] + 2 * p[1] * q[1] + p[2] * q[2]
            m1 += p[0] ** 2 + 2 * p[1] ** 2 + p[2] ** 2
            m2 += q[0] ** 2 + 2 * q[1] ** 2 + q[2] ** 2
    n = H * W
    cos = (num / n + eps) / (math.sqrt(m1 / n) * math.sqrt(m2 / n) + eps)
    return math.sqrt(max(0.0, 1 - cos))


def loop_log_l1(a, b, eps=1e-8):
    total = 0.0
    for v, w in zip(a.ravel(), b.ravel()):
        total += abs(v - w)
    return math.log(total / a.size + eps)


def ripples(n=64):
    y, x = np.mgrid[:n, :n].astype(float)
    return np.cos(0.5 * x)[..., None], np.cos(0.5 * y)[..., None]


class TestRotatedGradient:
    def test_ramp(self):
        x = np.tile(np.arange(6.0), (5, 1))[..., None]
        g = rotated_gradient(x).values
        np.testing.assert_allclose(g[1:-1, 1:-1, 0], [0, 1] * np.ones((3, 4, 2)), atol=1e-15)

    def test_constant(self):
        np.testing.assert_array_equal(rotated_gradient(np.full((4, 5, 3), 0.4)).values, 0.0)

    def test_orthogonal_to_gradient(self):
        f = np.random.default_rng(0).uniform(size=(9, 7, 3))
        g = rotated_gradient(f).values
        grad = np.stack([np.gradient(f, axis=1), np.gradient(f, axis=0)], axis=-1)
        assert np.max(np.abs((g * grad).sum(-1))) <= 1e-12

    def test_against_loop(self):
        f = np.random.default_rng(1).uniform(size=(5, 6, 1))
        g = rotated_gradient(f).values[..., 0, :]
        np.testing.assert_allclose(g[..., 0], -np.array(loop_derivative(f[..., 0], 0)), atol=1e-15)
        np.testing.assert_allclose(g[..., 1], np.array(loop_derivative(f[..., 0], 1)), atol=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError):
            rotated_gradient(np.zeros((1, 5, 3)))


class TestStructureField:
    def test_outer_product_unsmoothed(self):
        f = np.random.default_rng(2).uniform(size=(6, 6, 1))
        g = rotated_gradient(f).values[..., 0, :]
        rho = structure_field(f, 0).values
        np.testing.assert_allclose(rho, np.stack([g[..., 0] ** 2, g[..., 0] * g[..., 1], g[..., 1] ** 2], -1))

    def test_constant_image(self):
        np.testing.assert_array_equal(structure_field(np.full((8, 8, 3), 0.7), 2.0).values, 0.0)

    def test_smoothed_field_matches_loop(self):
        f = np.random.default_rng(3).uniform(size=(10, 9, 2))
        np.testing.assert_allclose(structure_field(f, 1.3).values, np.stack(loop_structure(f, 1.3), -1), atol=1e-13)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0))
    def test_psd(self, seed, sigma):
        rho = structure_field(np.random.default_rng(seed).uniform(size=(12, 12, 3)), sigma).values
        a, b, c = rho[..., 0], rho[..., 1], rho[..., 2]
        lam_min = (a + c) / 2 - np.sqrt(((a - c) / 2) ** 2 + b * b)
        assert lam_min.min() >= -1e-9

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            structure_field(np.zeros((4, 4, 3)), -1.0)


class TestDirdist:
    def test_identity(self):
        f = np.random.default_rng(4).uniform(size=(16, 16, 3))
        assert dirdist(f, f).values <= 1e-6

    @pytest.mark.parametrize("c", [0.5, 2.0, -1.0])
    def test_scale_invariance(self, c):
        f = np.random.default_rng(5).uniform(size=(16, 16, 3))
        assert dirdist(f, c * f).values <= 1e-6

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            a, b = rng.uniform(size=(2, 12, 12, 3)) ** rng.uniform(0.5, 3)
            d1, d2 = float(dirdist(a, b).values), float(dirdist(b, a).values)
            assert abs(d1 - d2) <= 1e-12
            assert 0 <= d1 <= 1 + 1e-9

    def test_orthogonal_ripples_against_loop(self):
        f1, f2 = ripples(64)
        value = float(dirdist(f1, f2).values)
        assert value > 0.9
        assert abs(value - loop_dirdist(f1, f2)) <= 1e-8

    def test_random_pair_against_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.uniform(size=(2, 14, 11, 3))
        assert abs(float(dirdist(a, b).values) - loop_dirdist(a, b)) <= 1e-10

    def test_flat_images_are_finite(self):
        d = dirdist(np.zeros((8, 8, 3)), np.ones((8, 8, 3))).values
        assert np.isfinite(d) and 0 <= d <= 1 + 1e-9

    def test_batched(self):
        rng = np.random.default_rng(8)
        a, b = rng.uniform(size=(2, 3, 10, 10, 3))
        batch = dirdist(a, b).values
        np.testing.assert_allclose(batch, [dirdist(a[i], b[i]).values for i in range(3)], atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dirdist(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestLogL1:
    def test_equal(self):
        a = np.random.default_rng(0).uniform(size=(5, 5, 3))
        assert log_l1(a, a).values == np.log(1e-8)

    def test_constant_difference(self):
        assert log_l1(np.full((4, 4, 3), 0.75), np.full((4, 4, 3), 0.25)).values == pytest.approx(np.log(0.5 + 1e-8), abs=1e-15)

    def test_against_loop(self):
        a, b = np.random.default_rng(1).uniform(size=(2, 7, 6, 3))
        assert abs(float(log_l1(a, b).values) - loop_log_l1(a, b)) <= 1e-10


class TestTotalLoss:
    def test_composition_of_oracles(self):
        s, p, r = np.random.default_rng(2).uniform(size=(3, 1, 9, 9, 3))
        loss, terms = total_loss(s, p, r, LossWeights(beta=0.7))
        expect = loop_log_l1(r[0], s[0]) + math.log(loop_dirdist(r[0], s[0]) + 1e-8) + 0.7 * loop_log_l1(p[0], s[0])
        assert abs(float(loss.values) - expect) <= 1e-9
        assert terms["total"] == pytest.approx(float(loss.values), abs=0)

    def test_perfect_reconstruction_hits_guards(self):
        s = np.random.default_rng(3).uniform(size=(1, 8, 8, 3))
        _, terms = total_loss(s, s, s)
        assert terms["reconstruction"] == terms["realism"] == np.log(1e-8)
        assert terms["direction"] == pytest.approx(np.log(1e-8), abs=1e-3)

    def test_beta_zero_sends_no_realism_gradient(self):
        s, p, r = np.random.default_rng(4).uniform(size=(3, 1, 8, 8, 3))
        pt = leaf(p)
        with Tape() as tape:
            loss, _ = total_loss(s, pt, r, LossWeights(beta=0.0))
            tape.backward(loss)
        np.testing.assert_array_equal(pt.grad, 0.0)

    def test_dirdist_only_sees_reconstruction(self, monkeypatch):
        seen = []
        real = perception.dirdist

        def spy(a, b, *args, **kw):
            seen.append((a, b))
            return real(a, b, *args, **kw)
        monkeypatch.setattr(perception, "dirdist", spy)
        s, p, r = np.random.default_rng(5).uniform(size=(3, 1, 8, 8, 3))
        total_loss(s, p, r)
        assert len(seen) == 1
        assert np.array_equal(seen[0][0].values, r) and np.array_equal(seen[0][1].values, s)

    def test_gradient_8x8(self):
        s, p, r = np.random.default_rng(6).uniform(size=(3, 1, 8, 8, 3))
        err = check_gradient(lambda pp, rr: total_loss(s, pp, rr)[0], [p, r])
        assert err <= 1e-4

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1.0)
