import numpy as np
import pytest

from app.services.conv import (
    avg_pool,
    batch_norm,
    batch_norm_grad,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    project_channels,
    relu,
)


def _naive_conv(x, w, pad):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((b, o, oh, ow))
    for bi in range(b):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[bi, oi, i, j] = np.sum(xp[bi, :, i:i + k, j:j + k] * w[oi])
    return out


class TestConv2d:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        assert np.allclose(conv2d(x, w), _naive_conv(x, w, 1), atol=1e-12)

    def test_valid_padding(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(1, 2, 3, 3))
        assert conv2d(x, w, pad=0).shape == (1, 1, 4, 4)

    def test_input_grad_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        r = rng.normal(size=(2, 2, 4, 4))
        grad = conv2d_input_grad(r, w)
        d = rng.normal(size=x.shape)
        eps = 1e-6
        fd = (np.sum(conv2d(x + eps * d, w) * r) - np.sum(conv2d(x - eps * d, w) * r)) / (2 * eps)
        assert fd == pytest.approx(np.sum(grad * d), rel=1e-6)

    def test_weight_grad_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        r = rng.normal(size=(2, 2, 4, 4))
        grad = conv2d_weight_grad(r, x, kernel=3)
        d = rng.normal(size=w.shape)
        eps = 1e-6
        fd = (np.sum(conv2d(x, w + eps * d) * r) - np.sum(conv2d(x, w - eps * d) * r)) / (2 * eps)
        assert fd == pytest.approx(np.sum(grad * d), rel=1e-6)


class TestPooling:
    def test_divisible(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = avg_pool(x, 2)
        assert out.shape == (1, 1, 2, 2)
        assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)

    def test_factor_16_on_32(self):
        assert avg_pool(np.ones((1, 2, 32, 32)), 4).shape == (1, 2, 8, 8)

    def test_padded_to_divisibility(self):
        out = avg_pool(np.ones((1, 1, 5, 5)), 2)
        assert out.shape == (1, 1, 3, 3)
        assert out[0, 0, 2, 2] == pytest.approx(0.25)

    def test_factor_one_is_identity(self):
        x = np.ones((1, 1, 3, 3))
        assert avg_pool(x, 1) is x

    def test_invalid_factor(self):
        with pytest.raises(ValueError, match="pool factor"):
            avg_pool(np.ones((1, 1, 2, 2)), 0)


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), np.array([0.0, 0.0, 2.0]))

    def test_projection(self):
        x = np.ones((1, 2, 2, 2))
        proj = np.array([[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]])
        out = project_channels(x, proj)
        assert out.shape == (1, 3, 2, 2)
        assert np.all(out[0, 0] == 3.0)
        assert np.all(out[0, 1] == -1.0)

    def test_batch_norm_grad_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 2, 3, 3))
        r = rng.normal(size=x.shape)
        y, inv_std = batch_norm(x)
        grad = batch_norm_grad(r, y, inv_std)
        d = rng.normal(size=x.shape)
        eps = 1e-6
        fd = (np.sum(batch_norm(x + eps * d)[0] * r) - np.sum(batch_norm(x - eps * d)[0] * r)) / (2 * eps)
        assert fd == pytest.approx(np.sum(grad * d), rel=1e-5)
