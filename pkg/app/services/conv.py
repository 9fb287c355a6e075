"""
Stride-1 NCHW convolution primitives and their gradients, in numpy.

Weights are (C_out, C_in, k, k). The input-gradient operator is a convolution
with the spatially flipped, channel-transposed kernel; the weight gradient
contracts the output gradient against input windows.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def same_padding(kernel: int) -> int:
    return (kernel - 1) // 2


def conv2d(x: np.ndarray, w: np.ndarray, pad: int = None) -> np.ndarray:
    k = w.shape[-1]
    pad = same_padding(k) if pad is None else pad
    windows = sliding_window_view(_pad_hw(x, pad), (k, k), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, pad: int = None) -> np.ndarray:
    """Gradient w.r.t. the convolution input for output gradient `g`."""
    k = w.shape[-1]
    pad = same_padding(k) if pad is None else pad
    w_t = np.flip(w, axis=(2, 3)).transpose(1, 0, 2, 3)
    return conv2d(g, w_t, pad=k - 1 - pad)


def conv2d_weight_grad(g: np.ndarray, x: np.ndarray, kernel: int, pad: int = None) -> np.ndarray:
    """Gradient w.r.t. the weights: output gradient times input windows."""
    pad = same_padding(kernel) if pad is None else pad
    windows = sliding_window_view(_pad_hw(x, pad), (kernel, kernel), axis=(2, 3))
    return np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def pooled_size(size: int, factor: int) -> int:
    return -(-size // factor)


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Average pooling with window = stride = factor; spatial dims are zero-padded to divisibility."""
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    hh, ww = (h + ph) // factor, (w + pw) // factor
    return x.reshape(b, c, hh, factor, ww, factor).mean(axis=(3, 5))


def project_channels(x: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Apply a fixed 1x1 channel map `proj` of shape (C_out, C_in)."""
    return np.einsum("oc,bchw->bohw", proj, x, optimize=True)


def batch_norm(x: np.ndarray, eps: float = 1e-5):
    """Per-channel batch-statistics normalization without affine terms. Returns (y, inv_std)."""
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv_std, inv_std


def batch_norm_grad(dy: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    sum_dy = dy.sum(axis=(0, 2, 3), keepdims=True)
    sum_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
    return inv_std / n * (n * dy - sum_dy - xhat * sum_dy_xhat)
