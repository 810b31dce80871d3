"""Float64 reference ops shared by the FP and expanded forward passes.

Batches are leading-axis: linear inputs are (B, F), conv inputs are (B, C, H, W).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorio import conv_out_hw


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, B*Ho*Wo).

    Row order matches ``weight.reshape(O, C*kh*kw)``; column order is batch-major,
    so ``(W2 @ cols).reshape(O, B, Ho, Wo)`` is the convolution output.
    """
    b, c, h, w = x.shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (B, C, Ho, Wo, kh, kw) -> (C, kh, kw, B, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, b * ho * wo)


def cols_to_output(y: np.ndarray, batch: int, ho: int, wo: int) -> np.ndarray:
    """(O, B*Ho*Wo) -> (B, O, Ho, Wo)."""
    return y.reshape(y.shape[0], batch, ho, wo).transpose(1, 0, 2, 3)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    y = x @ weight.T
    return y + bias if bias is not None else y


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    o, c, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    y = cols_to_output(weight.reshape(o, -1) @ im2col(x, kh, kw, stride, padding), x.shape[0], ho, wo)
    return y + bias[None, :, None, None] if bias is not None else y
