"""Dense float64 tensor primitives with hand-written backward passes.

Activations are plain ``numpy.ndarray`` objects laid out as (N, C, H, W).
Convolutions are fixed to 3x3 kernels, stride 1, zero padding 1; pooling is
2x2 with stride 2.  Every function is pure: inputs are never mutated.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with an operation."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox (counter-based) generator for ``seed``.

    Extra integers select an independent sub-stream, so ``make_rng(7, 0)`` and
    ``make_rng(7, 1)`` never overlap while both stay reproducible.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def as_tensor4(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# convolution

def im2col(x: np.ndarray) -> np.ndarray:
    """Patch matrix of shape (N*H*W, C*9) for 3x3 / stride 1 / pad 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))     # (N, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"weight must be Cout x Cin x 3 x 3, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )


def conv2d_forward(x, weight, bias=None, cols: np.ndarray | None = None) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    x = as_tensor4(x)
    weight = np.asarray(weight, dtype=DTYPE)
    _check_conv(x, weight)
    n, _, h, w = x.shape
    if cols is None:
        cols = im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T      # (N*H*W, Cout)
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out += bias
    return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d_backward(x, weight, grad_out, cols: np.ndarray | None = None,
                    need_grad_x: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    With ``need_grad_x=False`` the input gradient is returned as ``None``.
    """
    x = as_tensor4(x)
    weight = np.asarray(weight, dtype=DTYPE)
    grad_out = as_tensor4(grad_out, "grad_out")
    _check_conv(x, weight)
    n, c, h, w = x.shape
    cout = weight.shape[0]
    if grad_out.shape != (n, cout, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, cout, h, w)}"
        )
    if cols is None:
        cols = im2col(x)
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_grad_x:
        gcols = (g @ weight.reshape(cout, -1)).reshape(n, h, w, c, 3, 3)
        # col2im, accumulated channels-last
        gpad = np.zeros((n, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                gpad[:, i:i + h, j:j + w, :] += gcols[..., i, j]
        grad_x = np.ascontiguousarray(gpad[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# pointwise / pooling / dense

def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return grad_out * (np.asarray(x) > 0.0)


def avgpool2x2_forward(x) -> np.ndarray:
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2x2_backward(x_shape, grad_out) -> np.ndarray:
    n, c, h, w = x_shape
    grad_out = as_tensor4(grad_out, "grad_out")
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled {x_shape}")
    g = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3)
    return g * 0.25


def global_avg_pool_forward(x) -> np.ndarray:
    return as_tensor4(x).mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out) -> np.ndarray:
    n, c, h, w = x_shape
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match ({n}, {c})")
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).copy()


def linear_forward(x, weight, bias) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear: grad_out {grad_out.shape} incompatible")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, grad_out) -> np.ndarray:
    probs = np.asarray(probs, dtype=DTYPE)
    dot = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - dot)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    z = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logz - z[np.arange(z.shape[0]), labels]))


def cross_entropy_backward(logits, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    g = softmax(z)
    g[np.arange(z.shape[0]), labels] -= 1.0
    return g / z.shape[0]


# --------------------------------------------------------------------------
# verification helpers

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=DTYPE)
    b = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
