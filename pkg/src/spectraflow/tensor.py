"""Dense float64 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Complex data travels as a ``(real, imag)`` pair of real arrays. Every function
here is pure: inputs are never written to.

Layout conventions: feature maps are ``C x H x W`` or batched ``N x C x H x W``;
convolution kernels are ``C_out x C_in x k x k`` and use cross-correlation
(no kernel flip).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "ShapeError",
    "as_tensor",
    "broadcast_shape",
    "elementwise",
    "fft2",
    "ifft2",
    "dft_matrix",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_kernel_grad",
    "global_avg_pool",
    "avg_pool2",
    "box_mean3",
    "upsample_matrix",
    "bilinear_upsample",
    "resize_bilinear",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "sigmoid": _sigmoid,
    "relu": lambda x: np.maximum(x, 0.0),
    "exp": np.exp,
    "log": np.log,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply a named elementwise op. Binary ops broadcast numpy-style."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        b = np.asarray(b, dtype=np.float64)
        broadcast_shape(a.shape, b.shape)
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Discrete Fourier transform
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    """Complex ``n x n`` DFT matrix, unnormalized in both directions."""
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    mat.setflags(write=False)
    return mat


def _fft_radix2(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative Cooley-Tukey along the last axis; length must be a power of 2."""
    n = x.shape[-1]
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    y = x[..., rev].astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        y = y.reshape(*x.shape[:-1], n // size, size)
        even = y[..., :half]
        odd = y[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return y.reshape(x.shape)


def _dft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    if n >= 8 and n & (n - 1) == 0:
        return _fft_radix2(x, inverse)
    # small or non power-of-two extents use the direct O(n^2) transform
    return x @ dft_matrix(n, inverse)


def _dft2(xc: np.ndarray, inverse: bool) -> np.ndarray:
    y = _dft_last(xc, inverse)
    y = np.swapaxes(_dft_last(np.swapaxes(y, -1, -2), inverse), -1, -2)
    return y


def _split_complex(x_re, x_im):
    x_re = np.asarray(x_re, dtype=np.float64)
    x_im = np.zeros_like(x_re) if x_im is None else np.asarray(x_im, dtype=np.float64)
    if x_re.shape != x_im.shape:
        raise ShapeError(f"real/imag shape mismatch {x_re.shape} vs {x_im.shape}")
    if x_re.ndim < 2 or min(x_re.shape[-2:]) < 1:
        raise ShapeError(f"fft2 needs trailing H x W extents, got {x_re.shape}")
    return x_re + 1j * x_im


def fft2(x_re, x_im=None) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized forward 2-D DFT over the last two axes."""
    y = _dft2(_split_complex(x_re, x_im), inverse=False)
    return y.real.copy(), y.imag.copy()


def ifft2(x_re, x_im=None) -> tuple[np.ndarray, np.ndarray]:
    """Inverse 2-D DFT over the last two axes, scaled by ``1/(H*W)``."""
    xc = _split_complex(x_re, x_im)
    h, w = xc.shape[-2:]
    y = _dft2(xc, inverse=True) / (h * w)
    return y.real.copy(), y.imag.copy()


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    """``N x C x H x W`` -> ``N x (C*k*k) x (H'*W')`` patch matrix."""
    if k == 1 and not padding:
        return x.reshape(x.shape[0], x.shape[1], -1)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    taps = [x[:, :, i : i + ho, j : j + wo] for i in range(k) for j in range(k)]
    return np.stack(taps, axis=2).reshape(n, c * k * k, ho * wo)


def _check_conv(xb: np.ndarray, kernel: np.ndarray, padding: int) -> int:
    if kernel.ndim not in (4, 5):
        raise ShapeError(f"kernel must be rank 4 or 5, got shape {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape[-4:]
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if c_in != xb.shape[1]:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {xb.shape[1]}")
    if padding < 0 or xb.shape[2] + 2 * padding < k or xb.shape[3] + 2 * padding < k:
        raise ShapeError("input smaller than kernel")
    if kernel.ndim == 5 and kernel.shape[0] != xb.shape[0]:
        raise ShapeError("per-sample kernel batch does not match input batch")
    return k


def conv2d(x, kernel, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation, stride 1.

    ``kernel`` is ``C_out x C_in x k x k`` (shared) or ``N x C_out x C_in x k x k``
    (one kernel per batch item).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    xb, squeeze = _batched(x)
    _check_conv(xb, kernel, padding)
    out, _ = conv2d_with_cols(xb, kernel, padding)
    return out[0] if squeeze else out


def conv2d_with_cols(xb: np.ndarray, kernel: np.ndarray, padding: int):
    """Batched conv that also returns the patch matrix for reuse in the adjoint."""
    k = kernel.shape[-1]
    n, _, h, w = xb.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    cols = _im2col(xb, k, padding)
    out = kernel.reshape(*kernel.shape[:-3], -1) @ cols
    return out.reshape(n, kernel.shape[-4], ho, wo), cols


def conv2d_input_grad(grad_out, kernel, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input (batched)."""
    k = kernel.shape[-1]
    flipped = np.swapaxes(np.flip(kernel, axis=(-1, -2)), -3, -4)
    return conv2d(grad_out, np.ascontiguousarray(flipped), padding=k - 1 - padding)


def conv2d_kernel_grad(x, grad_out, k: int, padding: int, per_sample: bool = False, cols=None) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its kernel (batched)."""
    if cols is None:
        cols = _im2col(x, k, padding)
    n, c_out = grad_out.shape[:2]
    g = grad_out.reshape(n, c_out, -1)
    gk = g @ cols.transpose(0, 2, 1)
    if per_sample:
        return gk.reshape(n, c_out, x.shape[1], k, k)
    return gk.sum(axis=0).reshape(c_out, x.shape[1], k, k)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def global_avg_pool(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] * x.shape[-2] < 1:
        raise ShapeError("empty spatial extent")
    return x.mean(axis=(-1, -2))


def avg_pool2(x) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling over the last two axes (even extents)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-1, -3))


@lru_cache(maxsize=64)
def _box_counts(h: int, w: int) -> np.ndarray:
    ones = np.ones((h, w))
    padded = np.pad(ones, 1)
    counts = sum(padded[i : i + h, j : j + w] for i in range(3) for j in range(3))
    counts.setflags(write=False)
    return counts


def box_mean3(x) -> np.ndarray:
    """3x3 mean over valid neighbours (edge pixels average fewer taps)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(x, pad)
    total = sum(padded[..., i : i + h, j : j + w] for i in range(3) for j in range(3))
    return total / _box_counts(h, w)


@lru_cache(maxsize=64)
def upsample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix ``n_out x n_in`` (align_corners=False)."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.setflags(write=False)
    return mat


def resize_bilinear(x, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    return upsample_matrix(h, out_h) @ x @ upsample_matrix(w, out_w).T


def bilinear_upsample(x, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return resize_bilinear(x, h * factor, w * factor)
