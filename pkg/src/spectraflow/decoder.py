"""Decoder mechanisms: gated skip fusion (DAF) and frequency-modulated dynamic convolution.

Inputs may be single feature maps ``C x H x W`` or batches ``N x C x H x W``;
outputs keep the caller's layout.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import Var
from .nn import Conv, Module, kaiming

KERNEL = 3


def _batch(x) -> tuple[Var, bool]:
    x = ad.as_var(x)
    if x.ndim == 3:
        return ad.reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise T.ShapeError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def _unbatch(x: Var, squeeze: bool) -> Var:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# Direct attentional fusion
# ---------------------------------------------------------------------------


class DafState(Module):
    """Local point-wise branch plus channel-attention branch, no normalization.

    The last conv of each branch starts at zero, so the initial gate is 0.5
    everywhere and fusion begins as plain addition.
    """

    def __init__(self, rng, channels: int, reduction: int = 4, zero_init: bool = True):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.local1 = self.child("local1", Conv(rng, channels, channels, k=1))
        self.local2 = self.child("local2", Conv(rng, channels, channels, k=1, zero=zero_init))
        self.global1 = self.child("global1", Conv(rng, channels, hidden, k=1))
        self.global2 = self.child("global2", Conv(rng, hidden, channels, k=1, zero=zero_init))

    def local_branch(self, x: Var) -> Var:
        return self.local2(ad.relu(self.local1(x)))

    def global_branch(self, x: Var) -> Var:
        pooled = ad.global_avg_pool(x, keepdims=True)
        return self.global2(ad.relu(self.global1(pooled)))


def daf_gate(f_dec, f_skip, state: DafState) -> Var:
    """Dense sigmoid gate from the summed features, shape of ``f_dec``."""
    f_dec, f_skip = ad.as_var(f_dec), ad.as_var(f_skip)
    if f_dec.shape != f_skip.shape:
        raise T.ShapeError(f"decoder {f_dec.shape} and skip {f_skip.shape} shapes differ")
    xs, squeeze = _batch(ad.add(f_dec, f_skip))
    logits = ad.add(state.local_branch(xs), state.global_branch(xs))
    return _unbatch(ad.sigmoid(logits), squeeze)


def daf_fuse(f_dec, f_skip, gate) -> Var:
    """2 * f_dec * M + 2 * f_skip * (1 - M)."""
    f_dec, f_skip, gate = ad.as_var(f_dec), ad.as_var(f_skip), ad.as_var(gate)
    if f_dec.shape != f_skip.shape:
        raise T.ShapeError(f"decoder {f_dec.shape} and skip {f_skip.shape} shapes differ")
    a = ad.mul(ad.mul(f_dec, gate), 2.0)
    b = ad.mul(ad.mul(f_skip, ad.sub(1.0, gate)), 2.0)
    return ad.add(a, b)


def daf(f_dec, f_skip, state: DafState) -> Var:
    return daf_fuse(f_dec, f_skip, daf_gate(f_dec, f_skip, state))


# ---------------------------------------------------------------------------
# Frequency-modulated dynamic convolution
# ---------------------------------------------------------------------------


def _conjugate_index(k: int) -> np.ndarray:
    idx = np.arange(k * k).reshape(k, k)
    return np.roll(np.flip(idx, axis=(0, 1)), 1, axis=(0, 1)).reshape(-1)


class FdconvState(Module):
    """Complex 3x3 frequency coefficients and a pooled modulation network.

    The modulation output (one value per frequency bin, shared by all channel
    pairs) is averaged over conjugate bin pairs. Together with Hermitian
    coefficients this keeps the synthesized kernel real; the bins still
    separate horizontal, vertical and the two diagonal orientations.
    """

    def __init__(self, rng, c_in: int, c_out: int, hidden: int | None = None, modulate: bool = True):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.modulate = modulate
        hidden = hidden or max(4, c_in // 4)
        # initial a(f) = sigmoid(0) = 0.5, so coefficients are doubled to start at the spatial kernel
        spatial = kaiming(rng, (c_out, c_in, KERNEL, KERNEL))
        re, im = T.fft2(2.0 * spatial)
        self.w_re = self.param("w_re", re)
        self.w_im = self.param("w_im", im)
        self.mod1 = self.child("mod1", Conv(rng, c_in, hidden, k=1))
        self.mod2 = self.child("mod2", Conv(rng, hidden, KERNEL * KERNEL, k=1, zero=True))

    def set_spatial_kernel(self, kernel) -> None:
        re, im = T.fft2(np.asarray(kernel, dtype=np.float64))
        self.w_re.value, self.w_im.value = re, im

    def modulation(self, f: Var) -> Var:
        """``N x 9`` weights in (0, 1), symmetric over conjugate bins."""
        pooled = ad.global_avg_pool(f, keepdims=True)
        logits = self.mod2(ad.relu(self.mod1(pooled)))
        a = ad.sigmoid(ad.reshape(logits, (f.shape[0], KERNEL * KERNEL)))
        conj = _conjugate_index(KERNEL)
        return ad.mul(ad.add(a, ad.getitem(a, (slice(None), conj))), 0.5)


def fdconv_kernel(f, state: FdconvState, a=None, return_residue: bool = False):
    """Per-sample spatial kernel ``Re(IFFT2(a(f) * W~))``.

    ``a`` overrides the modulation (array broadcastable to ``N x 9`` or a scalar).
    Returns ``N x C_out x C_in x 3 x 3`` for batched input, ``C_out x C_in x 3 x 3``
    for a single map; with ``return_residue`` also the max imaginary magnitude.
    """
    fb, squeeze = _batch(f)
    n = fb.shape[0]
    if a is not None:
        a = ad.as_var(np.broadcast_to(np.asarray(a, dtype=np.float64), (n, KERNEL * KERNEL)))
    elif state.modulate:
        a = state.modulation(fb)
    if a is None:
        re = ad.broadcast_to(state.w_re, (n, *state.w_re.shape))
        im = ad.broadcast_to(state.w_im, (n, *state.w_im.shape))
    else:
        a5 = ad.reshape(a, (n, 1, 1, KERNEL, KERNEL))
        re = ad.mul(a5, state.w_re)
        im = ad.mul(a5, state.w_im)
    k_re, k_im = ad.dft2(re, im, inverse=True)
    if squeeze:
        k_re = ad.reshape(k_re, k_re.shape[1:])
    if return_residue:
        return k_re, float(np.abs(k_im.value).max())
    return k_re


def fdconv_apply(f, state: FdconvState, a=None) -> Var:
    """Convolve each sample with its own synthesized kernel (padding 1)."""
    fb, squeeze = _batch(f)
    kernel = fdconv_kernel(fb, state, a=a)
    return _unbatch(ad.conv2d(fb, kernel, padding=KERNEL // 2), squeeze)


# ---------------------------------------------------------------------------
# Refinement block
# ---------------------------------------------------------------------------


class RefineState(Module):
    """Residual block; the first 3x3 conv is FDConv or a plain conv."""

    def __init__(self, rng, channels: int, use_fdconv: bool = True):
        super().__init__()
        self.use_fdconv = use_fdconv
        if use_fdconv:
            self.first = self.child("fdconv", FdconvState(rng, channels, channels))
        else:
            self.first = self.child("conv1", Conv(rng, channels, channels))
        self.second = self.child("conv2", Conv(rng, channels, channels))

    def zero_(self) -> None:
        for _, v in self.named_parameters():
            v.value = np.zeros_like(v.value)


def refine_block(f, state: RefineState) -> Var:
    """ReLU(f + conv(ReLU(first(f))))."""
    fb, squeeze = _batch(f)
    if state.use_fdconv:
        h = fdconv_apply(fb, state.first)
    else:
        h = state.first(fb)
    y = ad.relu(ad.add(fb, state.second(ad.relu(h))))
    return _unbatch(y, squeeze)
