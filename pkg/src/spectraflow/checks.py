"""Gradient-check battery over every differentiable operation.

Each case maps one input array to a scalar; vector-valued ops are contracted
with a fixed random weight tensor so every output element contributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import dispersive as dsp
from . import seg
from .autodiff import Var
from .decoder import DafState, FdconvState, RefineState, daf, fdconv_apply, refine_block
from .meanflow import meanflow_loss, normalize_latent, perturb
from .models import Decoder, MeanFlowHead
from .nn import Module


@dataclass
class Case:
    name: str
    fn: Callable[[Var], Var]
    x: np.ndarray


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    passed: bool


def _contract(rng, shape):
    w = rng.standard_normal(shape)
    return lambda y: ad.sum_(ad.mul(y, w))


def _away_from_zero(rng, shape, margin=0.2):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _param_case(name: str, module: Module, pname: str, loss_fn: Callable[[], Var]) -> Case:
    """Check w.r.t. one named parameter by swapping its value in."""
    original = dict(module.named_parameters())[pname]

    def fn(x: Var) -> Var:
        module_param_swap(module, pname, x)
        try:
            return loss_fn()
        finally:
            module_param_swap(module, pname, original)

    return Case(name, fn, original.value.copy())


def module_param_swap(module: Module, dotted: str, var: Var) -> None:
    """Replace the Var object registered under ``dotted`` (and its attribute alias)."""
    *path, leaf = dotted.split(".")
    owner = module
    for part in path:
        owner = owner._children[part]
    old = owner._params[leaf]
    owner._params[leaf] = var
    for attr, value in vars(owner).items():
        if value is old:
            setattr(owner, attr, var)


def elementwise_cases(rng) -> list[Case]:
    shape = (3, 4)
    pos = np.abs(rng.standard_normal(shape)) + 0.5
    other = rng.standard_normal(shape)
    other_pos = np.abs(rng.standard_normal(shape)) + 0.5
    c = _contract(rng, shape)
    gen = rng.standard_normal(shape)
    nz = _away_from_zero(rng, shape)
    return [
        Case("add", lambda x: c(ad.add(x, other)), gen),
        Case("sub", lambda x: c(ad.sub(other, x)), gen),
        Case("mul", lambda x: c(ad.mul(x, other)), gen),
        Case("div/numerator", lambda x: c(ad.div(x, other_pos)), gen),
        Case("div/denominator", lambda x: c(ad.div(other, x)), pos),
        Case("exp", lambda x: c(ad.exp(x)), gen),
        Case("log", lambda x: c(ad.log(x)), pos),
        Case("sigmoid", lambda x: c(ad.sigmoid(x)), gen),
        Case("relu", lambda x: c(ad.relu(x)), nz),
        Case("abs", lambda x: c(ad.abs_(x)), nz),
        Case("square", lambda x: c(ad.square(x)), gen),
        Case("sqrt", lambda x: c(ad.sqrt(x)), pos),
        Case("clip", lambda x: c(ad.clip(x, -0.5, 0.5)), np.clip(nz, -2, 2) * np.where(np.abs(nz) < 0.6, 0.5, 1.0)),
        Case("broadcast-add", lambda x: c(ad.add(x, ad.as_var(other[:1]))), gen),
        Case("broadcast-mul/row", lambda x: c(ad.mul(ad.broadcast_to(x, shape), other)), gen[:1]),
    ]


def shape_cases(rng) -> list[Case]:
    x = rng.standard_normal((2, 3, 4))
    m = rng.standard_normal((4, 5))
    c = {k: _contract(rng, k) for k in [(2, 4), (6, 4), (4, 2, 3), (5, 2, 3, 4), (2, 2), (2, 6, 4), (2, 3, 5)]}
    return [
        Case("sum/axis", lambda v: c[(2, 4)](ad.sum_(v, axis=1)), x),
        Case("mean/all", lambda v: ad.mean(ad.square(v)), x),
        Case("reshape", lambda v: c[(6, 4)](ad.reshape(v, (6, 4))), x),
        Case("transpose", lambda v: c[(4, 2, 3)](ad.transpose(v, (2, 0, 1))), x),
        Case("broadcast_to", lambda v: c[(5, 2, 3, 4)](ad.broadcast_to(v, (5, 2, 3, 4))), x),
        Case("getitem", lambda v: c[(2, 2)](ad.getitem(v, (slice(None), [0, 2], 1))), x),
        Case("concat", lambda v: c[(2, 6, 4)](ad.concat([v, ad.mul(v, 2.0)], axis=1)), x),
        Case("matmul", lambda v: c[(2, 3, 5)](ad.matmul(v, m)), x),
        Case("logsumexp", lambda v: c[(2, 4)](ad.logsumexp(v, axis=1)), x),
    ]


def spatial_cases(rng) -> list[Case]:
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    w5 = rng.standard_normal((2, 4, 3, 3, 3))
    c_conv = _contract(rng, (2, 4, 6, 6))
    im = rng.standard_normal((2, 3, 4, 4))
    c_fft = _contract(rng, (2, 3, 4, 4))
    c_fft2 = _contract(rng, (2, 3, 4, 4))
    c = {k: _contract(rng, k) for k in [(2, 3), (2, 3, 3, 3), x.shape, (2, 3, 9, 7), (2, 3, 12, 12)]}
    return [
        Case("conv2d/input", lambda v: c_conv(ad.conv2d(v, w, padding=1)), x),
        Case("conv2d/kernel", lambda v: c_conv(ad.conv2d(x, v, padding=1)), w),
        Case("conv2d/per-sample-kernel", lambda v: c_conv(ad.conv2d(x, v, padding=1)), w5),
        Case("conv2d/1x1", lambda v: c_conv(ad.conv2d(v, w[:, :, :1, :1])), x),
        Case("global_avg_pool", lambda v: c[(2, 3)](ad.global_avg_pool(v)), x),
        Case("avg_pool2", lambda v: c[(2, 3, 3, 3)](ad.avg_pool2(v)), x),
        Case("box_mean3", lambda v: c[x.shape](ad.box_mean3(v)), x),
        Case("resize_bilinear", lambda v: c[(2, 3, 9, 7)](ad.resize_bilinear(v, 9, 7)), x),
        Case("bilinear_upsample", lambda v: c[(2, 3, 12, 12)](ad.bilinear_upsample(v, 2)), x),
        Case("dft2/real-part", lambda v: _dft_loss(v, im, c_fft, c_fft2, False), rng.standard_normal(im.shape)),
        Case("dft2/imag-part", lambda v: _dft_loss(im, v, c_fft, c_fft2, False), rng.standard_normal(im.shape)),
        Case("idft2/real-part", lambda v: _dft_loss(v, im, c_fft, c_fft2, True), rng.standard_normal(im.shape)),
        Case("idft2/imag-part", lambda v: _dft_loss(im, v, c_fft, c_fft2, True), rng.standard_normal(im.shape)),
    ]


def _dft_loss(re, im, c1, c2, inverse):
    yr, yi = ad.dft2(re, im, inverse=inverse)
    return ad.add(c1(yr), c2(yi))


def loss_cases(rng) -> list[Case]:
    h = rng.standard_normal((6, 5)) * 0.7
    pos = h + 0.1 * rng.standard_normal(h.shape)
    pred = rng.uniform(0.05, 0.95, size=(2, 1, 8, 8))
    gt = (rng.random((2, 1, 8, 8)) > 0.5).astype(float)
    logits = rng.standard_normal(pred.shape)
    latent = rng.standard_normal((2, 4, 3, 3))
    head = MeanFlowHead(rng, channels=4)
    c_lat = _contract(rng, latent.shape)
    return [
        Case("disp_l2", lambda v: dsp.disp_l2(v), h),
        Case("disp_cosine", lambda v: dsp.disp_cosine(v), h),
        Case("disp_hinge", lambda v: dsp.disp_hinge(v, margin=4.0), h),
        Case("disp_covariance", lambda v: dsp.disp_covariance(v), h),
        Case("disp_lse", lambda v: dsp.disp_lse(v), h),
        Case("info_nce", lambda v: dsp.info_nce(v, pos), h),
        Case("dice_bce_loss", lambda v: seg.dice_bce_loss(ad.sigmoid(v), gt), logits),
        Case("boundary_loss", lambda v: seg.boundary_loss(ad.sigmoid(v), gt), logits),
        Case("stage2_loss", lambda v: seg.stage2_loss(ad.sigmoid(v), gt, beta=1.0), logits),
        Case("normalize_latent", lambda v: c_lat(normalize_latent(v)), latent),
        Case(
            "meanflow_loss/latent",
            lambda v: meanflow_loss(head, perturb(v, [0.7, 0.4], 5, s=[0.2, 0.4]), np.zeros(latent.shape)),
            latent,
        ),
    ]


def decoder_cases(rng) -> list[Case]:
    c = 6
    f_dec = rng.standard_normal((2, c, 5, 5))
    f_skip = rng.standard_normal((2, c, 5, 5))
    daf_state = DafState(rng, c, zero_init=False)
    fd = FdconvState(rng, c, c)
    fd.mod2.w.value = 0.3 * rng.standard_normal(fd.mod2.w.shape)
    ref = RefineState(rng, c, use_fdconv=True)
    ref.first.mod2.w.value = 0.3 * rng.standard_normal(ref.first.mod2.w.shape)
    cd = _contract(rng, f_dec.shape)

    # composite: small decoder + Stage-2 loss, random non-zero gates
    enc_widths, widths = (4, 5, 6, 6), (6, 5, 4, 3)
    dec = Decoder(rng, enc_widths=enc_widths, widths=widths)
    for name, p in dec.named_parameters():
        if np.all(p.value == 0):
            p.value = 0.3 * rng.standard_normal(p.shape)
    latent = rng.standard_normal((2, 6, 1, 1))
    skip = rng.standard_normal((2, 5, 4, 4))
    gt = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)

    def composite(lat=latent, sk=skip):
        return seg.stage2_loss(dec(lat, sk), gt, beta=1.0)

    return [
        Case("daf/decoder-input", lambda v: cd(daf(v, f_skip, daf_state)), f_dec),
        Case("daf/skip-input", lambda v: cd(daf(f_dec, v, daf_state)), f_skip),
        _param_case("daf/local-weights", daf_state, "local2.w", lambda: cd(daf(f_dec, f_skip, daf_state))),
        _param_case("daf/global-weights", daf_state, "global1.w", lambda: cd(daf(f_dec, f_skip, daf_state))),
        Case("fdconv/input", lambda v: cd(fdconv_apply(v, fd)), f_dec),
        _param_case("fdconv/coeff-real", fd, "w_re", lambda: cd(fdconv_apply(f_dec, fd))),
        _param_case("fdconv/coeff-imag", fd, "w_im", lambda: cd(fdconv_apply(f_dec, fd))),
        _param_case("fdconv/modulation", fd, "mod2.w", lambda: cd(fdconv_apply(f_dec, fd))),
        Case("refine_block/input", lambda v: cd(refine_block(v, ref)), f_dec),
        Case("decoder+stage2_loss/latent", lambda v: composite(lat=v), latent),
        Case("decoder+stage2_loss/skip", lambda v: composite(sk=v), skip),
        _param_case("decoder+stage2_loss/daf-gate", dec, "daf.local1.w", composite),
        _param_case("decoder+stage2_loss/fdconv-real", dec, "refine.fdconv.w_re", composite),
        _param_case("decoder+stage2_loss/fdconv-modulation", dec, "refine.fdconv.mod1.w", composite),
        _param_case("decoder+stage2_loss/head", dec, "head.w", composite),
    ]


def battery(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    return elementwise_cases(rng) + shape_cases(rng) + spatial_cases(rng) + loss_cases(rng) + decoder_cases(rng)


def run_battery(tol: float = 1e-5, seed: int = 0, step: float = 1e-5) -> list[CaseResult]:
    out = []
    for case in battery(seed):
        report = ad.grad_check(case.fn, case.x, tol=tol, step=step)
        out.append(CaseResult(case.name, report.max_rel_err, report.passed))
    return out
