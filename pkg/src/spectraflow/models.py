"""Encoder, MeanFlow head and segmentation decoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .decoder import DafState, RefineState, daf, refine_block
from .nn import Conv, Module

ENCODER_WIDTHS = (16, 32, 64, 64)
DECODER_WIDTHS = (64, 32, 16, 8)
SKIP_BLOCK = 2  # encoder block whose output feeds the gated skip (1-based)
PENULTIMATE = 3


class EncoderBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(rng, c_in, c_out))
        self.conv2 = self.child("conv2", Conv(rng, c_out, c_out))

    def __call__(self, x: Var) -> Var:
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        return ad.avg_pool2(x)


class Encoder(Module):
    """Four conv blocks, each halving resolution. Block ``i`` is ``block{i}``."""

    def __init__(self, rng, in_ch: int = 3, widths=ENCODER_WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        self.blocks = []
        c = in_ch
        for i, w in enumerate(self.widths, start=1):
            self.blocks.append(self.child(f"block{i}", EncoderBlock(rng, c, w)))
            c = w

    def block_params(self, i: int) -> list[Var]:
        return self.blocks[i - 1].parameters()

    def __call__(self, x, start: int = 1, upto: int | None = None) -> list[Var]:
        """Outputs of blocks ``start..upto``; ``x`` is the input to block ``start``."""
        upto = upto or len(self.blocks)
        feats = []
        h = ad.as_var(x)
        for blk in self.blocks[start - 1 : upto]:
            h = blk(h)
            feats.append(h)
        return feats


class MeanFlowHead(Module):
    """Three 3x3 convs over the latent with ``t`` and ``s`` appended as constant channels."""

    def __init__(self, rng, channels: int = ENCODER_WIDTHS[-1]):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(rng, channels + 2, channels))
        self.conv2 = self.child("conv2", Conv(rng, channels, channels))
        self.conv3 = self.child("conv3", Conv(rng, channels, channels))

    def __call__(self, z, t, s) -> Var:
        z, t, s = ad.as_var(z), ad.as_var(t), ad.as_var(s)
        n, _, h, w = z.shape
        t_map = ad.broadcast_to(ad.reshape(t, (n, 1, 1, 1)), (n, 1, h, w))
        s_map = ad.broadcast_to(ad.reshape(s, (n, 1, 1, 1)), (n, 1, h, w))
        x = ad.concat([z, t_map, s_map], axis=1)
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        return self.conv3(x)


class Upsample(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.conv = self.child("conv", Conv(rng, c_in, c_out))

    def __call__(self, x: Var) -> Var:
        return ad.relu(self.conv(ad.bilinear_upsample(x, 2)))


class Decoder(Module):
    """Four x2 upsampling stages with one fused skip and one refinement block.

    ``fusion`` is ``"daf"`` or ``"concat"``; ``block`` is ``"fdconv"`` or
    ``"standard"``. The skip enters after the second stage, where the decoder
    resolution matches encoder block 2.
    """

    def __init__(self, rng, enc_widths=ENCODER_WIDTHS, widths=DECODER_WIDTHS, fusion: str = "daf", block: str = "fdconv"):
        super().__init__()
        if fusion not in ("daf", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        if block not in ("fdconv", "standard"):
            raise ValueError(f"unknown decoder block {block!r}")
        self.fusion, self.block = fusion, block
        c = enc_widths[-1]
        self.up = []
        for i, w in enumerate(widths, start=1):
            self.up.append(self.child(f"up{i}", Upsample(rng, c, w)))
            c = w
        fuse_c = widths[1]
        self.skip_proj = self.child("skip_proj", Conv(rng, enc_widths[SKIP_BLOCK - 1], fuse_c, k=1))
        if fusion == "daf":
            self.daf = self.child("daf", DafState(rng, fuse_c))
        else:
            self.merge = self.child("merge", Conv(rng, 2 * fuse_c, fuse_c, k=1))
        self.refine = self.child("refine", RefineState(rng, fuse_c, use_fdconv=block == "fdconv"))
        self.head = self.child("head", Conv(rng, widths[-1], 1, k=1))

    def fuse(self, f_dec: Var, skip: Var) -> Var:
        f_skip = self.skip_proj(skip)
        f_skip = ad.resize_bilinear(f_skip, *f_dec.shape[-2:])
        if self.fusion == "daf":
            return daf(f_dec, f_skip, self.daf)
        return self.merge(ad.concat([f_dec, f_skip], axis=1))

    def __call__(self, latent: Var, skip: Var) -> Var:
        """Foreground probabilities ``N x 1 x H x W``."""
        x = self.up[1](self.up[0](latent))
        x = self.fuse(x, skip)
        x = refine_block(x, self.refine)
        for stage in self.up[2:]:
            x = stage(x)
        return ad.sigmoid(self.head(x))


class SegModel(Module):
    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        self.encoder = self.child("encoder", encoder)
        self.decoder = self.child("decoder", decoder)

    def __call__(self, x) -> Var:
        feats = self.encoder(x)
        return self.decoder(feats[-1], feats[SKIP_BLOCK - 1])

    def forward_from(self, cached: Var, start: int, skip: Var | None) -> Var:
        """Run from a cached input to encoder block ``start`` (for frozen prefixes)."""
        feats = self.encoder(cached, start=start)
        if skip is None:
            skip = feats[SKIP_BLOCK - start]
        return self.decoder(feats[-1], skip)


def pooled_features(encoder: Encoder, x) -> np.ndarray:
    """Globally pooled penultimate-block features, ``N x C`` (no tape)."""
    with ad.no_grad():
        feats = encoder(x, upto=PENULTIMATE)
        return ad.global_avg_pool(feats[-1]).value
