"""Stage-1 latent transport regression and mixed image/mask batching."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var
from .models import MeanFlowHead

DEFAULT_P_EQ = 0.25
DEFAULT_EMA_DECAY = 0.999


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _times(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    return t


@dataclass
class PerturbState:
    """Noised latent ``zt = (1 - t) z0 + t eps``; ``t`` and ``s`` hold one value per item."""

    z0: Var
    eps: np.ndarray
    t: np.ndarray
    s: np.ndarray
    zt: Var

    @property
    def velocity(self) -> np.ndarray:
        return self.eps - self.z0.value


def normalize_latent(z, eps: float = 1e-6) -> Var:
    """Scale each latent to unit root-mean-square.

    The regression target is detached, so nothing else pins the latent
    scale; without this the encoder drifts to ever larger latents.
    """
    z = ad.as_var(z)
    rms = ad.sqrt(ad.add(ad.mean(ad.square(z), axis=(1, 2, 3), keepdims=True), eps))
    return ad.div(z, rms)


def perturb(z0, t, seed, s=None) -> PerturbState:
    """Noise a batch of latents ``N x C x h x w``; ``t`` (and ``s``) are scalars or length-N.

    ``s`` defaults to ``t``. ``zt`` stays differentiable w.r.t. ``z0``.
    """
    z0 = ad.as_var(z0)
    if z0.ndim != 4:
        raise ContractError(f"latents must be N x C x h x w, got {z0.shape}")
    n = z0.shape[0]
    t = _times(t, n)
    s = t.copy() if s is None else _times(s, n)
    if np.any((t < 0) | (t > 1)):
        raise ContractError("t must lie in [0, 1]")
    if np.any(s > t) or np.any(s < 0):
        raise ContractError("need 0 <= s <= t")
    eps = _rng(seed).standard_normal(z0.shape)
    tb = t.reshape(n, 1, 1, 1)
    zt = ad.add(ad.mul(z0, 1.0 - tb), tb * eps)
    return PerturbState(z0, eps, t, s, zt)


def sample_times(seed, n: int | None = None, p_eq: float = DEFAULT_P_EQ):
    """Ordered pairs ``t >= s``; with probability ``p_eq`` the pair is degenerate (``s == t``).

    Returns floats for ``n=None`` and arrays of length ``n`` otherwise.
    """
    if not 0 <= p_eq <= 1:
        raise ContractError("p_eq must be in [0, 1]")
    rng = _rng(seed)
    size = 1 if n is None else n
    u = rng.random((2, size))
    t, s = u.max(0), u.min(0)
    equal = rng.random(size) < p_eq
    s = np.where(equal, t, s)
    if n is None:
        return float(t[0]), float(s[0])
    return t, s


class MeanFlow:
    """Online head plus its EMA copy, used only to produce stop-gradient targets."""

    def __init__(self, rng, channels: int = 64):
        self.head = MeanFlowHead(rng, channels)
        self.ema = copy.deepcopy(self.head)
        for _, v in self.ema.named_parameters():
            v.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"head.{k}": v for k, v in self.head.state_dict().items()}
        out.update({f"ema.{k}": v for k, v in self.ema.state_dict().items()})
        return out


def meanflow_target(state: PerturbState, ema_head: MeanFlowHead) -> np.ndarray:
    """``v - (t - s) * d/dt h(zt, t, s)`` with the total derivative along ``(v, 1, 0)``.

    The forward-mode derivative is exact; the result is a plain array, so no
    gradient can flow back through it.
    """
    v = state.velocity
    zt = state.zt.value
    n = zt.shape[0]
    dh = ad.jvp(ema_head, (zt, state.t, state.s), (v, np.ones(n), np.zeros(n)))
    gap = (state.t - state.s).reshape(n, 1, 1, 1)
    return v - gap * dh


def meanflow_loss(head: MeanFlowHead, state: PerturbState, target: np.ndarray) -> Var:
    """Mean squared regression of ``head(zt, t, s)`` onto the detached target."""
    pred = head(state.zt, state.t, state.s)
    return ad.mean(ad.square(ad.sub(pred, np.asarray(target, dtype=np.float64))))


def ema_update(online, ema, decay: float = DEFAULT_EMA_DECAY) -> None:
    """``ema <- decay * ema + (1 - decay) * online`` for every named parameter."""
    if not 0 <= decay <= 1:
        raise ContractError("decay must be in [0, 1]")
    src = dict(online.named_parameters())
    for name, v in ema.named_parameters():
        v.value = decay * v.value + (1.0 - decay) * src[name].value


# ---------------------------------------------------------------------------
# Mixed image/mask batches
# ---------------------------------------------------------------------------


@dataclass
class MixedBatch:
    inputs: np.ndarray  # N x 3 x H x W, unnormalized
    tags: list[str]  # "image" or "mask" per item

    @property
    def mask_count(self) -> int:
        return sum(t == "mask" for t in self.tags)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _assemble(images, masks, img_idx, mask_idx, rng) -> MixedBatch:
    items = [("image", images[i]) for i in img_idx]
    items += [("mask", np.repeat(masks[i], 3, axis=0)) for i in mask_idx]
    order = rng.permutation(len(items))
    return MixedBatch(np.stack([items[i][1] for i in order]), [items[i][0] for i in order])


def _check_sources(images, masks, ratio: float, batch_size: int):
    if not 0 <= ratio <= 1:
        raise ContractError("mask ratio must be in [0, 1]")
    if batch_size < 1:
        raise ContractError("batch size must be positive")
    if ratio < 1 and len(images) == 0:
        raise ContractError("image source is empty")
    if ratio > 0 and len(masks) == 0:
        raise ContractError("mask source is empty")


def make_mixed_batch(images, masks, batch_size: int, mask_ratio: float, seed) -> MixedBatch:
    """One batch holding ``round(mask_ratio * batch_size)`` replicated masks.

    ``images`` are ``3 x H x W`` arrays, ``masks`` are ``1 x H x W`` binary arrays.
    """
    _check_sources(images, masks, mask_ratio, batch_size)
    rng = _rng(seed)
    k = _round_half_up(mask_ratio * batch_size)
    img_idx = rng.integers(0, max(len(images), 1), size=batch_size - k)
    mask_idx = rng.integers(0, max(len(masks), 1), size=k)
    return _assemble(images, masks, img_idx, mask_idx, rng)


def mixed_epoch(images, masks, batch_size: int, mask_ratio: float, n_batches: int, seed):
    """Yield ``n_batches`` mixed batches for one epoch.

    Per-batch mask counts follow cumulative rounding, so the epoch total is
    within one item of ``mask_ratio * n_batches * batch_size``. Images and masks
    are drawn from reshuffled passes over their sources.
    """
    _check_sources(images, masks, mask_ratio, batch_size)
    rng = _rng(seed)

    def stream(n):
        while True:
            yield from rng.permutation(n)

    img_stream = stream(len(images)) if len(images) else None
    mask_stream = stream(len(masks)) if len(masks) else None
    done = 0
    for b in range(n_batches):
        k = _round_half_up(mask_ratio * (b + 1) * batch_size) - done
        done += k
        img_idx = [next(img_stream) for _ in range(batch_size - k)]
        mask_idx = [next(mask_stream) for _ in range(k)]
        yield _assemble(images, masks, img_idx, mask_idx, rng)
