"""Procedural segmentation benchmark and appearance corruptions.

Each sample is drawn from its own generator seeded by ``(seed, id)``, so any
subset can be regenerated independently and in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ContractError

MIN_FG, MAX_FG = 0.02, 0.60


class DatasetError(ValueError):
    """An exported dataset directory is missing pieces or malformed."""

CORRUPTIONS = {
    # kind: (min, max, identity magnitude)
    "brightness": (-0.3, 0.3, 0.0),
    "contrast": (0.3, 1.7, 1.0),
    "blur": (0.0, 3.0, 0.0),
    "noise": (0.0, 0.2, 0.0),
}
# three magnitudes per kind, mildest first
SEVERITIES = {
    "brightness": (0.1, 0.2, 0.3),
    "contrast": (0.7, 0.5, 0.3),
    "blur": (1.0, 2.0, 3.0),
    "noise": (0.05, 0.1, 0.2),
}


@dataclass
class SegSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    mask: np.ndarray  # 1 x H x W in {0, 1}
    id: int
    split: str = "train"
    corruption: tuple[str, float] = ("none", 0.0)


@dataclass
class Benchmark:
    train: list[SegSample]
    val: list[SegSample]
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _blob(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Ellipse whose radius is perturbed by a low-order Fourier series in angle."""
    size = min(h, w)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    a, b = rng.uniform(0.08, 0.26, size=2) * size
    rot = rng.uniform(0, np.pi)
    orders = np.arange(2, 6)
    amps = rng.uniform(-0.12, 0.12, size=orders.size)
    phases = rng.uniform(0, 2 * np.pi, size=orders.size)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - cx, yy - cy
    u = (np.cos(rot) * dx + np.sin(rot) * dy) / a
    v = (-np.sin(rot) * dx + np.cos(rot) * dy) / b
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    radius = 1.0 + (amps[:, None, None] * np.cos(orders[:, None, None] * theta + phases[:, None, None])).sum(0)
    return rho <= radius


def _texture(rng: np.random.Generator, h: int, w: int, freq: float, width: float) -> np.ndarray:
    """Unit-variance noise band-limited around radial frequency ``freq`` (cycles/pixel)."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radial = np.hypot(fy, fx)
    band = np.exp(-0.5 * ((radial - freq) / width) ** 2)
    band[0, 0] = 0.0
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    std = tex.std()
    return tex / std if std > 0 else tex


def _sample(seed: int, idx: int, h: int, w: int, difficulty: float, split: str) -> SegSample:
    rng = np.random.default_rng([seed, idx])
    for _ in range(1000):
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            mask |= _blob(rng, h, w)
        if MIN_FG <= mask.mean() <= MAX_FG:
            break
    else:  # pragma: no cover - rejection sampling essentially never exhausts
        raise RuntimeError(f"could not draw a valid mask for id {idx}")

    d = float(np.clip(difficulty, 0.0, 1.0))
    gap = 0.6 - 0.45 * d
    amp = 0.04 + 0.12 * d
    sign = rng.choice([-1.0, 1.0])
    lo = 0.15 + (gap if sign < 0 else 0.0)
    hi = 0.85 - (gap if sign > 0 else 0.0)
    bg_level = rng.uniform(lo, hi)
    fg_level = bg_level + sign * gap
    tint_bg = rng.uniform(-0.05, 0.05, size=3)
    tint_fg = rng.uniform(-0.05, 0.05, size=3)

    # textures drift toward a shared band as difficulty rises
    f_bg = rng.uniform(0.20, 0.30)
    f_fg = (1 - d) * rng.uniform(0.04, 0.08) + d * f_bg
    tex_bg = _texture(rng, h, w, f_bg, 0.04)
    tex_fg = _texture(rng, h, w, f_fg, 0.03)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    shade_dir = rng.uniform(0, 2 * np.pi)
    shade = 0.12 * d * (np.cos(shade_dir) * (xx - 0.5) + np.sin(shade_dir) * (yy - 0.5))

    img = np.empty((3, h, w))
    for c in range(3):
        bg = bg_level + tint_bg[c] + amp * tex_bg
        fg = fg_level + tint_fg[c] + amp * tex_fg
        img[c] = np.where(mask, fg, bg) + shade
    return SegSample(
        image=np.clip(img, 0.0, 1.0),
        mask=mask.astype(np.float64)[None],
        id=idx,
        split=split,
    )


def generate(seed: int, count: int, h: int = 64, w: int = 64, difficulty: float = 0.5, split: str = "train", start_id: int = 0) -> list[SegSample]:
    if h < 32 or w < 32:
        raise ContractError("images must be at least 32 x 32")
    return [_sample(seed, start_id + i, h, w, difficulty, split) for i in range(count)]


def make_benchmark(seed: int, n_train: int = 200, n_val: int = 60, size: int = 64, difficulty: float = 0.5) -> Benchmark:
    train = generate(seed, n_train, size, size, difficulty, "train", 0)
    val = generate(seed, n_val, size, size, difficulty, "val", n_train)
    meta = dict(seed=seed, n_train=n_train, n_val=n_val, size=size, difficulty=difficulty)
    return Benchmark(train, val, meta)


def subset(samples: list[SegSample], fraction: float, seed: int) -> list[SegSample]:
    """Seeded random subset of ``round(fraction * n)`` samples (at least one)."""
    if not 0 < fraction <= 1:
        raise ContractError("fraction must be in (0, 1]")
    n = len(samples)
    k = max(1, int(math.floor(fraction * n + 0.5)))
    if k >= n:
        return list(samples)
    order = np.random.default_rng([seed, 7919]).permutation(n)[:k]
    return [samples[i] for i in sorted(order)]


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric edge padding, radius ceil(3 sigma)."""
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    r = k.size // 2
    out = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)], mode="symmetric")
    h, w = img.shape[-2:]
    out = sum(k[i] * out[..., i : i + h, :] for i in range(k.size))
    out = sum(k[i] * out[..., :, i : i + w] for i in range(k.size))
    return out


def corrupt(sample: SegSample, kind: str, magnitude: float, seed: int = 0) -> SegSample:
    """Return a corrupted copy; the mask is shared untouched."""
    if kind not in CORRUPTIONS:
        raise ContractError(f"unknown corruption {kind!r}; expected one of {sorted(CORRUPTIONS)}")
    lo, hi, _ = CORRUPTIONS[kind]
    if not lo <= magnitude <= hi:
        raise ContractError(f"{kind} magnitude {magnitude} outside [{lo}, {hi}]")
    x = sample.image
    if kind == "brightness":
        out = np.clip(x + magnitude, 0.0, 1.0)
    elif kind == "contrast":
        m = x.mean()
        out = np.clip((x - m) * magnitude + m, 0.0, 1.0)
    elif kind == "blur":
        out = np.clip(gaussian_blur(x, magnitude), 0.0, 1.0)
    else:
        rng = np.random.default_rng([seed, sample.id, 104729])
        out = np.clip(x + rng.normal(0.0, magnitude, size=x.shape), 0.0, 1.0) if magnitude > 0 else x.copy()
    return replace(sample, image=out, corruption=(kind, float(magnitude)))


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def _write_raw(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_raw(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)


def export_dataset(samples: list[SegSample], directory, meta: dict | None = None) -> Path:
    """Write raw little-endian f64 tensors plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        stem = f"{s.split}_{s.id:06d}"
        _write_raw(directory / f"{stem}_image.f64", s.image)
        _write_raw(directory / f"{stem}_mask.f64", s.mask)
        records.append(
            dict(
                id=s.id,
                split=s.split,
                image=f"{stem}_image.f64",
                mask=f"{stem}_mask.f64",
                image_shape=list(s.image.shape),
                mask_shape=list(s.mask.shape),
                corruption={"kind": s.corruption[0], "magnitude": s.corruption[1]},
            )
        )
    manifest = {"format": "spectraflow-dataset", "version": 1, "meta": meta or {}, "samples": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def import_dataset(directory) -> tuple[list[SegSample], dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != "spectraflow-dataset":
            raise DatasetError(f"{directory} does not hold an exported dataset")
        samples = []
        for r in manifest["samples"]:
            samples.append(
                SegSample(
                    image=_read_raw(directory / r["image"], r["image_shape"]),
                    mask=_read_raw(directory / r["mask"], r["mask_shape"]),
                    id=r["id"],
                    split=r["split"],
                    corruption=(r["corruption"]["kind"], r["corruption"]["magnitude"]),
                )
            )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"malformed dataset in {directory}: {exc}") from exc
    return samples, manifest.get("meta", {})
