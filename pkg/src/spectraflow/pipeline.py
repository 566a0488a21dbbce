"""Two-stage training, evaluation and the ablation runner."""

from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import dispersive as dsp
from .autodiff import Var
from .config import Config
from .meanflow import MeanFlow, ema_update, normalize_latent, meanflow_loss, meanflow_target, mixed_epoch, perturb, sample_times
from .models import ENCODER_WIDTHS, PENULTIMATE, SKIP_BLOCK, Decoder, Encoder, SegModel, pooled_features
from .nn import IncompatibleStateError
from .optim import AdamW, AdamWHyper, EarlyStopping, PlateauScheduler, linear_lr
from .seg import SampleMetrics, aggregate, evaluate_pair, region_metrics, stage2_loss
from .synth import SEVERITIES, Benchmark, SegSample, corrupt, make_benchmark, subset

log = logging.getLogger(__name__)

# stream identifiers for seeded generators: default_rng([seed, PURPOSE, ...])
PURPOSE = {"encoder": 11, "head": 12, "decoder": 13, "stage1-batch": 21, "stage1-noise": 22, "stage2-order": 31}
FREEZE_START = {"full": 1, "last-block": 4, "frozen": 5}
EVAL_BATCH = 20


def rng_for(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, PURPOSE[purpose], *extra])


class DivergenceError(RuntimeError):
    """Non-finite loss; carries enough to replay the offending batch."""

    def __init__(self, stage: str, epoch: int, step: int, batch_seed: list[int]):
        self.stage, self.epoch, self.step, self.batch_seed = stage, epoch, step, batch_seed
        super().__init__(f"{stage}: non-finite loss at epoch {epoch} step {step} (batch seed {batch_seed})")


def thread_scope(deterministic: bool):
    """Single-threaded BLAS in deterministic mode, else honour SPECTRAFLOW_THREADS."""
    if deterministic:
        return threadpool_limits(1)
    cap = os.environ.get("SPECTRAFLOW_THREADS")
    return threadpool_limits(int(cap)) if cap else contextlib.nullcontext()


@dataclass
class Normalizer:
    mean: np.ndarray  # per channel
    std: np.ndarray

    @classmethod
    def fit(cls, images) -> "Normalizer":
        x = np.stack(images)
        return cls(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)) + 1e-8)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def state(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.mean.copy(), "norm.std": self.std.copy()}

    @classmethod
    def from_state(cls, state) -> "Normalizer":
        return cls(np.array(state["norm.mean"]), np.array(state["norm.std"]))


def _stack(samples: list[SegSample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def _check_finite(loss: Var, stage: str, epoch: int, step: int, seed: list[int]) -> None:
    if not np.isfinite(loss.value):
        raise DivergenceError(stage, epoch, step, seed)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass
class Stage1Result:
    encoder: Encoder
    flow: MeanFlow
    norm: Normalizer
    history: list[dict] = field(default_factory=list)

    @property
    def dispersion(self) -> float:
        return self.history[-1]["dispersion"] if self.history else float("nan")

    def state(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update(self.flow.state_dict())
        out.update(self.norm.state())
        return out


def dispersion(encoder: Encoder, images: np.ndarray) -> float:
    """Mean pairwise distance of pooled penultimate features over a probe set."""
    feats = np.concatenate([pooled_features(encoder, images[sl]) for sl in _batches(len(images), EVAL_BATCH)])
    return dsp.mean_pairwise_distance(feats)


def stage1_step(encoder: Encoder, flow: MeanFlow, x: np.ndarray, rng: np.random.Generator, cfg) -> tuple[Var, dict]:
    """Stage-1 objective for one normalized batch; no mask target anywhere."""
    feats = encoder(x)
    z0 = normalize_latent(feats[-1])
    pooled = ad.global_avg_pool(feats[PENULTIMATE - 1])
    t, s = sample_times(rng, x.shape[0], cfg.p_eq)
    state = perturb(z0, t, rng, s)
    target = meanflow_target(state, flow.ema)
    mf = meanflow_loss(flow.head, state, target)
    parts = {"mf": float(mf.value)}
    if cfg.lam > 0:
        disp = dsp.dispersive(pooled, cfg.disp_variant, tau=cfg.tau, eps=cfg.eps_num, margin=cfg.hinge_margin)
        parts["disp"] = float(disp.value)
        loss = dsp.stage1_loss(mf, disp, cfg.lam)
    else:
        loss = mf
    return loss, parts


def pretrain_stage1(cfg: Config, bench: Benchmark, seed: int, mask_samples: list[SegSample] | None = None) -> Stage1Result:
    """MeanFlow + dispersive pretraining of a fresh encoder.

    Images come from the whole training split; masks from ``mask_samples``
    (default: the whole training split).
    """
    c = cfg.stage1
    images = [s.image for s in bench.train]
    masks = [s.mask for s in (bench.train if mask_samples is None else mask_samples)]
    norm = Normalizer.fit(images)
    encoder = Encoder(rng_for(seed, "encoder"))
    flow = MeanFlow(rng_for(seed, "head"), ENCODER_WIDTHS[-1])
    params = encoder.parameters() + flow.head.parameters()
    opt = AdamW(params, AdamWHyper(lr=c.lr, weight_decay=c.weight_decay), clip_norm=c.clip_norm)
    probe = norm(_stack(bench.val, "image"))
    n_batches = math.ceil(len(images) / c.batch_size)
    total = c.epochs * n_batches
    result = Stage1Result(encoder, flow, norm)
    step = 0
    for epoch in range(c.epochs):
        sums = {"loss": 0.0, "mf": 0.0, "disp": 0.0}
        batches = mixed_epoch(images, masks, c.batch_size, c.mask_ratio, n_batches, rng_for(seed, "stage1-batch", epoch))
        for b, batch in enumerate(batches):
            batch_seed = [seed, PURPOSE["stage1-noise"], epoch, b]
            opt.lr = linear_lr(c.lr, c.lr_final, step, total)
            loss, parts = stage1_step(encoder, flow, norm(batch.inputs), np.random.default_rng(batch_seed), c)
            _check_finite(loss, "stage1", epoch, b, batch_seed)
            opt.step(ad.grad(loss, params))
            ema_update(flow.head, flow.ema, c.ema_decay)
            sums["loss"] += float(loss.value)
            for k, v in parts.items():
                sums[k] += v
            step += 1
        entry = {k: v / n_batches for k, v in sums.items()}
        entry.update(epoch=epoch + 1, lr=opt.lr, dispersion=dispersion(encoder, probe))
        result.history.append(entry)
        log.info("stage1 seed=%d epoch=%d loss=%.4f dispersion=%.4f", seed, epoch + 1, entry["loss"], entry["dispersion"])
    if not result.history:
        result.history.append({"epoch": 0, "dispersion": dispersion(encoder, probe)})
    return result


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def build_model(seed: int, fusion: str = "daf", block: str = "fdconv", encoder_state: dict | None = None) -> SegModel:
    """Fresh model; the encoder starts from ``encoder_state`` when given."""
    encoder = Encoder(rng_for(seed, "encoder"))
    if encoder_state is not None:
        encoder.load_state_dict(encoder_state)
    decoder = Decoder(rng_for(seed, "decoder"), fusion=fusion, block=block)
    return SegModel(encoder, decoder)


def model_from_state(state: dict[str, np.ndarray]) -> SegModel:
    """Rebuild a segmentation model, inferring the decoder arms from tensor names."""
    fusion = "daf" if any(k.startswith("decoder.daf.") for k in state) else "concat"
    block = "fdconv" if any(k.startswith("decoder.refine.fdconv.") for k in state) else "standard"
    model = build_model(0, fusion, block)
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("norm.")})
    return model


class FeatureCache:
    """Inputs to the first trainable encoder block plus the skip, for frozen prefixes."""

    def __init__(self, model: SegModel, x: np.ndarray, start: int):
        self.start = start
        if start == 1:
            self.inputs, self.skip = x, None
            return
        with ad.no_grad():
            feats = model.encoder(x, upto=start - 1)
        self.inputs = feats[-1].value
        self.skip = feats[SKIP_BLOCK - 1].value if start > SKIP_BLOCK else None

    def forward(self, model: SegModel, idx) -> Var:
        skip = None if self.skip is None else Var(self.skip[idx])
        if self.start > len(model.encoder.blocks):
            return model.decoder(Var(self.inputs[idx]), skip)
        return model.forward_from(Var(self.inputs[idx]), self.start, skip)


def predict(model: SegModel, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([model(x[sl]).value for sl in _batches(len(x), EVAL_BATCH)])


def _cached_predict(model: SegModel, cache: FeatureCache) -> np.ndarray:
    n = len(cache.inputs)
    with ad.no_grad():
        return np.concatenate([cache.forward(model, sl).value for sl in _batches(n, EVAL_BATCH)])


def evaluate(model: SegModel, samples: list[SegSample], norm: Normalizer, threshold: float = 0.5) -> list[SampleMetrics]:
    probs = predict(model, norm(_stack(samples, "image")))
    return [evaluate_pair(s.id, p[0], s.mask[0], threshold) for s, p in zip(samples, probs)]


def trainable_params(model: SegModel, freeze_mode: str) -> list[Var]:
    start = FREEZE_START[freeze_mode]
    params = []
    for i in range(start, len(model.encoder.blocks) + 1):
        params += model.encoder.block_params(i)
    return params + model.decoder.parameters()


@dataclass
class Stage2Result:
    model: SegModel
    norm: Normalizer
    best_epoch: int
    best_val_dice: float
    history: list[dict]
    records: list[SampleMetrics]

    @property
    def metrics(self) -> dict[str, float]:
        return aggregate(self.records)

    def state(self) -> dict[str, np.ndarray]:
        out = self.model.state_dict()
        out.update(self.norm.state())
        return out


def finetune_stage2(cfg: Config, bench: Benchmark, seed: int, init: dict | None = None, train_samples: list[SegSample] | None = None) -> Stage2Result:
    """Train the segmentation model with early stopping on validation Dice.

    ``init`` may be a Stage-1 state (``encoder.*`` tensors) or a bare encoder
    state; mismatching shapes raise :class:`IncompatibleStateError`.
    """
    c = cfg.stage2
    train = bench.train if train_samples is None else train_samples
    norm = Normalizer.fit([s.image for s in bench.train])
    enc_state = None
    if init is not None:
        enc_state = {k[len("encoder.") :]: v for k, v in init.items() if k.startswith("encoder.")} or dict(init)
    model = build_model(seed, c.fusion, c.block, enc_state)
    start = FREEZE_START[c.freeze_mode]
    params = trainable_params(model, c.freeze_mode)
    opt = AdamW(params, AdamWHyper(lr=c.lr, weight_decay=c.weight_decay), clip_norm=c.clip_norm)
    plateau = PlateauScheduler(factor=c.lr_factor, patience=c.lr_patience, min_lr=c.min_lr)
    stopper = EarlyStopping(patience=c.patience)

    x_train = norm(_stack(train, "image"))
    y_train = _stack(train, "mask")
    train_cache = FeatureCache(model, x_train, start)
    val_cache = FeatureCache(model, norm(_stack(bench.val, "image")), start)
    y_val = _stack(bench.val, "mask")
    history = []
    for epoch in range(c.epochs):
        order = rng_for(seed, "stage2-order", epoch).permutation(len(train))
        total = 0.0
        for sl in _batches(len(train), c.batch_size):
            idx = order[sl]
            pred = train_cache.forward(model, idx)
            loss = stage2_loss(pred, y_train[idx], beta=c.beta, smooth=c.smooth)
            _check_finite(loss, "stage2", epoch, sl.start // c.batch_size, [seed, PURPOSE["stage2-order"], epoch])
            opt.step(ad.grad(loss, params))
            total += float(loss.value) * len(idx)
        probs = _cached_predict(model, val_cache)
        val_dice = float(np.mean([region_metrics(p, g)["dice"] for p, g in zip(probs, y_val)]))
        history.append({"epoch": epoch + 1, "loss": total / len(train), "val_dice": val_dice, "lr": opt.lr})
        log.info("stage2 seed=%d epoch=%d loss=%.4f val_dice=%.4f", seed, epoch + 1, total / len(train), val_dice)
        stop = stopper.update(val_dice, epoch + 1, model.state_dict)
        opt.lr = plateau.step(val_dice, opt.lr)
        if stop:
            break
    if stopper.snapshot:
        model.load_state_dict(stopper.snapshot)
    records = evaluate(model, bench.val, norm)
    return Stage2Result(model, norm, stopper.best_epoch, stopper.best, history, records)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

SUITES = ("stage1-strategies", "decoder-arms", "lambda-sweep", "low-data", "corruption", "finetune-strategies")
CSV_COLUMNS = ("suite", "arm", "setting", "seed", "dice", "miou", "precision", "recall", "hd95", "dispersion")

STAGE1_ARMS = {
    # arm: (pretrain?, mask ratio from config?, dispersive on?)
    "none": (False, False, False),
    "meanflow-image-only": (True, False, False),
    "meanflow-mixed": (True, True, False),
    "meanflow-mixed+disp": (True, True, True),
}
DECODER_ARMS = {
    "concat+standard": ("concat", "standard"),
    "concat+fdconv": ("concat", "fdconv"),
    "daf+standard": ("daf", "standard"),
    "daf+fdconv": ("daf", "fdconv"),
}


def _s1_key(c) -> tuple:
    return tuple(sorted(asdict(c).items()))


class Runner:
    """Runs arms with memoisation, so suites sharing a configuration train it once."""

    def __init__(self, cfg: Config, bench: Benchmark | None = None):
        self.cfg = cfg
        d = cfg.data
        self.bench = bench or make_benchmark(d.seed, d.n_train, d.n_val, d.image_size, d.difficulty)
        self._stage1: dict = {}
        self._stage2: dict = {}

    def stage1_config(self, arm: str, lam: float | None = None):
        pre, mixed, disp = STAGE1_ARMS[arm]
        c = self.cfg.stage1
        changes = {"mask_ratio": c.mask_ratio if mixed else 0.0, "lam": (c.lam if lam is None else lam) if disp else 0.0}
        return self.cfg.replace(stage1=changes).stage1 if pre else None

    def stage1(self, s1cfg, seed: int, fraction: float = 1.0) -> Stage1Result:
        masks = subset(self.bench.train, fraction, seed) if fraction < 1 else None
        # image-only runs never see masks, so the fraction is irrelevant there
        key = (_s1_key(s1cfg), seed, fraction if s1cfg.mask_ratio > 0 else 1.0)
        if key not in self._stage1:
            self._stage1[key] = pretrain_stage1(self.cfg.replace(stage1=asdict(s1cfg)), self.bench, seed, masks)
        return self._stage1[key]

    def stage2(self, s1cfg, seed: int, fraction: float = 1.0, **stage2_changes) -> tuple[Stage2Result, Stage1Result | None]:
        s2cfg = self.cfg.replace(stage2=stage2_changes)
        key = (None if s1cfg is None else _s1_key(s1cfg), seed, fraction, _s1_key(s2cfg.stage2))
        pre = None if s1cfg is None else self.stage1(s1cfg, seed, fraction)
        if key not in self._stage2:
            train = subset(self.bench.train, fraction, seed) if fraction < 1 else None
            init = None if pre is None else pre.state()
            self._stage2[key] = finetune_stage2(s2cfg, self.bench, seed, init, train)
        return self._stage2[key], pre

    def row(self, suite, arm, setting, seed, metrics: dict, pre: Stage1Result | None) -> dict:
        return {
            "suite": suite,
            "arm": arm,
            "setting": setting,
            "seed": seed,
            "dice": metrics["dice"],
            "miou": metrics["iou"],
            "precision": metrics["precision"],
            "recall": metrics["recall"],
            "hd95": metrics["hd95"],
            "dispersion": "" if pre is None else pre.dispersion,
        }

    def run(self, suite: str) -> list[dict]:
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
        rows = []
        with thread_scope(self.cfg.ablation.deterministic):
            for seed in self.cfg.ablation.seeds:
                rows += getattr(self, "_suite_" + suite.replace("-", "_"))(seed)
        return rows

    def _suite_stage1_strategies(self, seed):
        rows = []
        for arm in STAGE1_ARMS:
            res, pre = self.stage2(self.stage1_config(arm), seed)
            rows.append(self.row("stage1-strategies", arm, "", seed, res.metrics, pre))
        return rows

    def _suite_decoder_arms(self, seed):
        s1 = self.stage1_config("meanflow-mixed+disp")
        rows = []
        for arm, (fusion, block) in DECODER_ARMS.items():
            res, pre = self.stage2(s1, seed, fusion=fusion, block=block)
            rows.append(self.row("decoder-arms", arm, "", seed, res.metrics, pre))
        return rows

    def _suite_lambda_sweep(self, seed):
        rows = []
        for lam in self.cfg.ablation.lambdas:
            s1 = self.stage1_config("meanflow-mixed+disp", lam=lam) if lam > 0 else self.stage1_config("meanflow-mixed")
            res, pre = self.stage2(s1, seed)
            rows.append(self.row("lambda-sweep", f"lambda={lam:g}", f"{lam:g}", seed, res.metrics, pre))
        return rows

    def _suite_low_data(self, seed):
        rows = []
        for frac in self.cfg.ablation.fractions:
            for arm, s1 in (("pretrained", self.stage1_config("meanflow-mixed+disp")), ("scratch", None)):
                res, pre = self.stage2(s1, seed, frac)
                rows.append(self.row("low-data", arm, f"{frac:g}", seed, res.metrics, pre))
        return rows

    def _suite_corruption(self, seed):
        rows = []
        for arm, s1 in (("pretrained", self.stage1_config("meanflow-mixed+disp")), ("scratch", None)):
            res, pre = self.stage2(s1, seed)
            rows.append(self.row("corruption", arm, "clean", seed, res.metrics, pre))
            for kind, mags in SEVERITIES.items():
                for mag in mags:
                    samples = [corrupt(s, kind, mag, self.cfg.ablation.corruption_seed) for s in self.bench.val]
                    metrics = aggregate(evaluate(res.model, samples, res.norm))
                    rows.append(self.row("corruption", arm, f"{kind}:{mag:g}", seed, metrics, pre))
        return rows

    def _suite_finetune_strategies(self, seed):
        s1 = self.stage1_config("meanflow-mixed+disp")
        rows = []
        for mode in ("frozen", "full", "last-block"):
            res, pre = self.stage2(s1, seed, freeze_mode=mode)
            rows.append(self.row("finetune-strategies", mode, "", seed, res.metrics, pre))
        return rows


def run_ablation(suite: str, cfg: Config, runner: Runner | None = None) -> list[dict]:
    return (runner or Runner(cfg)).run(suite)


def format_csv(rows: list[dict]) -> str:
    """CSV text with a header row; floats use repr so reruns compare byte-for-byte."""
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        cells = []
        for col in CSV_COLUMNS:
            v = r[col]
            cells.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


__all__ = [
    "DivergenceError",
    "IncompatibleStateError",
    "Normalizer",
    "Runner",
    "Stage1Result",
    "Stage2Result",
    "build_model",
    "evaluate",
    "finetune_stage2",
    "format_csv",
    "model_from_state",
    "pretrain_stage1",
    "run_ablation",
]
