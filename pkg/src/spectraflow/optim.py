"""AdamW, gradient clipping, plateau scheduling and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Var


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, hyper: AdamWHyper) -> list[np.ndarray]:
    """One decoupled-weight-decay Adam step. Moments are updated in ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("params, grads and moments differ in length")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ContractError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p = p - hyper.lr * hyper.weight_decay * p
        out.append(p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps))
    return out


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class AdamW:
    """Stateful wrapper that updates ``Var`` parameters in place."""

    def __init__(self, params: list[Var], hyper: AdamWHyper, clip_norm: float = 0.0):
        self.params = list(params)
        self.hyper = hyper
        self.clip_norm = clip_norm
        self.state = AdamState.zeros_like([p.value for p in self.params])

    @property
    def lr(self) -> float:
        return self.hyper.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.hyper.lr = value

    def step(self, grads: list[np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        new = adamw_step([p.value for p in self.params], grads, self.state, self.hyper)
        for p, value in zip(self.params, new):
            p.value = value
        return norm


def linear_lr(start: float, end: float, step: int, total: int) -> float:
    """Linear interpolation from ``start`` at step 0 to ``end`` at ``total - 1``."""
    if total <= 1:
        return start
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return start + (end - start) * frac


@dataclass
class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` validations without improvement."""

    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    best: float = -np.inf
    bad: int = 0

    def step(self, metric: float, lr: float) -> float:
        if metric > self.best:
            self.best, self.bad = metric, 0
            return lr
        self.bad += 1
        if self.bad > self.patience:
            self.bad = 0
            return max(lr * self.factor, self.min_lr)
        return lr


@dataclass
class EarlyStopping:
    """Track the best validation score and its snapshot; stop after ``patience`` misses."""

    patience: int = 8
    best: float = -np.inf
    best_epoch: int = -1
    bad: int = 0
    snapshot: dict = field(default_factory=dict, repr=False)

    def update(self, metric: float, epoch: int, snapshot_fn) -> bool:
        """Record ``metric``; returns True when training should stop."""
        if metric > self.best:
            self.best, self.best_epoch, self.bad = metric, epoch, 0
            self.snapshot = snapshot_fn()
            return False
        self.bad += 1
        return self.bad >= self.patience
