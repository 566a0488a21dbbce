"""Dispersive regularizers: contrastive repulsion without positive pairs.

All losses take a ``B x d`` batch of pooled features (array or :class:`Var`)
and return a scalar :class:`Var`, so they plug straight into the Stage-1
objective. Pairwise terms use squared Euclidean distance unless noted.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var

DEFAULT_TAU = 0.5
DEFAULT_EPS = 1e-8
VARIANTS = ("l2", "cosine", "hinge", "covariance")


def _check_batch(h: Var, tau: float | None = None) -> tuple[int, int]:
    if h.ndim != 2:
        raise ContractError(f"features must be B x d, got shape {h.shape}")
    b, d = h.shape
    if b < 2:
        raise ContractError("dispersive losses need at least two samples")
    if tau is not None and tau <= 0:
        raise ContractError("temperature must be positive")
    return b, d


def pairwise_sq_dists(h) -> Var:
    """``B x B`` squared distances, built from differences (no cancellation)."""
    h = ad.as_var(h)
    b, d = h.shape
    diff = ad.sub(ad.reshape(h, (b, 1, d)), ad.reshape(h, (1, b, d)))
    return ad.sum_(ad.square(diff), axis=-1)


def cosine_dissim(h) -> Var:
    h = ad.as_var(h)
    norms = np.linalg.norm(h.value, axis=1)
    if np.any(norms == 0):
        raise ContractError("cosine dissimilarity is undefined for zero-norm rows")
    n = ad.sqrt(ad.sum_(ad.square(h), axis=1, keepdims=True))
    u = ad.div(h, n)
    return ad.sub(1.0, ad.matmul(u, ad.transpose(u, (1, 0))))


def _offdiag(mat: Var) -> Var:
    b = mat.shape[0]
    rows, cols = np.nonzero(~np.eye(b, dtype=bool))
    return ad.getitem(mat, (rows, cols))


def _log_mean_exp_plus_eps(logits: Var, eps: float) -> Var:
    """``log(mean(exp(logits)) + eps)`` evaluated stably."""
    n = logits.shape[0]
    shifted = ad.sub(logits, np.log(n))
    if eps > 0:
        shifted = ad.concat([shifted, Var(np.array([np.log(eps)]))], axis=0)
    return ad.logsumexp(shifted, axis=0)


def disp_l2(h, tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS) -> Var:
    """log of the mean over ordered pairs i != j of exp(-||h_i - h_j||^2 / tau), plus eps."""
    h = ad.as_var(h)
    _check_batch(h, tau)
    d2 = _offdiag(pairwise_sq_dists(h))
    return _log_mean_exp_plus_eps(ad.mul(d2, -1.0 / tau), eps)


def disp_cosine(h, tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS) -> Var:
    h = ad.as_var(h)
    _check_batch(h, tau)
    dis = _offdiag(cosine_dissim(h))
    return _log_mean_exp_plus_eps(ad.mul(dis, -1.0 / tau), eps)


def disp_hinge(h, margin: float = 1.0) -> Var:
    """Mean over ordered pairs of max(0, margin - ||h_i - h_j||^2)^2."""
    if margin <= 0:
        raise ContractError("hinge margin must be positive")
    h = ad.as_var(h)
    _check_batch(h)
    d2 = _offdiag(pairwise_sq_dists(h))
    return ad.mean(ad.square(ad.relu(ad.sub(margin, d2))))


def disp_covariance(h) -> Var:
    """Squared Frobenius norm of the off-diagonal of the batch covariance."""
    h = ad.as_var(h)
    b, d = _check_batch(h)
    centered = ad.sub(h, ad.mean(h, axis=0, keepdims=True))
    cov = ad.mul(ad.matmul(ad.transpose(centered, (1, 0)), centered), 1.0 / (b - 1))
    off = ad.mul(cov, 1.0 - np.eye(d))
    return ad.sum_(ad.square(off))


def disp_lse(h, tau: float = DEFAULT_TAU) -> Var:
    """Anchor-averaged log-sum-exp repulsion, j running over the whole batch (self included)."""
    h = ad.as_var(h)
    _check_batch(h, tau)
    return ad.mean(ad.logsumexp(ad.mul(pairwise_sq_dists(h), -1.0 / tau), axis=1))


def dispersive(h, variant: str = "l2", tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS, margin: float = 1.0) -> Var:
    if variant == "l2":
        return disp_l2(h, tau, eps)
    if variant == "cosine":
        return disp_cosine(h, tau, eps)
    if variant == "hinge":
        return disp_hinge(h, margin)
    if variant == "covariance":
        return disp_covariance(h)
    raise ContractError(f"unknown dispersive variant {variant!r}; expected one of {VARIANTS}")


def info_nce(h, positives, tau: float = DEFAULT_TAU) -> Var:
    """InfoNCE with squared-distance logits; the denominator pools all B batch items."""
    h, positives = ad.as_var(h), ad.as_var(positives)
    _check_batch(h, tau)
    if positives.shape != h.shape:
        raise ContractError(f"positives shape {positives.shape} != features shape {h.shape}")
    pos = ad.sum_(ad.square(ad.sub(h, positives)), axis=1)
    lse = ad.logsumexp(ad.mul(pairwise_sq_dists(h), -1.0 / tau), axis=1)
    # -log(exp(-pos/tau) / sum_j exp(-D_ij/tau))
    return ad.mean(ad.add(ad.mul(pos, 1.0 / tau), lse))


def info_nce_direct(h, positives, tau: float = DEFAULT_TAU) -> float:
    """Literal ratio form of InfoNCE, kept as an evaluation oracle."""
    h = np.asarray(h, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    total = 0.0
    for i in range(h.shape[0]):
        num = np.exp(-np.sum((h[i] - positives[i]) ** 2) / tau)
        den = sum(np.exp(-np.sum((h[i] - h[j]) ** 2) / tau) for j in range(h.shape[0]))
        total += -np.log(num / den)
    return total / h.shape[0]


# ---------------------------------------------------------------------------
# Closed-form gradients
# ---------------------------------------------------------------------------


def softmax_weights(h, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Per-anchor weights w_ij = softmax_j(-D_ij / tau), j over the whole batch."""
    h = np.asarray(h, dtype=np.float64)
    logits = -((h[:, None, :] - h[None, :, :]) ** 2).sum(-1) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def anchor_grad(h, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Gradient of each anchor's own log-sum-exp term w.r.t. that anchor.

    Row i is d/dh_i log sum_j exp(-||h_i - h_j||^2 / tau) with the other rows
    held fixed, i.e. -(2/tau) sum_j w_ij (h_i - h_j). Its negation is the
    repulsive step: nearer neighbours carry larger w_ij and push harder.
    """
    h = np.asarray(h, dtype=np.float64)
    w = softmax_weights(h, tau)
    diff = h[:, None, :] - h[None, :, :]
    return -(2.0 / tau) * np.einsum("ij,ijd->id", w, diff)


def disp_lse_grad_analytic(h, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Full gradient of :func:`disp_lse`; each anchor also appears in the others' sums."""
    h = np.asarray(h, dtype=np.float64)
    b = h.shape[0]
    w = softmax_weights(h, tau)
    diff = h[:, None, :] - h[None, :, :]
    return -(2.0 / (b * tau)) * np.einsum("ij,ijd->id", w + w.T, diff)


def disp_l2_grad_analytic(h, tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Closed-form gradient of :func:`disp_l2`.

    Same weighted-repulsion shape as the per-anchor form, but the weights are
    normalized over all ordered pairs (plus the eps mass) because the loss
    takes one log of the pair-averaged kernel:
    grad_i = -(4/tau) sum_{j != i} W_ij (h_i - h_j).
    """
    h = np.asarray(h, dtype=np.float64)
    b = h.shape[0]
    if b < 2:
        raise ContractError("need at least two samples")
    diff = h[:, None, :] - h[None, :, :]
    logits = -(diff**2).sum(-1) / tau
    np.fill_diagonal(logits, -np.inf)
    n_pairs = b * (b - 1)
    # weights W_ij = e_ij / (sum e + n_pairs * eps), shifted for stability
    m = logits[np.isfinite(logits)].max()
    e = np.exp(logits - m)
    denom = e.sum() + n_pairs * eps * np.exp(-m)
    w = e / denom
    return -(4.0 / tau) * np.einsum("ij,ijd->id", w, diff)


def mean_pairwise_distance(h) -> float:
    """Mean Euclidean distance over unordered pairs (collapse statistic)."""
    h = np.asarray(h, dtype=np.float64)
    b = h.shape[0]
    d = np.sqrt(((h[:, None, :] - h[None, :, :]) ** 2).sum(-1))
    return float(d[np.triu_indices(b, 1)].mean())


def mean_pairwise_sq_distance(h) -> float:
    h = np.asarray(h, dtype=np.float64)
    b = h.shape[0]
    d2 = ((h[:, None, :] - h[None, :, :]) ** 2).sum(-1)
    return float(d2[np.triu_indices(b, 1)].mean())


def stage1_loss(mf, disp, lam: float):
    """MeanFlow loss plus lam times the dispersive term."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return ad.add(mf, ad.mul(disp, lam))
