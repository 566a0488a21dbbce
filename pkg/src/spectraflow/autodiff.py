"""Reverse-mode gradients with forward-mode tangents riding along.

Every differentiable operation returns a :class:`Var`. A Var remembers its
parents and a vector-Jacobian closure when any parent requires a gradient, so
the recorded graph is the tape. Node ids increase monotonically, which makes
"sort reachable nodes by id" a valid topological order. The tape for a given
loss is rebuilt from scratch by :func:`backward` and discarded afterwards.

Forward mode is independent of the tape: if any operand carries a
``tangent``, the output tangent is computed eagerly with the op's JVP rule.
That is how :func:`jvp` gets exact directional derivatives without finite
differences.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

_ids = itertools.count()
_local = threading.local()


class ContractError(ValueError):
    """A documented precondition was violated."""


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording parents (tangents still propagate)."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Var:
    __slots__ = ("value", "requires_grad", "tangent", "parents", "vjp", "id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, tangent=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tangent = None if tangent is None else np.asarray(tangent, dtype=np.float64)
        self.parents: tuple[Var, ...] | None = None
        self.vjp: Callable | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.parents is None

    def __deepcopy__(self, memo):
        # a copy is a distinct node, so it needs its own id
        out = Var(self.value.copy(), self.requires_grad, self.name, self.tangent)
        memo[id(self)] = out
        return out

    def detach(self) -> "Var":
        return Var(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def detach(x) -> Var:
    """Stop-gradient: same value, no upstream gradient, no tangent."""
    return Var(as_var(x).value)


def _node(value, parents: Sequence[Var], vjp, jvp) -> Var:
    out = Var(value)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    if any(p.tangent is not None for p in parents):
        tans = [p.tangent if p.tangent is not None else np.zeros_like(p.value) for p in parents]
        out.tangent = np.asarray(jvp(*tans), dtype=np.float64)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = T.elementwise("add", a.value, b.value)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        lambda ta, tb: np.broadcast_to(ta + tb, out.shape),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = T.elementwise("sub", a.value, b.value)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        lambda ta, tb: np.broadcast_to(ta - tb, out.shape),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = T.elementwise("mul", av, bv)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        lambda ta, tb: ta * bv + av * tb,
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
        lambda ta, tb: ta / bv - out * tb / bv,
    )


def exp(x) -> Var:
    x = as_var(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), lambda t: t * out)


def log(x) -> Var:
    x = as_var(x)
    xv = x.value
    return _node(np.log(xv), (x,), lambda g: (g / xv,), lambda t: t / xv)


def sigmoid(x) -> Var:
    x = as_var(x)
    out = T.elementwise("sigmoid", x.value)
    d = out * (1.0 - out)
    return _node(out, (x,), lambda g: (g * d,), lambda t: t * d)


def relu(x) -> Var:
    x = as_var(x)
    mask = (x.value > 0).astype(np.float64)
    return _node(x.value * mask, (x,), lambda g: (g * mask,), lambda t: t * mask)


def abs_(x) -> Var:
    x = as_var(x)
    sgn = np.sign(x.value)
    return _node(np.abs(x.value), (x,), lambda g: (g * sgn,), lambda t: t * sgn)


def square(x) -> Var:
    x = as_var(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,), lambda t: 2.0 * xv * t)


def sqrt(x) -> Var:
    x = as_var(x)
    out = np.sqrt(x.value)
    return _node(out, (x,), lambda g: (0.5 * g / out,), lambda t: 0.5 * t / out)


def clip(x, lo: float, hi: float) -> Var:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping is active."""
    x = as_var(x)
    inside = ((x.value >= lo) & (x.value <= hi)).astype(np.float64)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), lambda t: t * inside)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(
        x.value.sum(axis=axis, keepdims=keepdims),
        (x,),
        vjp,
        lambda t: t.sum(axis=axis, keepdims=keepdims),
    )


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Var:
    x = as_var(x)
    old = x.shape
    return _node(
        x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), lambda t: t.reshape(shape)
    )


def transpose(x, axes) -> Var:
    x = as_var(x)
    inv = np.argsort(axes)
    return _node(
        x.value.transpose(axes),
        (x,),
        lambda g: (g.transpose(inv),),
        lambda t: t.transpose(axes),
    )


def broadcast_to(x, shape) -> Var:
    x = as_var(x)
    old = x.shape
    return _node(
        np.broadcast_to(x.value, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, old),),
        lambda t: np.broadcast_to(t, shape).copy(),
    )


def getitem(x, idx) -> Var:
    x = as_var(x)

    def vjp(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.value[idx], (x,), vjp, lambda t: t[idx])


def concat(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(
        np.concatenate([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        lambda *ts: np.concatenate(ts, axis=axis),
    )


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node(
        av @ bv,
        (a, b),
        lambda g: (
            _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape),
        ),
        lambda ta, tb: ta @ bv + av @ tb,
    )


def logsumexp(x, axis=-1, keepdims: bool = False) -> Var:
    x = as_var(x)
    xv = x.value
    m = xv.max(axis=axis, keepdims=True)
    s = np.exp(xv - m).sum(axis=axis, keepdims=True)
    lse_k = m + np.log(s)
    soft = np.exp(xv - lse_k)
    out = lse_k if keepdims else np.squeeze(lse_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out, (x,), vjp, lambda t: (soft * t).sum(axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------


def conv2d(x, w, padding: int = 0) -> Var:
    """Cross-correlation; ``w`` may be shared (rank 4) or per-sample (rank 5)."""
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    k = wv.shape[-1]
    per_sample = wv.ndim == 5
    unbatched = xv.ndim == 3
    xb = xv[None] if unbatched else xv
    T._check_conv(xb, wv, padding)
    out, cols = T.conv2d_with_cols(xb, wv, padding)
    if not (_grad_enabled() and w.requires_grad):
        cols = None

    def vjp(g):
        gb = g[None] if unbatched else g
        gx = gw = None
        if x.requires_grad:
            gx = T.conv2d_input_grad(gb, wv, padding)
            gx = gx[0] if unbatched else gx
        if w.requires_grad:
            gw = T.conv2d_kernel_grad(xb, gb, k, padding, per_sample=per_sample, cols=cols)
        return gx, gw

    return _node(
        out[0] if unbatched else out,
        (x, w),
        vjp,
        lambda tx, tw: T.conv2d(tx, wv, padding) + T.conv2d(xv, tw, padding),
    )


def global_avg_pool(x, keepdims: bool = False) -> Var:
    """Mean over the last two axes."""
    return mean(x, axis=(-2, -1), keepdims=keepdims)


def avg_pool2(x) -> Var:
    x = as_var(x)

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=-1), 2, axis=-2) * 0.25,)

    return _node(T.avg_pool2(x.value), (x,), vjp, T.avg_pool2)


def box_mean3(x) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    counts = T._box_counts(h, w)

    def vjp(g):
        # the zero-padded 3x3 box sum is self-adjoint
        scaled = g / counts
        pad = [(0, 0)] * (scaled.ndim - 2) + [(1, 1), (1, 1)]
        p = np.pad(scaled, pad)
        return (sum(p[..., i : i + h, j : j + w] for i in range(3) for j in range(3)),)

    return _node(T.box_mean3(x.value), (x,), vjp, T.box_mean3)


def resize_bilinear(x, out_h: int, out_w: int) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    uh = T.upsample_matrix(h, out_h)
    uw = T.upsample_matrix(w, out_w)
    return _node(
        uh @ x.value @ uw.T,
        (x,),
        lambda g: (uh.T @ g @ uw,),
        lambda t: uh @ t @ uw.T,
    )


def bilinear_upsample(x, factor: int) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    return resize_bilinear(x, h * factor, w * factor)


def dft2(re, im, inverse: bool = False) -> tuple[Var, Var]:
    """2-D DFT of ``re + i*im`` over the last two axes, as a (real, imag) Var pair.

    The inverse carries the ``1/(H*W)`` factor, matching :func:`tensor.ifft2`.
    """
    re, im = as_var(re), as_var(im)
    fwd, adj = (T.ifft2, T.fft2) if inverse else (T.fft2, T.ifft2)
    h, w = re.shape[-2:]
    # adjoint of the normalized inverse is fft/(HW); adjoint of fft is ifft*HW
    scale = 1.0 / (h * w) if inverse else float(h * w)
    yr, yi = fwd(re.value, im.value)

    def adjoint(g):
        ur, ui = adj(g)
        return ur * scale, ui * scale

    def vjp_re(g):
        ur, ui = adjoint(g)
        return ur, ui

    def vjp_im(g):
        ur, ui = adjoint(g)
        return -ui, ur

    out_re = _node(yr, (re, im), vjp_re, lambda tr, ti: fwd(tr, ti)[0])
    out_im = _node(yi, (re, im), vjp_im, lambda tr, ti: fwd(tr, ti)[1])
    return out_re, out_im


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def tape(loss: Var) -> list[Var]:
    """Recorded nodes reachable from ``loss`` in execution order."""
    seen: dict[int, Var] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        if node.parents:
            stack.extend(node.parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable requires-grad leaf, keyed by id."""
    if loss.value.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.parents is None:
            leaves[node.id] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return leaves


def grad(loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients w.r.t. ``wrt``; unreached or non-differentiable leaves get zeros."""
    got = backward(loss)
    return [np.array(got.get(v.id, np.zeros_like(v.value)), dtype=np.float64) for v in wrt]


def jvp(f: Callable, x, direction):
    """Directional derivative of ``f`` at ``x`` along ``direction`` (forward mode).

    ``x``/``direction`` may be single arrays or matching tuples of arrays.
    Returns the output tangent (a tuple if ``f`` returns a tuple).
    """
    single = not isinstance(x, (tuple, list))
    xs = (x,) if single else tuple(x)
    ds = (direction,) if single else tuple(direction)
    if len(xs) != len(ds):
        raise T.ShapeError("x and direction have different arity")
    args = []
    for xi, di in zip(xs, ds):
        xi = np.asarray(xi, dtype=np.float64)
        di = np.asarray(di, dtype=np.float64)
        if xi.shape != di.shape:
            raise T.ShapeError(f"direction shape {di.shape} != input shape {xi.shape}")
        args.append(Var(xi, tangent=di))
    with no_grad():
        out = f(*args)
    if isinstance(out, (tuple, list)):
        return tuple(_tangent_of(o) for o in out)
    return _tangent_of(out)


def _tangent_of(out) -> np.ndarray:
    out = as_var(out)
    return out.tangent if out.tangent is not None else np.zeros_like(out.value)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def rel_err(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return out


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray = field(repr=False)
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f: Callable[[Var], Var], x, tol: float = 1e-6, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    leaf = Var(x, requires_grad=True)
    (analytic,) = grad(as_var(f(leaf)), [leaf])

    def scalar(xx):
        with no_grad():
            return float(as_var(f(Var(xx))).value)

    numeric = numeric_grad(scalar, x, step)
    return GradCheckReport(analytic, numeric, rel_err(analytic, numeric), tol)
