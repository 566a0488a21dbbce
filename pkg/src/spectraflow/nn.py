"""Minimal parameter containers on top of :mod:`autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class Module:
    """Holds named leaf Vars and child modules; names are dotted paths."""

    def __init__(self):
        self._params: dict[str, Var] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value) -> Var:
        v = Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = v
        return v

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Var]]:
        for name, v in self._params.items():
            yield prefix + name, v
        for cname, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Var]:
        return [v for _, v in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        problems = []
        for name, v in own.items():
            if name not in state:
                if strict:
                    problems.append(f"{name}: missing")
                continue
            if tuple(state[name].shape) != v.shape:
                problems.append(f"{name}: expected {v.shape}, got {tuple(state[name].shape)}")
        if strict:
            problems += [f"{k}: unexpected" for k in state if k not in own]
        if problems:
            raise IncompatibleStateError(problems)
        for name, v in own.items():
            if name in state:
                v.value = np.array(state[name], dtype=np.float64)


class IncompatibleStateError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("incompatible tensors: " + "; ".join(problems))


def kaiming(rng: np.random.Generator, shape, gain: float = 2.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


class Conv(Module):
    """Conv with bias; ``k=1`` gives a point-wise projection."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, zero: bool = False):
        super().__init__()
        self.k = k
        w = np.zeros((c_out, c_in, k, k)) if zero else kaiming(rng, (c_out, c_in, k, k))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(c_out))

    def __call__(self, x: Var) -> Var:
        y = ad.conv2d(x, self.w, padding=self.k // 2)
        return ad.add(y, ad.reshape(self.b, (1, -1, 1, 1)))
