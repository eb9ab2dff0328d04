"""Parameter registry and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .nn import Module
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class _Entry:
    tensor: Tensor
    group: str
    state: AdamState = field(default_factory=AdamState)


class ParamRegistry:
    """Named parameters in insertion order, each tagged with an lr group.

    Registering the same tensor twice (under any name) is rejected, which is
    what guarantees that weight-shared paths really share one tensor.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self._ids: set[int] = set()

    def add(self, name: str, tensor: Tensor, group: str = "default") -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if id(tensor) in self._ids:
            raise ValueError(f"tensor registered twice (as {name!r})")
        if not tensor.requires_grad:
            raise ValueError(f"{name!r} does not require grad")
        self._entries[name] = _Entry(tensor, group)
        self._ids.add(id(tensor))

    def add_module(self, prefix: str, module: Module, group: str = "default") -> None:
        for name, p in module.named_parameters(prefix + "."):
            self.add(name, p, group)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, e.tensor) for k, e in self._entries.items())

    def group_of(self, name: str) -> str:
        return self._entries[name].group

    def state_of(self, name: str) -> AdamState:
        return self._entries[name].state

    def holds(self, tensor: Tensor) -> bool:
        return id(tensor) in self._ids

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for k, e in self._entries.items():
            if k.startswith(prefix) and e.tensor.grad is not None:
                total += float((e.tensor.grad**2).sum())
        return float(np.sqrt(total))


def adam_step(
    reg: ParamRegistry,
    lr: float | Mapping[str, float],
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter, then zero grads.

    ``lr`` is either a single rate or a mapping from group name to rate.
    Parameters without a gradient are skipped (their moments are untouched).
    """
    for name, e in reg._entries.items():
        p = e.tensor
        g = p.grad
        if g is None:
            continue
        rate = lr if isinstance(lr, (int, float)) else lr[e.group]
        st = e.state
        if st.m is None:
            st.m = np.zeros_like(p.data)
            st.v = np.zeros_like(p.data)
        st.step += 1
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        mhat = st.m / (1.0 - beta1**st.step)
        vhat = st.v / (1.0 - beta2**st.step)
        p.data -= rate * mhat / (np.sqrt(vhat) + eps)
        p.grad = None
