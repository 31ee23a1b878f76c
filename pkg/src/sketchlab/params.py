"""Trainable parameters.

All model state is float32 (no mixed precision); gradients are accumulated
explicitly by each layer's backward method.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from sketchlab.errors import DimensionError


class Parameter:
    """A named float32 array with an accumulated gradient and a freeze flag.

    Frozen parameters never receive gradient (layers route accumulation through
    :meth:`accumulate`) and are skipped by optimizers and gradient checks.
    """

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, value, name: str = "", frozen: bool = False):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d.
        value = np.asarray(value, dtype=np.float32)
        self.value = value if value.flags.c_contiguous else np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = frozen

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, grad: np.ndarray) -> None:
        if self.frozen:
            return
        if grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match parameter "
                f"{self.name!r} shape {self.value.shape}"
            )
        self.grad += grad.astype(np.float32, copy=False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        state = " frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.value.shape}{state})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def trainable(params: Iterable[Parameter]) -> list[Parameter]:
    return [p for p in params if not p.frozen]
