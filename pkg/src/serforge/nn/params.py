"""Parameter containers for the hand-rolled neural layers.

A :class:`Parameter` pairs a value array with a same-shaped gradient buffer.
A :class:`ParameterSet` is an insertion-ordered, uniquely named collection of
parameters; it is the unit that gets checkpointed, averaged and loaded back.
Batchnorm running statistics travel as non-trainable parameters so that
checkpoint files always contain everything needed to run the model in eval
mode.
"""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np


class Parameter:
    """A named tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value: np.ndarray, name: str = "", trainable: bool = True):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:  # pragma: no cover - debугging aid
        kind = "param" if self.trainable else "buffer"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"


class ParameterSet:
    """Ordered mapping name -> Parameter with unique names.

    Iteration order is the insertion order, which is deterministic because
    models register their parameters in a fixed walk of their layers.
    """

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> None:
        if not param.name:
            raise ValueError("parameter must be named before joining a ParameterSet")
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self._params.items())

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def zero_grads(self) -> None:
        for p in self:
            p.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        """Snapshot of every value array (deep copies)."""
        return {name: p.value.copy() for name, p in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from a name -> array mapping."""
        for name, p in self.items():
            if name not in values:
                raise KeyError(f"missing value for parameter {name!r}")
            src = np.asarray(values[name])
            if src.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: expected {p.value.shape}, got {src.shape}"
                )
            p.value[...] = src.astype(p.value.dtype)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """He-uniform initialization: U(-limit, limit) with limit = sqrt(6 / fan_in)."""
    limit = np.sqrt(6.0 / float(fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
