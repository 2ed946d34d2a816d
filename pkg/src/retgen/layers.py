from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class Module:
    """Owns an ordered, uniquely named set of parameters."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, Parameter] = {}

    def param(self, name: str, value: np.ndarray) -> Parameter:
        full = f"{self.prefix}{name}"
        if full in self._params:
            raise ValueError(f"duplicate parameter id {full!r}")
        p = Parameter(value, full)
        self._params[full] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self._params.items())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .checkpoint import load_into

        load_into(self.parameters(), state)

    def freeze(self, frozen: bool = True) -> None:
        for p in self._params.values():
            p.requires_grad = not frozen


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def linear(x, w: Parameter, b: Parameter | None = None):
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)
