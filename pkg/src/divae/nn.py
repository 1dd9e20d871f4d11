"""Small dense layers built on the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

ACTIVATIONS = {
    "tanh": ad.tanh,
    "identity": lambda x: x,
}


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class MLP:
    """One or more affine layers with a shared hidden activation.

    ``sizes=(a, b, c)`` builds ``a -> b -> c``; the activation is applied
    after every layer except the last.
    """

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "tanh",
                 zero_last: bool = False):
        if len(sizes) < 2:
            raise ContractViolation("MLP needs at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}{i}."))
        return out
