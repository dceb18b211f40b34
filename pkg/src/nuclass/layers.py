"""Small neural building blocks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x W (+ b). Weights are fan-in scaled, bias starts at zero."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, name: str = "linear"):
        if zero_init:
            w0 = np.zeros((d_in, d_out))
        else:
            w0 = kaiming_uniform(rng, d_in, (d_in, d_out))
        self.w = ad.parameter(w0, name=f"{name}.w")
        self.b = ad.parameter(np.zeros(d_out), name=f"{name}.b") if bias else None
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.w": self.w}
        if self.b is not None:
            out[f"{self.name}.b"] = self.b
        return out


class MLP:
    """Stack of Linear layers with ReLU between (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, name: str = "mlp"):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, name=f"{name}.{i}")
            for i in range(len(dims) - 1)
        ]
        self.name = name

    def __call__(self, x: Tensor, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
                if dropout_rate > 0.0:
                    h = apply_dropout(h, dropout_rate, rng)
        return h

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def apply_dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (evaluation mode)."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(keep))
