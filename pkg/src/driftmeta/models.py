"""Forecasters with an explicit encoder / linear-head split.

The encoder output doubles as the sample-level embedding for task inference,
so everything before the final linear head counts as "encoder".
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Forecaster", "MLPForecaster", "RecurrentForecaster", "make_forecaster", "uniform_init"]


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, int], name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Forecaster:
    arch = "base"

    def __init__(self, d: int, q: int):
        self.d = d
        self.q = q
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def clone(self) -> "Forecaster":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _check(self, X) -> Tensor:
        X = ad.as_tensor(X)
        if X.shape[1] != self.d:
            raise ad.ShapeError(f"{self.arch} forecaster input (expects d={self.d})", X.shape)
        return X

    def encode(self, X) -> Tensor:
        raise NotImplementedError

    def head(self, E) -> Tensor:
        return ad.add(ad.matmul(E, self.params["head_w"]), self.params["head_b"])

    def predict(self, X) -> Tensor:
        return self.head(self.encode(X))

    def __repr__(self) -> str:
        n = sum(p.value.size for p in self.params.values())
        return f"{type(self).__name__}(d={self.d}, q={self.q}, params={n})"


class MLPForecaster(Forecaster):
    """d -> hidden -> q with tanh activations, then a linear head q -> 1."""

    arch = "mlp"

    def __init__(self, d: int, q: int = 32, hidden: int = 64, rng: np.random.Generator | None = None):
        super().__init__(d, q)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.params = {
            "w1": uniform_init(rng, d, (d, hidden), "w1"),
            "b1": uniform_init(rng, d, (1, hidden), "b1"),
            "w2": uniform_init(rng, hidden, (hidden, q), "w2"),
            "b2": uniform_init(rng, hidden, (1, q), "b2"),
            "head_w": uniform_init(rng, q, (q, 1), "head_w"),
            "head_b": uniform_init(rng, q, (1, 1), "head_b"),
        }

    def encode(self, X) -> Tensor:
        p = self.params
        X = self._check(X)
        h = ad.tanh(ad.add(ad.matmul(X, p["w1"]), p["b1"]))
        return ad.tanh(ad.add(ad.matmul(h, p["w2"]), p["b2"]))


class RecurrentForecaster(Forecaster):
    """Elman RNN over the feature vector read as ``steps`` equal time slices."""

    arch = "recurrent"

    def __init__(self, d: int, q: int = 32, steps: int = 6, rng: np.random.Generator | None = None):
        if d % steps:
            raise ValueError(f"feature dim {d} is not divisible into {steps} steps")
        super().__init__(d, q)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.steps = steps
        width = d // steps
        self.params = {
            "w_in": uniform_init(rng, width, (width, q), "w_in"),
            "w_rec": uniform_init(rng, q, (q, q), "w_rec"),
            "b": uniform_init(rng, q, (1, q), "b"),
            "head_w": uniform_init(rng, q, (q, 1), "head_w"),
            "head_b": uniform_init(rng, q, (1, 1), "head_b"),
        }

    def encode(self, X) -> Tensor:
        p = self.params
        X = self._check(X)
        width = self.d // self.steps
        h = None
        for t in range(self.steps):
            x_t = ad.slice_cols(X, t * width, (t + 1) * width)
            pre = ad.add(ad.matmul(x_t, p["w_in"]), p["b"])
            if h is not None:
                pre = ad.add(pre, ad.matmul(h, p["w_rec"]))
            h = ad.tanh(pre)
        return h


def make_forecaster(arch: str, d: int, q: int = 32, rng: np.random.Generator | None = None) -> Forecaster:
    if arch == "mlp":
        return MLPForecaster(d, q=q, rng=rng)
    if arch == "recurrent":
        return RecurrentForecaster(d, q=q, rng=rng)
    raise ValueError(f"unknown forecaster architecture {arch!r}")
