"""Data and label adapters mixed by cosine-softmax projection weights.

With projection weights ``beta`` (n x N, rows sum to one):

    X~ = X + sum_i diag(beta[:, i]) (X W_i + b_i)
    G~ = sum_i beta[:, i] * (G h_i + z_i)
    inverse(G^) = sum_i beta[:, i] * (G^ - z_i) / h_i

The inverse is exact only when N == 1 or every (h_i, z_i) pair coincides;
for other settings it is a beta-weighted pseudo-inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "AdapterParams",
    "DegenerateCosineError",
    "init_adapters",
    "projection_weights",
    "adapt_data",
    "adapt_labels",
    "invert_labels",
]


class DegenerateCosineError(ValueError):
    pass


@dataclass
class AdapterParams:
    W: list[Tensor]  # N x (d x d)
    b: list[Tensor]  # N x (1 x d)
    proto_data: Tensor  # N x d
    h: Tensor  # 1 x N
    z: Tensor  # 1 x N
    proto_label: Tensor  # N x d
    omega: float = 1.0

    @property
    def n_proj(self) -> int:
        return len(self.W)

    @property
    def d(self) -> int:
        return self.proto_data.shape[1]

    def data_parameters(self) -> list[Tensor]:
        return [*self.W, *self.b, self.proto_data]

    def label_parameters(self) -> list[Tensor]:
        return [self.h, self.z, self.proto_label]

    def parameters(self) -> list[Tensor]:
        return self.data_parameters() + self.label_parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"W{i}": w for i, w in enumerate(self.W)}
        out.update({f"b{i}": b for i, b in enumerate(self.b)})
        out.update(proto_data=self.proto_data, h=self.h, z=self.z, proto_label=self.proto_label)
        return out

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            [w.copy() for w in self.W],
            [b.copy() for b in self.b],
            self.proto_data.copy(),
            self.h.copy(),
            self.z.copy(),
            self.proto_label.copy(),
            self.omega,
        )


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    P = rng.standard_normal((n, d))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def init_adapters(d: int, n_proj: int = 8, omega: float = 1.0, rng: np.random.Generator | None = None) -> AdapterParams:
    """Identity-initialised adapters: W = 0, b = 0, h = 1, z = 0, random unit prototypes."""
    if n_proj < 1:
        raise ValueError("need at least one projection")
    if omega <= 0:
        raise ValueError("temperature must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    grad = dict(requires_grad=True)
    return AdapterParams(
        W=[Tensor(np.zeros((d, d)), name=f"W{i}", **grad) for i in range(n_proj)],
        b=[Tensor(np.zeros((1, d)), name=f"b{i}", **grad) for i in range(n_proj)],
        proto_data=Tensor(_unit_rows(rng, n_proj, d), name="proto_data", **grad),
        h=Tensor(np.ones((1, n_proj)), name="h", **grad),
        z=Tensor(np.zeros((1, n_proj)), name="z", **grad),
        proto_label=Tensor(_unit_rows(rng, n_proj, d), name="proto_label", **grad),
        omega=omega,
    )


def projection_weights(X, prototypes, omega: float) -> Tensor:
    """Row-stochastic n x N matrix, entry (j, i) proportional to exp(cos<x_j, p_i> / omega^2)."""
    if omega <= 0:
        raise ValueError("temperature must be positive")
    X, prototypes = ad.as_tensor(X), ad.as_tensor(prototypes)
    if np.any(~X.value.any(axis=1)) or np.any(~prototypes.value.any(axis=1)):
        raise DegenerateCosineError("degenerate cosine: zero sample or prototype")
    cos = ad.cosine_similarity(X, prototypes)
    return ad.softmax_rows(ad.scale(cos, 1.0 / (omega * omega)))


def adapt_data(X, params: AdapterParams, beta: Tensor | None = None) -> Tensor:
    X = ad.as_tensor(X)
    if X.shape[1] != params.d:
        raise ad.ShapeError("adapt_data", X.shape, params.proto_data.shape)
    if beta is None:
        beta = projection_weights(X, params.proto_data, params.omega)
    out = X
    for i, (W, b) in enumerate(zip(params.W, params.b)):
        proj = ad.add(ad.matmul(X, W), b)
        out = ad.add(out, ad.mul(ad.slice_cols(beta, i, i + 1), proj))
    return out


def adapt_labels(G, X, params: AdapterParams, beta: Tensor | None = None) -> Tensor:
    G = ad.as_tensor(G)
    if beta is None:
        beta = projection_weights(X, params.proto_label, params.omega)
    if G.shape != (beta.shape[0], 1):
        raise ad.ShapeError("adapt_labels", G.shape, beta.shape)
    mixed = ad.add(ad.matmul(G, params.h), params.z)  # n x N
    return ad.sum_rows(ad.mul(beta, mixed))


def invert_labels(G_hat, X, params: AdapterParams, beta: Tensor | None = None) -> Tensor:
    G_hat = ad.as_tensor(G_hat)
    if np.any(params.h.value == 0):
        raise ZeroDivisionError("label adapter has a zero scale h_i; the inverse is undefined")
    if beta is None:
        beta = projection_weights(X, params.proto_label, params.omega)
    if G_hat.shape != (beta.shape[0], 1):
        raise ad.ShapeError("invert_labels", G_hat.shape, beta.shape)
    back = ad.div(ad.sub(G_hat, params.z), params.h)  # n x N
    return ad.sum_rows(ad.mul(beta, back))


def label_beta(X, params: AdapterParams) -> Tensor:
    return projection_weights(X, params.proto_label, params.omega)


def data_beta(X, params: AdapterParams) -> Tensor:
    return projection_weights(X, params.proto_data, params.omega)

