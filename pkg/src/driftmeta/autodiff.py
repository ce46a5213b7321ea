"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D float64 array.  Operations performed while a :class:`Tape`
is active, and that touch at least one tensor requiring gradients, are recorded
on that tape in execution order.  Execution order is a topological order, so
``Tape.backward`` simply walks the record in reverse.

Outside of a tape the same functions evaluate eagerly and return constants,
which is how inference paths avoid the bookkeeping cost.

>>> x = Tensor([[3.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = mul(x, x)
...     (g,) = tape.backward(loss, [x])
>>> float(g[0, 0])
6.0
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DegenerateDirectionError",
    "NonFiniteGradientError",
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "relu",
    "sqrt",
    "softmax_rows",
    "cosine_similarity",
    "mse",
    "frobenius_sq",
    "norm",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "mean_rows",
    "sum_rows",
    "sum_all",
    "mean_all",
    "transpose",
    "AdamState",
    "adam_step",
    "sgd_step",
    "numerical_gradient",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DegenerateDirectionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "driftmeta_active_tape", default=None
)


class Tensor:
    """A 2-D float64 value with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "tape", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("Tensor", arr.shape)
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def copy(self) -> "Tensor":
        """Fresh leaf with copied values and the same ``requires_grad`` flag."""
        return Tensor(self.value.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below are canonical
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow the outer one.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor) -> None:
        out.tape = self
        self.nodes.append(out)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        When ``params`` is given, their gradients are returned in order and any
        parameter not reachable from the loss receives a zero gradient.
        """
        if loss.shape != (1, 1):
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        params = list(params) if params is not None else []
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        leaves: dict[int, Tensor] = {}

        if loss.tape is self:
            start = len(self.nodes) - 1
            while self.nodes[start] is not loss:
                start -= 1
            for node in reversed(self.nodes[: start + 1]):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                    if parent.vjp is None:
                        leaves[key] = parent
        elif loss.requires_grad and loss.vjp is None:
            leaves[id(loss)] = loss

        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        out = []
        for p in params:
            if id(p) in leaves:
                out.append(p.grad)
            else:
                p.grad = np.zeros_like(p.value)
                out.append(p.grad)
        return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Run reverse mode on the tape that recorded ``loss``."""
    if loss.shape != (1, 1):
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    tape = loss.tape if loss.tape is not None else Tape()
    return tape.backward(loss, params)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.parents = ()
    out.vjp = None
    out.tape = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        tape.record(out)
    else:
        out.requires_grad = False
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    sa, sb = a.shape, b.shape
    shape = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(op, sa, sb)
    return tuple(shape)  # type: ignore[return-value]


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.value
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: (g * y,))


def relu(a) -> Tensor:
    """max(a, 0) with subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / y, 0.0)
        return (g * d,)

    return _make(y, (a,), vjp)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity matrix: entry (j, k) = cos<a_j, b_k>.

    For two row vectors the result is 1x1.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    nb = np.sqrt((b.value * b.value).sum(axis=1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateDirectionError("cosine_similarity: degenerate direction (zero vector)")
    ua, ub = a.value / na, b.value / nb
    y = ua @ ub.T

    def vjp(g):
        gua = g @ ub
        gub = g.T @ ua
        ga = (gua - (gua * ua).sum(axis=1, keepdims=True) * ua) / na
        gb = (gub - (gub * ub).sum(axis=1, keepdims=True) * ub) / nb
        return ga, gb

    return _make(y, (a, b), vjp)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.array([[np.sum(av * av)]]), (a,), lambda g: (2.0 * g[0, 0] * av,))


def norm(a) -> Tensor:
    """Euclidean (Frobenius) norm; subgradient 0 at the origin."""
    a = as_tensor(a)
    av = a.value
    n = float(np.sqrt(np.sum(av * av)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(av),)
        return (g[0, 0] * av / n,)

    return _make(np.array([[n]]), (a,), vjp)


def mse(pred, target) -> Tensor:
    """Mean over all entries of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.value - target.value
    m = diff.size
    return _make(
        np.array([[np.sum(diff * diff) / m]]),
        (pred, target),
        lambda g: (2.0 * g[0, 0] * diff / m, -2.0 * g[0, 0] * diff / m),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_rows", ())
    cols = ts[0].shape[1]
    for t in ts[1:]:
        if t.shape[1] != cols:
            raise ShapeError("concat_rows", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])
    value = np.concatenate([t.value for t in ts], axis=0)
    return _make(value, tuple(ts), lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(ts))))


def concat_cols(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_cols", ())
    rows = ts[0].shape[0]
    for t in ts[1:]:
        if t.shape[0] != rows:
            raise ShapeError("concat_cols", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])
    value = np.concatenate([t.value for t in ts], axis=1)
    return _make(value, tuple(ts), lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts))))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols[{start}:{stop}]", a.shape)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.value[:, start:stop].copy(), (a,), vjp)


def mean_rows(a) -> Tensor:
    """Column-wise mean over rows: n x c -> 1 x c."""
    a = as_tensor(a)
    n = a.shape[0]
    return _make(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_rows(a) -> Tensor:
    """Sum across each row: n x c -> n x 1."""
    a = as_tensor(a)
    c = a.shape[1]
    return _make(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, c, axis=1),))


# ---------------------------------------------------------------- optimizers


def _check_finite(grads: Sequence[np.ndarray]) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient")


def _check_shapes(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError("optimizer step", p.shape, np.shape(g))


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place ``p <- p - lr * g``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_shapes(params, grads)
    _check_finite(grads)
    for p, g in zip(params, grads):
        p.value = p.value - lr * g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.step,
            [x.copy() for x in self.m],
            [x.copy() for x in self.v],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> None:
    """One Adam update, in place on ``params`` and ``state``."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_shapes(params, grads)
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``param``."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad
