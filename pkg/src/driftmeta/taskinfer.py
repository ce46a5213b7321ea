"""Task inference: task embeddings, next-task prediction, historical selection.

A task's training window is summarised by attention pooling of its
sample-level encodings s (rows of an n x q matrix):

    alpha = softmax over all rows of tanh(s V2) v3
    E     = sum_rows alpha * (s V1 + eps)

A GRU reads the last L task embeddings and predicts the next one; the memory
entry nearest to that prediction is the candidate historical task, kept only
when it passes the percentile gate (see :func:`select_historical`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import adapt_data
from .autodiff import AdamState, Tape, Tensor
from .meta import EarlyStopping, ModelState, mean_daily_ic, run_tasks
from .models import uniform_init
from .stream import DayBatch, Task, stack_batches

__all__ = [
    "EmbeddingParams",
    "InferenceNet",
    "Memory",
    "Selection",
    "TaskSelector",
    "sample_embeddings",
    "embed_task",
    "embedding_window",
    "predict_embedding",
    "nearest_task",
    "gate_threshold",
    "select_historical",
    "triplet_loss",
    "build_triplets",
    "train_inference",
]

log = logging.getLogger(__name__)


@dataclass
class EmbeddingParams:
    V1: Tensor  # q x q
    eps: Tensor  # 1 x q
    V2: Tensor  # q x p
    v3: Tensor  # p x 1

    @classmethod
    def init(cls, q: int = 32, p: int = 16, rng: np.random.Generator | None = None) -> "EmbeddingParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            V1=uniform_init(rng, q, (q, q), "V1"),
            eps=uniform_init(rng, q, (1, q), "eps"),
            V2=uniform_init(rng, q, (q, p), "V2"),
            v3=uniform_init(rng, p, (p, 1), "v3"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.V1, self.eps, self.V2, self.v3]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"V1": self.V1, "eps": self.eps, "V2": self.V2, "v3": self.v3}

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(*(t.copy() for t in self.parameters()))


class InferenceNet:
    """Single-layer GRU over a sequence of 1 x q embeddings, linear read-out to q."""

    GATES = ("z", "r", "n")

    def __init__(self, q: int = 32, hidden: int | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q = q
        self.hidden = hidden = hidden or q
        self.params: dict[str, Tensor] = {}
        for g in self.GATES:
            self.params[f"W_{g}"] = uniform_init(rng, hidden, (q, hidden), f"W_{g}")
            self.params[f"U_{g}"] = uniform_init(rng, hidden, (hidden, hidden), f"U_{g}")
            self.params[f"b_{g}"] = uniform_init(rng, hidden, (1, hidden), f"b_{g}")
        self.params["W_o"] = uniform_init(rng, hidden, (hidden, q), "W_o")
        self.params["b_o"] = uniform_init(rng, hidden, (1, q), "b_o")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "InferenceNet":
        other = object.__new__(InferenceNet)
        other.q, other.hidden = self.q, self.hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def __call__(self, sequence: Sequence[Tensor]) -> Tensor:
        if not sequence:
            raise ValueError("empty embedding sequence")
        p = self.params
        rows = sequence[0].shape[0]
        h = Tensor(np.zeros((rows, self.hidden)))
        for x in sequence:
            x = ad.as_tensor(x)
            if x.shape[1] != self.q:
                raise ad.ShapeError("InferenceNet input", x.shape, (rows, self.q))
            z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["W_z"]), ad.matmul(h, p["U_z"])), p["b_z"]))
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["W_r"]), ad.matmul(h, p["U_r"])), p["b_r"]))
            n = ad.tanh(ad.add(ad.add(ad.matmul(x, p["W_n"]), ad.matmul(ad.mul(r, h), p["U_n"])), p["b_n"]))
            # h <- (1 - z) * n + z * h
            h = ad.add(n, ad.mul(z, ad.sub(h, n)))
        return ad.add(ad.matmul(h, p["W_o"]), p["b_o"])


# -------------------------------------------------------------- embeddings


def sample_embeddings(state: ModelState, batches: Sequence[DayBatch]) -> np.ndarray:
    """Encoder features of the adapted inputs of a window (n x q), no gradients."""
    X, _ = stack_batches(batches, labels=False)
    if state.adapters is not None:
        X = adapt_data(X, state.adapters).value
    return state.forecaster.encode(X).value


def embed_task(samples, params: EmbeddingParams) -> Tensor:
    """Attention-pooled 1 x q task embedding from sample rows (array, Tensor or per-date list)."""
    if isinstance(samples, (list, tuple)):
        if not samples:
            raise ValueError("task has no samples")
        samples = np.concatenate([np.asarray(getattr(s, "value", s)) for s in samples], axis=0)
    S = ad.as_tensor(samples)
    if S.shape[0] < 1:
        raise ValueError("task has no samples")
    if S.shape[1] != params.V1.shape[0]:
        raise ad.ShapeError("embed_task", S.shape, params.V1.shape)
    scores = ad.matmul(ad.tanh(ad.matmul(S, params.V2)), params.v3)  # n x 1
    alpha = ad.softmax_rows(ad.transpose(scores))  # 1 x n
    # sum_i alpha_i (s_i V1 + eps) == (alpha S) V1 + eps because alpha sums to one
    return ad.add(ad.matmul(ad.matmul(alpha, S), params.V1), params.eps)


def embedding_window(embeddings: Sequence[Tensor], end: int, lookback: int) -> list[Tensor]:
    """Embeddings ``end-L+1 .. end`` (inclusive), left-padded with the earliest one."""
    if end < 0 or not embeddings:
        raise ValueError("empty embedding sequence")
    start = end - lookback + 1
    return [embeddings[max(k, 0)] for k in range(start, end + 1)]


def predict_embedding(sequence: Sequence[Tensor], net: InferenceNet) -> Tensor:
    return net(sequence)


# --------------------------------------------------------------- selection


@dataclass
class Memory:
    """Append-only list of (task index, embedding)."""

    indices: list[int] = field(default_factory=list)
    embeddings: list[np.ndarray] = field(default_factory=list)

    def append(self, index: int, embedding) -> None:
        if self.indices and index <= self.indices[-1]:
            raise ValueError("memory is append-only in task order")
        self.indices.append(int(index))
        self.embeddings.append(np.asarray(getattr(embedding, "value", embedding), dtype=np.float64).reshape(-1))

    def __len__(self) -> int:
        return len(self.indices)

    def before(self, index: int) -> "Memory":
        k = int(np.searchsorted(self.indices, index))
        return Memory(self.indices[:k], self.embeddings[:k])

    def matrix(self) -> np.ndarray:
        return np.vstack(self.embeddings) if self.embeddings else np.empty((0, 0))


@dataclass
class Selection:
    index: int | None  # nearest memory task (None for an empty memory)
    distance: float
    threshold: float | None
    accepted: bool


def nearest_task(E_p, memory: Memory) -> tuple[int | None, float]:
    """Nearest memory entry by Frobenius distance; ties go to the oldest task."""
    if len(memory) == 0:
        return None, math.inf
    e = np.asarray(getattr(E_p, "value", E_p), dtype=np.float64).reshape(1, -1)
    dist = np.sqrt(((memory.matrix() - e) ** 2).sum(axis=1))
    k = int(np.argmin(dist))  # first minimum == smallest task index
    return memory.indices[k], float(dist[k])


def gate_threshold(E_p, memory: Memory, kappa: float) -> float:
    """(100 - kappa)-th percentile of the distances from ``E_p`` to every memory entry."""
    E_p = E_p.value if isinstance(E_p, Tensor) else np.asarray(E_p, dtype=np.float64)
    d = np.sqrt(((memory.matrix() - E_p.reshape(1, -1)) ** 2).sum(axis=1))
    return float(np.percentile(d, 100.0 - kappa))


def select_historical(E_p, memory: Memory, kappa: float = 80.0, min_memory: int = 3) -> Selection:
    """Nearest historical task, accepted only if its distance is within the gate.

    The gate is the ``(100 - kappa)``-th percentile (linear interpolation) of
    the distances from ``E_p`` to all memory entries, so ``kappa = 80`` asks
    for a match among the closest fifth.  A memory with fewer than
    ``min_memory`` entries never yields a selection.
    """
    idx, dist = nearest_task(E_p, memory)
    if idx is None or len(memory) < min_memory:
        return Selection(idx, dist, None, False)
    thr = gate_threshold(E_p, memory, kappa)
    return Selection(idx, dist, thr, dist <= thr)


# ----------------------------------------------------------------- training


def triplet_loss(E_p, E_t, E_n, gamma: float = 1.0) -> Tensor:
    """max(||E_p - E_t|| - ||E_p - E_n|| + gamma, 0)."""
    return ad.relu(ad.add(ad.sub(ad.norm(ad.sub(E_p, E_t)), ad.norm(ad.sub(E_p, E_n))), gamma))


def build_triplets(n_tasks: int, lookback: int) -> list[tuple[int, int, list[int]]]:
    """(anchor, target, negatives) index triples over ``n_tasks`` training tasks.

    Anchor ``i`` predicts from embeddings ``i-L+1 .. i``; its target is task
    ``i + 1`` and every other task except ``i`` and ``i + 1`` is a negative.
    Anchors run over ``L .. n_tasks - 2`` (0-based).
    """
    if n_tasks < lookback + 2:
        raise ValueError(f"need at least L + 2 = {lookback + 2} tasks, got {n_tasks}")
    return [
        (i, i + 1, [k for k in range(n_tasks) if k not in (i, i + 1)])
        for i in range(lookback, n_tasks - 1)
    ]


def _anchor_loss(embs: Sequence[Tensor], net: InferenceNet, anchor, lookback: int, gamma: float) -> Tensor:
    i, t, negs = anchor
    E_p = net(embedding_window(embs, i, lookback))
    losses = [triplet_loss(E_p, embs[t], embs[k], gamma) for k in negs]
    return ad.scale(ad.sum_all(ad.concat_rows(losses)), 1.0 / len(losses))


class TaskSelector:
    """Streams task embeddings into memory and proposes one historical task.

    Sample encodings always use the frozen stage-1 encoder, never the
    evolving forecaster.
    """

    def __init__(
        self,
        encoder_state: ModelState,
        params: EmbeddingParams,
        net: InferenceNet,
        tasks_by_index: dict[int, Task],
        lookback: int = 8,
        kappa: float = 80.0,
    ):
        self.encoder_state = encoder_state
        self.params = params
        self.net = net
        self.tasks = tasks_by_index
        self.lookback = lookback
        self.kappa = kappa
        self.memory = Memory()
        self.embeddings: dict[int, np.ndarray] = {}
        self.log: list[tuple[int, Selection]] = []

    def ingest(self, task: Task) -> None:
        if task.index in self.embeddings:
            return
        S = sample_embeddings(self.encoder_state, task.train)
        E = embed_task(S, self.params).value
        self.embeddings[task.index] = E
        self.memory.append(task.index, E)

    def propose(self, task: Task) -> Selection:
        self.ingest(task)
        order = sorted(k for k in self.embeddings if k <= task.index)
        seq_ids = order[-self.lookback :]
        seq = [Tensor(self.embeddings[k]) for k in seq_ids]
        seq = [seq[0]] * (self.lookback - len(seq)) + seq
        E_p = self.net(seq)
        sel = select_historical(E_p, self.memory.before(task.index), self.kappa)
        self.log.append((task.index, sel))
        return sel

    def __call__(self, task: Task) -> list[DayBatch]:
        sel = self.propose(task)
        if sel.accepted:
            return list(self.tasks[sel.index].train)
        return []


@dataclass
class InferenceTraining:
    params: EmbeddingParams
    net: InferenceNet
    log: list[dict]
    best_epoch: int


def train_inference(
    state0: ModelState,
    train_tasks: Sequence[Task],
    val_tasks: Sequence[Task],
    *,
    q: int = 32,
    p: int = 16,
    lookback: int = 8,
    kappa: float = 80.0,
    gamma: float = 1.0,
    lr: float = 1e-3,
    patience: int = 5,
    max_epochs: int = 50,
    rng: np.random.Generator | None = None,
    shuffle_rng: np.random.Generator | None = None,
    validate: Callable[[EmbeddingParams, InferenceNet], float] | None = None,
) -> InferenceTraining:
    """Fit embedding and inference parameters with triplets; early-stop on validation IC.

    ``state0`` is only read: sample encodings are computed once from it.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    shuffle_rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng(1)
    params = EmbeddingParams.init(q, p, rng)
    net = InferenceNet(q, rng=rng)
    samples = [Tensor(sample_embeddings(state0, t.train)) for t in train_tasks]
    triplets = build_triplets(len(samples), lookback)
    all_tasks = {t.index: t for t in list(train_tasks) + list(val_tasks)}
    opt = AdamState(lr=lr)
    trainable = params.parameters() + net.parameters()

    def default_validate(par: EmbeddingParams, nt: InferenceNet) -> float:
        selector = TaskSelector(state0, par, nt, all_tasks, lookback, kappa)
        for t in train_tasks:
            selector.ingest(t)
        _, results = run_tasks(state0.copy(), val_tasks, selector)
        return mean_daily_ic(results)

    validate = validate or default_validate
    stopper = EarlyStopping(patience)
    rows = []
    for epoch in range(1, max_epochs + 1):
        losses = []
        for a in shuffle_rng.permutation(len(triplets)):
            with Tape() as tape:
                embs = [embed_task(S, params) for S in samples]
                loss = _anchor_loss(embs, net, triplets[a], lookback, gamma)
                grads = tape.backward(loss, trainable)
            ad.adam_step(trainable, grads, opt)
            losses.append(loss.item())
        score = validate(params, net)
        rows.append(dict(epoch=epoch, triplet_loss=float(np.mean(losses)), val_ic=score))
        log.debug("inference epoch %d: triplet %.4f, validation IC %.4f", epoch, rows[-1]["triplet_loss"], score)
        if stopper.update(epoch, score, (params.copy(), net.copy())):
            break
    best_params, best_net = stopper.best
    return InferenceTraining(best_params, best_net, rows, stopper.best_epoch)
