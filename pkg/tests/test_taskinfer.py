import numpy as np
import pytest

from driftmeta import autodiff as ad
from driftmeta.autodiff import Tensor
from driftmeta.meta import ModelState
from driftmeta.models import MLPForecaster
from driftmeta.stream import generate_stream, make_scenario, segment_tasks
from driftmeta.taskinfer import (
    EmbeddingParams,
    InferenceNet,
    Memory,
    TaskSelector,
    build_triplets,
    embed_task,
    embedding_window,
    predict_embedding,
    select_historical,
    train_inference,
    triplet_loss,
)

from oracles import embed_task_oracle, triplet_oracle


def _params(q=4, p=3, seed=0):
    return EmbeddingParams.init(q, p, np.random.default_rng(seed))


def _memory(vectors):
    m = Memory()
    for i, v in enumerate(vectors):
        m.append(i, np.asarray(v, dtype=float))
    return m


# ---------------------------------------------------------------- embedding


@pytest.mark.parametrize("seed", range(10))
def test_embed_task_matches_formula(seed):
    rng = np.random.default_rng(seed)
    ep = _params(seed=seed)
    ep.eps.value[:] = rng.normal(size=(1, 4))
    S = rng.normal(size=(2 + seed, 4))
    out = embed_task(S, ep).value
    expected = embed_task_oracle(S, ep.V1.value, ep.eps.value, ep.V2.value, ep.v3.value)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_identical_samples_reduce_to_one_projection():
    ep = _params()
    s = np.array([[0.3, -1.0, 0.5, 2.0]])
    for n in (1, 5):
        out = embed_task(np.repeat(s, n, axis=0), ep).value
        np.testing.assert_allclose(out, s @ ep.V1.value + ep.eps.value, rtol=0, atol=1e-14)


def test_embedding_is_a_set_function():
    rng = np.random.default_rng(1)
    ep = _params()
    S = rng.normal(size=(9, 4))
    base = embed_task(S, ep).value
    np.testing.assert_allclose(embed_task(S[rng.permutation(9)], ep).value, base, rtol=0, atol=1e-14)
    np.testing.assert_allclose(embed_task(np.vstack([S, S]), ep).value, base, rtol=0, atol=1e-14)
    # per-date lists are concatenated
    np.testing.assert_allclose(embed_task([S[:4], S[4:]], ep).value, base, rtol=0, atol=1e-15)


def test_attention_weights_sum_to_one():
    rng = np.random.default_rng(2)
    ep = _params()
    S = rng.normal(size=(30, 4))
    scores = np.tanh(S @ ep.V2.value) @ ep.v3.value
    # with V1 = I and eps = 0 the embedding is alpha S; recovering alpha from it
    ep.V1.value[:] = np.eye(4)
    ep.eps.value[:] = 0.0
    alpha = np.exp(scores - scores.max()).ravel()
    alpha /= alpha.sum()
    assert abs(alpha.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(embed_task(S, ep).value, (alpha @ S)[None, :], rtol=0, atol=1e-13)


def test_empty_task_rejected():
    with pytest.raises(ValueError):
        embed_task([], _params())
    with pytest.raises(ValueError):
        embed_task(np.empty((0, 4)), _params())


# --------------------------------------------------------------- inference


@pytest.mark.parametrize("L", [1, 4, 8])
def test_predicted_embedding_shape(L):
    net = InferenceNet(6, rng=np.random.default_rng(0))
    seq = [Tensor(np.random.default_rng(k).normal(size=(1, 6))) for k in range(L)]
    assert predict_embedding(seq, net).shape == (1, 6)


def test_zero_weight_net_outputs_output_bias():
    net = InferenceNet(3, hidden=4, rng=np.random.default_rng(0))
    for p in net.parameters():
        p.value[:] = 0.0
    net.params["b_o"].value[:] = [[1.0, 2.0, 3.0]]
    out = net([Tensor(np.ones((1, 3)))] * 3).value
    np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])


def test_single_step_depends_only_on_last_embedding():
    net = InferenceNet(3, rng=np.random.default_rng(1))
    e = Tensor([[0.1, 0.2, -0.3]])
    a = net([e]).value
    assert np.array_equal(a, net([Tensor(e.value.copy())]).value)
    assert not np.array_equal(a, net([Tensor([[0.0, 0.2, -0.3]])]).value)


def test_inference_net_is_deterministic_and_rejects_empty():
    net = InferenceNet(3, rng=np.random.default_rng(1))
    seq = [Tensor([[0.1, 0.2, -0.3]]), Tensor([[1.0, 0.0, 0.5]])]
    assert np.array_equal(net(seq).value, net(seq).value)
    with pytest.raises(ValueError):
        net([])


def test_window_left_pads_with_earliest():
    embs = ["e0", "e1", "e2"]
    assert embedding_window(embs, 1, 4) == ["e0", "e0", "e0", "e1"]
    assert embedding_window(embs, 2, 2) == ["e1", "e2"]


# ---------------------------------------------------------------- selection


def test_exact_match_is_selected():
    m = _memory([[3.0, 0.0], [1.0, 1.0], [0.0, 5.0], [-2.0, 2.0]])
    sel = select_historical(np.array([1.0, 1.0]), m)
    assert sel.index == 1 and sel.distance == 0.0 and sel.accepted


def test_argmin_example():
    m = _memory([[0.5, 0.0], [1.2, 0.0], [3.0, 0.0]])
    for kappa in (34, 50, 80):
        sel = select_historical(np.zeros(2), m, kappa)
        assert sel.index == 0 and sel.distance == pytest.approx(0.5)


def test_gate_never_rejects_the_nearest_entry():
    # the nearest distance is the minimum, which no percentile falls below
    rng = np.random.default_rng(3)
    for kappa in (0, 50, 80, 100):
        m = _memory(rng.normal(size=(6, 3)))
        sel = select_historical(rng.normal(size=3), m, kappa)
        assert sel.accepted and sel.distance <= sel.threshold


def test_gate_threshold_is_distance_percentile():
    m = _memory([[0.0], [1.0], [2.0], [3.0], [10.0]])
    sel = select_historical(np.array([0.0]), m, kappa=80)
    assert sel.threshold == pytest.approx(np.percentile([0, 1, 2, 3, 10], 20))
    assert sel.accepted


def test_small_or_empty_memory_never_selects():
    assert not select_historical(np.zeros(2), Memory()).accepted
    assert select_historical(np.zeros(2), Memory()).index is None
    sel = select_historical(np.zeros(2), _memory([[0.0, 0.0], [5.0, 5.0]]))
    assert sel.index == 0 and not sel.accepted


def test_ties_go_to_oldest_task():
    m = _memory([[5.0, 5.0], [1.0, 0.0], [0.0, 1.0], [9.0, 9.0], [8.0, 8.0]])
    assert select_historical(np.zeros(2), m).index == 1


def test_far_entries_do_not_change_the_argmin():
    m = _memory([[0.1, 0.0], [2.0, 0.0], [3.0, 0.0]])
    a = select_historical(np.zeros(2), m)
    m.append(3, np.array([50.0, 50.0]))
    b = select_historical(np.zeros(2), m)
    assert a.index == b.index == 0 and b.accepted


def test_memory_is_append_only():
    m = _memory([[0.0], [1.0]])
    with pytest.raises(ValueError):
        m.append(1, np.array([2.0]))
    assert m.before(1).indices == [0]


# ------------------------------------------------------------------ triplet


def test_triplet_examples():
    z = np.zeros((1, 3))
    assert triplet_loss(z, z, np.array([[2.0, 0.0, 0.0]]), 1.0).item() == 0.0
    assert triplet_loss(z, np.array([[0.0, 1.0, 0.0]]), z, 1.0).item() == 2.0


@pytest.mark.parametrize("seed", range(10))
def test_triplet_matches_formula(seed):
    rng = np.random.default_rng(seed)
    Ep, Et, En = (rng.normal(size=(1, 5)) for _ in range(3))
    gamma = rng.uniform(0, 2)
    assert abs(triplet_loss(Ep, Et, En, gamma).item() - triplet_oracle(Ep, Et, En, gamma)) <= 1e-12


def test_triplet_subgradient_at_hinge_is_zero():
    Ep = Tensor([[0.0, 0.0]], requires_grad=True)
    with ad.Tape() as tape:
        # ||Ep - Et|| - ||Ep - En|| + gamma == 0 exactly
        (g,) = tape.backward(triplet_loss(Ep, [[1.0, 0.0]], [[0.0, 2.0]], 1.0), [Ep])
    assert np.array_equal(g, np.zeros((1, 2)))


def test_minimal_triplet_set():
    L = 3
    trips = build_triplets(L + 2, L)
    assert len(trips) == 1
    anchor, target, negs = trips[0]
    assert target == anchor + 1 and len(negs) == L
    assert anchor not in negs and target not in negs


@pytest.mark.parametrize("n, L", [(6, 2), (10, 3), (20, 8)])
def test_triplet_counts(n, L):
    trips = build_triplets(n, L)
    # one anchor per predictable next task, each with every other task as a negative
    assert sum(len(negs) for _, _, negs in trips) == (n - L - 1) * (n - 2)
    assert all(t > L for _, t, _ in trips)


def test_too_few_tasks_rejected():
    with pytest.raises(ValueError):
        build_triplets(4, 3)


# ----------------------------------------------------------------- training


def _setup(seed, n_dates=240):
    sc = make_scenario("recurring-cycle", n_dates, 4, seed=seed, shift=0.5)
    stream, regimes = generate_stream(sc, 20)
    tasks = [t for t in segment_tasks(stream, 15) if t.test]
    state = ModelState(MLPForecaster(4, q=6, hidden=8, rng=np.random.default_rng(seed)))
    return state, tasks[:10], tasks[10:13], regimes


def test_training_keeps_the_encoder_frozen():
    state, train, val, _ = _setup(0)
    before = [p.value.copy() for p in state.forecaster.parameters()]
    train_inference(state, train, val, q=6, p=4, lookback=3, max_epochs=2, validate=lambda *_: 0.0)
    for a, b in zip(before, state.forecaster.parameters()):
        assert np.array_equal(a, b.value)


def test_triplet_loss_decreases_early():
    drops = []
    for seed in range(5):
        state, train, val, _ = _setup(seed)
        res = train_inference(
            state, train, val, q=6, p=4, lookback=3, lr=1e-2, patience=5, max_epochs=3,
            rng=np.random.default_rng(seed), validate=lambda *_: 0.0,
        )
        drops.append(res.log[0]["triplet_loss"] - res.log[-1]["triplet_loss"])
    assert np.median(drops) > 0


def test_training_log_and_best_epoch():
    state, train, val, _ = _setup(1)
    scores = iter([0.1, 0.3, 0.2, 0.2])
    res = train_inference(state, train, val, q=6, p=4, lookback=3, patience=2, max_epochs=10, validate=lambda *_: next(scores))
    assert [r["epoch"] for r in res.log] == [1, 2, 3, 4]
    assert res.best_epoch == 2
    assert set(res.log[0]) == {"epoch", "triplet_loss", "val_ic"}


def test_selector_only_looks_backwards():
    state, train, val, _ = _setup(2)
    res = train_inference(state, train, val, q=6, p=4, lookback=3, max_epochs=1, validate=lambda *_: 0.0)
    tasks = {t.index: t for t in train + val}
    sel = TaskSelector(state, res.params, res.net, tasks, lookback=3)
    for t in train + val:
        s = sel.propose(t)
        assert s.index is None or s.index < t.index
    assert sel.memory.indices == [t.index for t in train + val]
