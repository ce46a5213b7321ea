import numpy as np
import pytest

from driftmeta import autodiff as ad
from driftmeta.autodiff import AdamState, Tape
from driftmeta.models import MLPForecaster, RecurrentForecaster, make_forecaster
from driftmeta.stream import generate_stream, make_scenario, stack_batches


@pytest.fixture(params=["mlp", "recurrent"])
def model(request):
    return make_forecaster(request.param, 12, q=32, rng=np.random.default_rng(0))


def test_shapes_and_lossless_split(model):
    X = np.random.default_rng(1).normal(size=(7, 12))
    assert model.encode(X).shape == (7, 32)
    pred = model.predict(X).value
    assert pred.shape == (7, 1)
    assert np.array_equal(pred, model.head(model.encode(X)).value)


def test_zero_mlp_encoder_gives_zero_embeddings():
    m = MLPForecaster(5, q=4, hidden=3)
    for key in ("w1", "b1", "w2", "b2"):
        m.params[key].value[:] = 0.0
    X = np.random.default_rng(0).normal(size=(6, 5))
    assert np.array_equal(m.encode(X).value, np.zeros((6, 4)))


def test_zero_head_predicts_bias(model):
    model.params["head_w"].value[:] = 0.0
    model.params["head_b"].value[:] = 0.37
    X = np.random.default_rng(2).normal(size=(4, 12))
    assert np.array_equal(model.predict(X).value, np.full((4, 1), 0.37))


def test_mlp_rows_are_independent_and_permutation_equivariant():
    m = MLPForecaster(12, rng=np.random.default_rng(3))
    X = np.random.default_rng(4).normal(size=(5, 12))
    # BLAS may block a 1-row product differently from a 5-row one: compare to round-off
    np.testing.assert_allclose(m.encode(X[2:3]).value[0], m.encode(X).value[2], rtol=0, atol=1e-13)
    perm = [3, 0, 4, 1, 2]
    np.testing.assert_allclose(m.predict(X[perm]).value, m.predict(X).value[perm], rtol=0, atol=1e-13)


def test_recurrent_reads_six_slices():
    m = RecurrentForecaster(12, q=32, steps=6)
    assert m.params["w_in"].shape == (2, 32)
    with pytest.raises(ValueError):
        RecurrentForecaster(10, steps=6)


def test_dimension_mismatch(model):
    with pytest.raises(ad.ShapeError):
        model.predict(np.ones((2, 11)))


def test_parameter_count_independent_of_n(model):
    before = sum(p.value.size for p in model.parameters())
    model.predict(np.ones((50, 12)))
    assert sum(p.value.size for p in model.parameters()) == before


def test_forward_finite_on_bounded_inputs(model):
    X = np.random.default_rng(5).uniform(-10, 10, size=(200, 12))
    assert np.all(np.isfinite(model.predict(X).value))


def test_clone_is_deep(model):
    other = model.clone()
    other.params["head_b"].value[:] += 1.0
    assert not np.array_equal(other.params["head_b"].value, model.params["head_b"].value)


def test_uniform_init_bounds():
    m = MLPForecaster(12, hidden=64, rng=np.random.default_rng(6))
    assert np.abs(m.params["w1"].value).max() <= 1 / np.sqrt(12)
    assert np.abs(m.params["w2"].value).max() <= 1 / np.sqrt(64)


def test_fits_noiseless_linear_stream():
    stream, _ = generate_stream(make_scenario("recurring-cycle", 5, 12, seed=0, noise=0.0, n_regimes=1), 100)
    X, y = stack_batches(stream)
    m = MLPForecaster(12, rng=np.random.default_rng(0))
    opt = AdamState(lr=1e-2)
    for _ in range(200):
        with Tape() as tape:
            loss = ad.mse(m.predict(X), y)
            grads = tape.backward(loss, m.parameters())
        ad.adam_step(m.parameters(), grads, opt)
    assert ad.mse(m.predict(X), y).item() < 1e-3
