import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fieldattn.gradcheck import check_dense
from fieldattn.numerics import (
    Adagrad,
    DenseLayer,
    Dice,
    EmbeddingTable,
    adagrad_update,
    dense_forward,
    embedding_backward,
    embedding_lookup,
    masked_softmax,
    sigmoid,
)


def test_identity_layer_passes_input_through():
    layer = DenseLayer(3, 3, "identity")
    layer.params["W"][...] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(dense_forward(layer, x), x)


def test_prelu_negative_slope():
    layer = DenseLayer(1, 1, "prelu")
    layer.params["W"][...] = 1.0
    assert dense_forward(layer, np.array([[-2.0]]))[0, 0] == -0.5


def test_dense_rejects_wrong_width():
    with pytest.raises(ValueError):
        DenseLayer(3, 2).forward(np.zeros((1, 4)))


def test_initialisation_ranges():
    rng = np.random.default_rng(0)
    layer = DenseLayer(30, 20, "prelu", rng)
    bound = np.sqrt(6 / 50)
    assert np.abs(layer.params["W"]).max() <= bound
    assert np.all(layer.params["b"] == 0)
    assert np.all(layer.activation.params["slope"] == 0.25)
    table = EmbeddingTable(50, 16, rng)
    assert np.abs(table.weight).max() <= 0.25


@pytest.mark.parametrize("act", ["identity", "sigmoid", "prelu", "dice"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dense_gradients_match_finite_differences(act, seed):
    assert check_dense(act, seed) < 1e-4


def test_softmax_uniform_and_masked():
    assert np.allclose(masked_softmax(np.zeros(3), np.ones(3, bool)), 1 / 3, rtol=0, atol=1e-15)
    w = masked_softmax(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 0], bool))
    e = np.exp([1.0, 2.0])
    assert w[2] == 0.0
    assert np.allclose(w[:2], e / e.sum(), rtol=1e-15)


def test_softmax_all_masked_row_is_zero():
    assert np.array_equal(masked_softmax(np.ones((2, 3)), np.zeros((2, 3), bool)), np.zeros((2, 3)))


@settings(max_examples=200, deadline=None)
@given(
    logits=arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)),
    k=st.integers(-50 * 64, 50 * 64),
)
def test_softmax_shift_invariance_exact_for_dyadic_shifts(logits, k):
    # shifts on a 1/64 grid keep x + c exactly representable here, so equality is bitwise
    logits = np.round(logits * 64) / 64
    mask = np.ones(len(logits), bool)
    assert np.array_equal(masked_softmax(logits, mask), masked_softmax(logits + k / 64, mask))


@settings(max_examples=200, deadline=None)
@given(
    logits=arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)),
    c=st.floats(-50, 50),
    mask_bits=st.integers(1, 255),
)
def test_softmax_shift_invariance_arbitrary_shift(logits, c, mask_bits):
    mask = np.array([(mask_bits >> i) & 1 for i in range(len(logits))], bool)
    a, b = masked_softmax(logits, mask), masked_softmax(logits + c, mask)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.all(b[~mask] == 0.0)


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(out, [0.0, 0.5, 1.0])


def test_embedding_lookup_and_padding_row():
    t = EmbeddingTable(10, 4, np.random.default_rng(0))
    assert np.array_equal(embedding_lookup(t, [0]), t.weight[[0]])
    with pytest.raises(ValueError):
        embedding_lookup(t, [10])


def test_embedding_backward_accumulates_duplicates():
    t = EmbeddingTable(10, 3)
    g = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
    rows, rg = embedding_backward(t, [7, 7, 2], g)
    dense = np.zeros((10, 3))
    dense[rows] = rg
    assert np.array_equal(dense[7], 2 * g[0])
    assert np.array_equal(dense[2], g[2])
    untouched = [i for i in range(10) if i not in (2, 7)]
    assert np.all(dense[untouched] == 0)


def test_adagrad_one_and_two_steps():
    opt = Adagrad(lr=0.01, eps=0.0, initial_accumulator=0.0)
    p = np.zeros(1)
    adagrad_update(opt, "w", p, np.ones(1))
    assert opt.accumulators["w"][0] == 1.0 and p[0] == -0.01
    adagrad_update(opt, "w", p, np.ones(1))
    assert p[0] == pytest.approx(-0.01 * (1 + 1 / np.sqrt(2)), rel=1e-15)


def test_adagrad_zero_grad_leaves_param():
    opt = Adagrad()
    p = np.array([1.5, -2.0])
    adagrad_update(opt, "w", p, np.zeros(2))
    assert np.array_equal(p, [1.5, -2.0])


@settings(max_examples=50, deadline=None)
@given(grads=st.lists(arrays(np.float64, 3, elements=st.floats(-10, 10)), min_size=1, max_size=6))
def test_adagrad_accumulators_never_decrease(grads):
    opt = Adagrad()
    p = np.zeros(3)
    prev = np.full(3, 0.1)
    for g in grads:
        adagrad_update(opt, "w", p, g)
        assert np.all(opt.accumulators["w"] >= prev)
        prev = opt.accumulators["w"].copy()


def test_adagrad_row_update_touches_only_listed_rows():
    opt = Adagrad(lr=0.1)
    table = np.ones((5, 2))
    opt.update_rows("t", table, np.array([1, 3]), np.ones((2, 2)))
    assert np.array_equal(table[[0, 2, 4]], np.ones((3, 2)))
    assert np.all(table[[1, 3]] < 1)
    assert np.array_equal(opt.accumulators["t"][0], [0.1, 0.1])


def test_dice_inference_uses_frozen_running_stats():
    rng = np.random.default_rng(0)
    dice = Dice(4)
    dice.params["alpha"][...] = 0.3
    dice.forward(rng.normal(size=(32, 4)), training=True)
    mean, var = dice.running_mean.copy(), dice.running_var.copy()
    x = rng.normal(size=(8, 4))
    a = dice.forward(x, training=False)
    b = dice.forward(x, training=False)
    assert np.array_equal(a, b)
    assert np.array_equal(mean, dice.running_mean) and np.array_equal(var, dice.running_var)
    # single rows see the same result as the full batch
    assert np.array_equal(np.vstack([dice.forward(x[i : i + 1]) for i in range(8)]), a)


def test_dice_batch_stats_ignore_masked_rows():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 3))
    rows = np.array([1, 1, 1, 0, 0, 1], bool)
    junk = x.copy()
    junk[~rows] = 1e6
    a, b = Dice(3), Dice(3)
    ya = a.forward(x, training=True, row_mask=rows)
    yb = b.forward(junk, training=True, row_mask=rows)
    assert np.array_equal(ya[rows], yb[rows])
    assert np.array_equal(a.running_mean, b.running_mean)
