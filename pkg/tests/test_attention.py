import numpy as np
import pytest
from conftest import random_block

from fieldattn import BehaviorBlock, FieldSchema, attend, attend_backward, cfi_mask, make_unit, topk_mask
from fieldattn.attention import UNIT_KINDS, AutoAttention, DotProduct
from fieldattn.gradcheck import check_unit

SOFTMAX_KINDS = [k for k in UNIT_KINDS if k != "sum_pooling"]


def _unit(kind, M=3, P=2, K=4, seed=0):
    return make_unit(kind, M, P, K, d=5, din_query_fields=(0, 1), rng=np.random.default_rng(seed))


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_unit("gru", 2, 1, 3)


def test_dimension_mismatch_rejected():
    unit = _unit("dot_product")
    with pytest.raises(ValueError):
        unit.forward(np.zeros((1, 2, 2, 5)), np.zeros((1, 3, 4)), np.ones((1, 2), bool))


def test_hand_example():
    unit = AutoAttention(1, 1, 1)
    block = BehaviorBlock(V=np.array([[[1.0]], [[2.0]]]), mask=np.array([True, True]), Q=np.array([[1.0]]))
    w, interest = attend(unit, block)
    e = np.exp([1.0, 2.0])
    sig = e / e.sum()
    assert np.allclose(w, sig, rtol=1e-15)
    assert interest[0] == pytest.approx(sig[0] * 1 + sig[1] * 2, rel=1e-15)


def test_r_ones_equals_dot_product():
    rng = np.random.default_rng(0)
    auto, dot = AutoAttention(4, 3, 5), DotProduct(4, 3, 5)
    for _ in range(50):
        V, Q, mask = random_block(rng, 3, 6, 3, 4, 5)
        wa, ia = auto.forward(V, Q, mask)
        wd, idot = dot.forward(V, Q, mask)
        assert np.allclose(wa, wd, rtol=1e-9, atol=0)
        assert np.allclose(ia, idot, rtol=1e-9, atol=1e-300)


def test_zero_mask_gives_mean_pooling():
    rng = np.random.default_rng(1)
    unit = AutoAttention(3, 2, 4, pair_mask=np.zeros((2, 3)))
    V, Q, _ = random_block(rng, 1, 5, 2, 3, 4)
    mask = np.array([[1, 1, 0, 1, 0]], bool)
    w, interest = unit.forward(V, Q, mask)
    assert np.allclose(w[0], [1 / 3, 1 / 3, 0, 1 / 3, 0], rtol=1e-15)
    assert np.allclose(interest[0], V[0, mask[0]].sum(axis=1).mean(axis=0), rtol=1e-12)


@pytest.mark.parametrize("kind", SOFTMAX_KINDS)
def test_weights_sum_to_one_and_masked_zero(kind):
    rng = np.random.default_rng(2)
    unit = _unit(kind)
    V, Q, mask = random_block(rng, 6, 5, 2, 3, 4)
    w, _ = unit.forward(V, Q, mask)
    has = mask.any(axis=1)
    assert np.allclose(w[has].sum(axis=1), 1.0, atol=1e-9)
    assert np.all(w[~mask] == 0.0)


@pytest.mark.parametrize("kind", UNIT_KINDS)
def test_padding_slot_contents_do_not_matter(kind):
    rng = np.random.default_rng(3)
    unit = _unit(kind)
    V, Q, mask = random_block(rng, 4, 5, 2, 3, 4)
    mask[0] = [1, 1, 0, 0, 0]
    w1, i1 = unit.forward(V, Q, mask)
    V2 = V.copy()
    V2[~mask] = rng.normal(size=V2[~mask].shape) * 100
    w2, i2 = unit.forward(V2, Q, mask)
    assert np.array_equal(w1, w2) and np.array_equal(i1, i2)


@pytest.mark.parametrize("kind", UNIT_KINDS)
def test_all_masked_block_gives_zero_interest(kind):
    rng = np.random.default_rng(4)
    unit = _unit(kind)
    V, Q, _ = random_block(rng, 2, 4, 2, 3, 4)
    _, interest = unit.forward(V, Q, np.zeros((2, 4), bool))
    assert np.array_equal(interest, np.zeros((2, 4)))


@pytest.mark.parametrize("kind", SOFTMAX_KINDS)
def test_bias_does_not_change_weights(kind):
    rng = np.random.default_rng(5)
    unit = _unit(kind)
    V, Q, mask = random_block(rng, 4, 5, 2, 3, 4)
    bias_key = "b2" if "b2" in unit.params else "b"
    w0, _ = unit.forward(V, Q, mask)
    unit.params[bias_key][...] += 8.0  # dyadic: logits shift without rounding
    w1, _ = unit.forward(V, Q, mask)
    assert np.max(np.abs(w0 - w1)) <= 1e-12


@pytest.mark.parametrize("kind", SOFTMAX_KINDS)
def test_bias_gradient_is_exactly_zero(kind):
    rng = np.random.default_rng(6)
    unit = _unit(kind)
    V, Q, mask = random_block(rng, 3, 4, 2, 3, 4)
    unit.forward(V, Q, mask, training=True)
    unit.backward(rng.normal(size=(3, 4)))
    bias_key = "b2" if "b2" in unit.grads else "b"
    assert np.array_equal(unit.grads[bias_key], np.zeros_like(unit.params[bias_key]))


@pytest.mark.parametrize("kind", UNIT_KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unit_gradients_match_finite_differences(kind, seed):
    assert check_unit(kind, seed) < 1e-4


def test_single_block_api_matches_batch():
    rng = np.random.default_rng(7)
    unit = _unit("maf_c")
    V, Q, mask = random_block(rng, 1, 4, 2, 3, 4)
    mask[0, :2] = True
    w, i = attend(unit, BehaviorBlock(V[0], mask[0], Q[0]))
    wb, ib = unit.forward(V, Q, mask)
    assert np.array_equal(w, wb[0]) and np.array_equal(i, ib[0])
    gV, gQ = attend_backward(unit, np.ones(4))
    assert gV.shape == (4, 2, 4) and gQ.shape == (3, 4)


def test_pruned_pair_gets_zero_gradient():
    rng = np.random.default_rng(8)
    pm = np.ones((2, 3))
    pm[1, 2] = 0
    unit = AutoAttention(3, 2, 4, pair_mask=pm)
    V, Q, mask = random_block(rng, 3, 4, 2, 3, 4)
    mask[:, 0] = True
    unit.forward(V, Q, mask)
    unit.backward(rng.normal(size=(3, 4)))
    assert unit.grads["R"][1, 2] == 0.0
    assert np.count_nonzero(unit.grads["R"]) == 5


def test_cfi_mask():
    schema = FieldSchema(
        [(f"q{j}", 5) for j in range(15)], [("b0", 5), ("b1", 5)], correspondence_map={0: 3, 1: 5}
    )
    m = cfi_mask(schema)
    assert m.sum() == 2 and m[0, 3] == 1 and m[1, 5] == 1


def test_cfi_mask_named_fields(small_schema):
    m = cfi_mask(small_schema)
    assert m[0, 0] == 1 and m[1, 1] == 1 and m.sum() == 2


@pytest.mark.parametrize("cmap", [None, {}])
def test_cfi_mask_requires_a_map(cmap):
    schema = FieldSchema([("q", 5)], [("b", 5)], correspondence_map=cmap)
    with pytest.raises(ValueError):
        cfi_mask(schema)


def test_topk_mask_examples():
    assert np.array_equal(topk_mask(np.array([[3, 1], [2, 4]]), 2), [[1, 0], [0, 1]])
    assert np.array_equal(topk_mask(np.arange(6).reshape(2, 3), 6), np.ones((2, 3)))
    assert np.array_equal(topk_mask(np.array([[1, 1]]), 1), [[1, 0]])
    with pytest.raises(ValueError):
        topk_mask(np.ones((2, 2)), 0)
    with pytest.raises(ValueError):
        topk_mask(np.ones((2, 2)), 5)


@pytest.mark.parametrize("kind", UNIT_KINDS)
def test_parameter_count_matches_cost_model(kind):
    from fieldattn import cost_model

    unit = make_unit(kind, 15, 2, 8, d=20)
    # the cost model counts weights and biases; Dice gate parameters are extra
    n = sum(p.size for name, p in unit.params.items() if not name.startswith("dice."))
    assert n == cost_model(kind, 15, 2, 8, d=20).param_count
