import numpy as np
import pytest

from madapt.autodiff import ShapeError, Tensor, grad_check, tensor_sum
from madapt.layers import MLP, AttentionHead, Embedding, GRUCell, Linear, attention_pool, gru_step

import oracles


def test_linear_matches_affine_map():
    rng = np.random.default_rng(0)
    layer = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ layer.weight.data.T + layer.bias.data, rtol=1e-12)


def test_linear_rejects_wrong_width():
    layer = Linear(4, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((2, 5))))


def test_linear_gradient():
    rng = np.random.default_rng(1)
    layer = Linear(3, 2, rng)
    x = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(lambda x, w, b: tensor_sum(layer(x).tanh()), [x, layer.weight, layer.bias]) < 1e-7


def test_embedding_padding_row_is_zero_and_gets_no_gradient():
    emb = Embedding(6, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(emb.rows.data[0], 0.0)
    out = emb(np.array([0, 2, 2]))
    tensor_sum(out).backward()
    np.testing.assert_array_equal(emb.rows.grad[0], 0.0)
    np.testing.assert_array_equal(emb.rows.grad[2], 2.0)


def test_embedding_rejects_out_of_range_token():
    emb = Embedding(6, 3, np.random.default_rng(0))
    with pytest.raises(IndexError):
        emb(np.array([6]))


def _gru_dicts(cell):
    W = {g: getattr(cell, f"W_{g}").data for g in "zrh"}
    U = {g: getattr(cell, f"U_{g}").data for g in "zrh"}
    b = {g: getattr(cell, f"b_{g}").data for g in "zrh"}
    return W, U, b


def test_gru_step_matches_oracle():
    rng = np.random.default_rng(3)
    cell = GRUCell(4, 5, rng)
    for g in "zrh":
        getattr(cell, f"b_{g}").data = rng.normal(size=5)
    W, U, b = _gru_dicts(cell)
    x, h = rng.normal(size=4), rng.normal(size=5)
    ref = oracles.gru_step(x, h, W, U, b)
    out = gru_step(cell, Tensor(x.reshape(1, 4)), Tensor(h.reshape(1, 5)))
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-12, atol=1e-14)


def test_gru_unrolled_three_steps_matches_oracle():
    rng = np.random.default_rng(4)
    cell = GRUCell(3, 4, rng)
    W, U, b = _gru_dicts(cell)
    xs = rng.normal(size=(3, 3))
    h_ref = np.zeros(4)
    h = Tensor(np.zeros((1, 4)))
    for t in range(3):
        h_ref = oracles.gru_step(xs[t], h_ref, W, U, b)
        h = cell(Tensor(xs[t : t + 1]), h)
    np.testing.assert_allclose(h.data[0], h_ref, rtol=1e-12, atol=1e-14)


def test_gru_zero_parameters_halve_state():
    cell = GRUCell(2, 3, np.random.default_rng(0))
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)
    h = np.array([[0.4, -1.0, 2.0]])
    out = cell(Tensor(np.ones((1, 2))), Tensor(h))
    np.testing.assert_allclose(out.data, 0.5 * h)


def test_gru_gradient_through_time():
    rng = np.random.default_rng(5)
    cell = GRUCell(2, 3, rng)
    xs = rng.normal(size=(3, 1, 2))

    def loss(*_):
        h = Tensor(np.zeros((1, 3)))
        for t in range(3):
            h = cell(Tensor(xs[t]), h)
        return tensor_sum(h * h)

    assert grad_check(loss, cell.parameters()) < 1e-6


def test_attention_weights_form_distribution_and_pool_matches_manual():
    rng = np.random.default_rng(6)
    head = AttentionHead(4, 3, 5, rng)
    q, regions = rng.normal(size=4), rng.normal(size=(6, 3))
    w, pooled = attention_pool(head, Tensor(q), Tensor(regions))
    assert w.shape == (6,)
    assert w.data.sum() == pytest.approx(1.0, abs=1e-12)
    hq = head.query.weight.data @ q + head.query.bias.data
    s = np.array([head.score.data @ np.tanh(head.key.weight.data @ r + hq) for r in regions])
    ref_w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(w.data, ref_w, rtol=1e-12)
    np.testing.assert_allclose(pooled.data, ref_w @ regions, rtol=1e-12)


def test_attention_single_region_returns_it():
    rng = np.random.default_rng(7)
    head = AttentionHead(2, 3, 4, rng)
    r = rng.normal(size=(1, 3))
    w, pooled = attention_pool(head, Tensor(rng.normal(size=2)), Tensor(r))
    np.testing.assert_array_equal(w.data, [1.0])
    np.testing.assert_allclose(pooled.data, r[0], rtol=1e-15)


def test_attention_identical_regions_pool_to_common_value():
    rng = np.random.default_rng(8)
    head = AttentionHead(2, 3, 4, rng)
    r = np.tile(rng.normal(size=3), (5, 1))
    _, pooled = attention_pool(head, Tensor(rng.normal(size=2)), Tensor(r))
    np.testing.assert_allclose(pooled.data, r[0], rtol=1e-12)


def test_mlp_forward_and_state_roundtrip():
    rng = np.random.default_rng(9)
    mlp = MLP([3, 4, 2], ["tanh", "identity"], rng)
    x = rng.normal(size=(2, 3))
    l1, l2 = mlp.layers
    ref = np.tanh(x @ l1.weight.data.T + l1.bias.data) @ l2.weight.data.T + l2.bias.data
    np.testing.assert_allclose(mlp(Tensor(x)).data, ref, rtol=1e-12)
    other = MLP([3, 4, 2], ["tanh", "identity"], np.random.default_rng(99))
    other.load_state_dict(mlp.state_dict())
    np.testing.assert_array_equal(other(Tensor(x)).data, mlp(Tensor(x)).data)


def test_load_state_dict_rejects_bad_shape_without_side_effects():
    rng = np.random.default_rng(10)
    mlp = MLP([3, 4, 2], ["tanh", "identity"], rng)
    before = mlp.state_dict()
    bad = dict(before)
    bad["layers.1.weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        mlp.load_state_dict(bad)
    for k, v in mlp.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
