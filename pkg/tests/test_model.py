import numpy as np
import pytest

from madapt.autodiff import ShapeError, Tensor, grad_check, tensor_sum
from madapt.losses import cross_entropy
from madapt.model import DualDomainModel, ModelConfig, question_lengths, warm_start_target_head

from helpers import TOY, toy_batch


@pytest.fixture
def model():
    return DualDomainModel(TOY, seed=3)


def test_desk_config_has_about_two_hundred_thousand_parameters():
    n = DualDomainModel(ModelConfig.desk(), seed=0).num_parameters()
    assert 150_000 <= n <= 250_000


def test_config_rejects_nonpositive_dims():
    with pytest.raises(ValueError):
        ModelConfig.desk(d_e=0)


def test_question_lengths():
    toks = np.array([[3, 4, 0, 0], [5, 0, 0, 0], [1, 2, 3, 4]])
    np.testing.assert_array_equal(question_lengths(toks), [2, 1, 4])


def test_empty_question_rejected(model):
    with pytest.raises(ValueError):
        model.encode_question(np.array([[0, 0, 0]]))


def test_question_too_long_rejected(model):
    with pytest.raises(ShapeError):
        model.encode_question(np.ones((1, TOY.max_question_len + 1), dtype=np.int64))


def test_padded_question_equals_unpadded(model):
    q_pad = model.encode_question(np.array([[3, 5, 0, 0]])).data
    q_raw = model.encode_question(np.array([[3, 5]])).data
    np.testing.assert_array_equal(q_pad, q_raw)


def test_batched_question_encoding_matches_rows(model):
    toks = np.array([[3, 5, 7], [2, 0, 0]])
    both = model.encode_question(toks).data
    np.testing.assert_allclose(both[0], model.encode_question(toks[0]).data, rtol=1e-12)
    np.testing.assert_allclose(both[1], model.encode_question(np.array([2])).data, rtol=1e-12)


def test_single_token_zero_gru_gives_zero_state(model):
    for p in model.gru.parameters():
        p.data = np.zeros_like(p.data)
    q = model.encode_question(np.array([4]))
    np.testing.assert_array_equal(q.data, 0.0)


def test_encode_visual_is_composition_of_parts(model):
    rng = np.random.default_rng(0)
    q = rng.normal(size=TOY.d_q)
    regions = rng.normal(size=(TOY.n_regions, TOY.d_v))
    grid = rng.normal(size=(TOY.n_grid, TOY.d_v))
    v = model.encode_visual(Tensor(q), Tensor(regions), Tensor(grid)).data
    proj = np.tanh(regions @ model.region_proj.weight.data.T + model.region_proj.bias.data)
    _, pooled = model.attention(Tensor(q), Tensor(proj))
    g = model.grid_proj.weight.data @ np.concatenate([grid.mean(axis=0), q]) + model.grid_proj.bias.data
    np.testing.assert_allclose(v, np.concatenate([pooled.data, np.tanh(g)]), rtol=1e-12)


def test_encode_visual_rejects_bad_width(model):
    with pytest.raises(ShapeError):
        model.encode_visual(Tensor(np.ones(TOY.d_q)), Tensor(np.ones((2, TOY.d_v + 1))), Tensor(np.ones((2, TOY.d_v))))


def test_fuse_is_hadamard_of_projections(model):
    rng = np.random.default_rng(1)
    q, v = rng.normal(size=(2, TOY.d_q)), rng.normal(size=(2, TOY.d_region + TOY.d_grid))
    pq = q @ model.fuse_q.weight.data.T + model.fuse_q.bias.data
    pv = v @ model.fuse_v.weight.data.T + model.fuse_v.bias.data
    np.testing.assert_allclose(model.fuse(Tensor(q), Tensor(v)).data, pq * pv, rtol=1e-12)


def test_fuse_annihilator_and_identity(model):
    q, v = Tensor(np.ones((1, TOY.d_q))), Tensor(np.ones((1, TOY.d_region + TOY.d_grid)))
    model.fuse_v.weight.data[:] = 0.0
    model.fuse_v.bias.data[:] = 1.0
    np.testing.assert_allclose(model.fuse(q, v).data, model.fuse_q(q).data)
    model.fuse_q.weight.data[:] = 0.0
    model.fuse_q.bias.data[:] = 0.0
    np.testing.assert_array_equal(model.fuse(q, v).data, 0.0)


def test_classify_dims_and_unknown_domain(model):
    e = Tensor(np.ones((2, TOY.d_e)))
    assert model.classify(e, "source").shape == (2, TOY.n_answers_source)
    assert model.classify(e, "target").shape == (2, TOY.n_answers_target)
    with pytest.raises(ValueError):
        model.classify(e, "elsewhere")


def test_predict_answer_ties_go_to_lowest_index(model):
    for layer in model.cls_source.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    assert model.predict_answer(Tensor(np.ones(TOY.d_e)), "source") == 0
    model.cls_source.layers[-1].bias.data[:] = [0.1, 0.9, 0.3]
    assert model.predict_answer(Tensor(np.ones(TOY.d_e)), "source") == 1


def test_discriminator_zero_params_gives_half(model):
    for p in model.disc.parameters():
        p.data = np.zeros_like(p.data)
    p = model.discriminate(Tensor(np.ones((3, TOY.d_e))), 0.5)
    np.testing.assert_array_equal(p.data, 0.5)


def test_discriminator_forward_does_not_depend_on_lambda(model):
    e = Tensor(np.random.default_rng(2).normal(size=(3, TOY.d_e)))
    a = model.discriminate(e, 0.0).data
    b = model.discriminate(e, 7.0).data
    c = model.discriminate(e, None).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    assert ((a > 0) & (a < 1)).all()


def test_discriminator_gradient_flips_and_scales(model):
    e_val = np.random.default_rng(3).normal(size=(3, TOY.d_e))

    def grad_wrt_e(coeff):
        e = Tensor(e_val.copy(), requires_grad=True)
        tensor_sum(model.discriminate(e, coeff)).backward()
        return e.grad

    np.testing.assert_allclose(grad_wrt_e(0.3), -0.3 * grad_wrt_e(None), rtol=1e-12, atol=1e-15)


def test_encoders_are_shared_between_domains(model):
    rng = np.random.default_rng(4)
    b = toy_batch(rng)
    enc = model.encode(b)
    loss = cross_entropy(model.classify(enc.e, "source"), b.labels) + cross_entropy(
        model.classify(enc.e, "target"), b.labels % TOY.n_answers_target
    )
    loss.backward()
    # one stored tensor per encoder parameter, reached from both heads
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert model.gru.W_z.grad is not None


def test_full_model_gradient_check_two_samples(model):
    rng = np.random.default_rng(5)
    b = toy_batch(rng, n=2)

    def loss(*_):
        enc = model.encode(b)
        return cross_entropy(model.classify(enc.e, "source"), b.labels) + tensor_sum(
            model.discriminate(enc.e, None)
        )

    assert grad_check(loss, model.parameters()) < 1e-5


def test_clone_is_independent(model):
    other = model.clone()
    other.fuse_q.bias.data = other.fuse_q.bias.data + 1.0
    assert not np.array_equal(other.fuse_q.bias.data, model.fuse_q.bias.data)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), model.clone().named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)


def test_warm_start_copies_shared_answer_rows(model):
    src_answers = ["yes", "no", "cat"]
    tgt_answers = ["cat", "unanswerable"]
    fresh_row = model.cls_target.layers[-1].weight.data[1].copy()
    shared = warm_start_target_head(model, src_answers, tgt_answers)
    assert shared == 1
    np.testing.assert_array_equal(model.cls_target.layers[-1].weight.data[0], model.cls_source.layers[-1].weight.data[2])
    np.testing.assert_array_equal(model.cls_target.layers[-1].bias.data[0], model.cls_source.layers[-1].bias.data[2])
    np.testing.assert_array_equal(model.cls_target.layers[-1].weight.data[1], fresh_row)
    np.testing.assert_array_equal(model.cls_target.layers[0].weight.data, model.cls_source.layers[0].weight.data)
