"""Tensor op catalog: forward oracles, backward finite differences, stop-gradient."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfreid import autograd as ag
from hfreid.autograd import Tensor


def test_softmax_symmetry():
    out = ag.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = ag.softmax(Tensor(rng.uniform(-3, 3, (5, 7))))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-9)


def test_l2norm_345():
    assert ag.l2_norm(Tensor([[3.0, 4.0]])).data[0] == pytest.approx(5.0)


def test_matmul_backward_finite_difference():
    rng = np.random.default_rng(1)
    a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
    report = ag.grad_check(lambda: ag.sum_(ag.mul(ag.matmul(a, b), ag.matmul(a, b))),
                           {"a": a, "b": b})
    assert report.max_rel_error < 1e-6


def test_grad_check_square_at_three():
    x = Tensor([3.0], requires_grad=True)
    report = ag.grad_check(lambda: ag.sum_(ag.mul(x, x)), {"x": x})
    x.zero_grad()
    ag.sum_(ag.mul(x, x)).backward()
    assert x.grad[0] == pytest.approx(6.0, abs=1e-8)
    assert report.max_rel_error < 1e-7


def test_grad_of_softmax_sum_is_zero():
    x = Tensor(np.array([0.3, -1.2, 0.7]), requires_grad=True)
    ag.sum_(ag.softmax(x)).backward()
    np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-9)


@pytest.mark.parametrize("op", [
    lambda t: ag.exp(t),
    lambda t: ag.log(ag.add(ag.mul(t, t), Tensor(np.full((3, 4), 1.5)))),
    lambda t: ag.tanh(t),
    lambda t: ag.relu(ag.add(t, Tensor(np.full((3, 4), 0.05)))),
    lambda t: ag.gelu(t),
    lambda t: ag.softmax(t),
    lambda t: ag.log_softmax(t),
    lambda t: ag.mean(t, axis=0),
    lambda t: ag.l2_norm(t),
    lambda t: ag.normalize_rows(t),
    lambda t: ag.scale(t, -2.5),
    lambda t: ag.reshape(t, (4, 3)),
    lambda t: ag.transpose(t, (1, 0)),
    lambda t: ag.expand(t, 0, 3),
    lambda t: ag.take(t, [2, 0], axis=0),
])
def test_op_catalog_gradients(op):
    rng = np.random.default_rng(7)
    t = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(0.5, 1.5, op(t).shape))  # break symmetries in the loss
    report = ag.grad_check(lambda: ag.sum_(ag.mul(op(t), ag.mul(op(t), w))), {"t": t})
    assert report.max_rel_error < 1e-4


def test_layer_norm_and_attention_gradients():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(-1, 1, (2, 5, 6)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, 6), requires_grad=True)

    def loss():
        ln = ag.layer_norm(x, g, b)
        att = ag.attention(ln, ln, ln)
        return ag.sum_(ag.mul(att, att))

    report = ag.grad_check(loss, {"x": x, "g": g, "b": b})
    assert report.max_rel_error < 1e-4


def test_euclidean_matches_norm_of_difference():
    rng = np.random.default_rng(9)
    a = Tensor(rng.uniform(-1, 1, (4, 6)))
    b = Tensor(rng.uniform(-1, 1, (4, 6)))
    d = ag.euclidean(a, b)
    np.testing.assert_allclose(d.data, np.linalg.norm(a.data - b.data, axis=-1),
                               atol=1e-12)


def test_shape_mismatch_names_op():
    with pytest.raises(ag.ShapeError) as exc:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "matmul" in str(exc.value)


def test_nonfinite_result_is_error():
    with pytest.raises(ag.NumericError):
        ag.log(Tensor([0.0]))


def test_stop_gradient_forward_identity():
    sg = ag.stop_gradient(Tensor([1.0, 2.0], requires_grad=True))
    np.testing.assert_array_equal(sg.data, [1.0, 2.0])


def test_stop_gradient_blocks_backward():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    ag.sum_(ag.stop_gradient(x)).backward()
    assert x.grad is None or not np.any(x.grad)


def test_stop_gradient_product_rule():
    # d/dx sum(x * sg(x)) = sg(x), not 2x
    x = Tensor([1.5, -0.5, 2.0], requires_grad=True)
    ag.sum_(ag.mul(x, ag.stop_gradient(x))).backward()
    np.testing.assert_allclose(x.grad, x.data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=8))
def test_softmax_sums_to_one_property(vals):
    out = ag.softmax(Tensor(np.array(vals)))
    assert abs(out.data.sum() - 1.0) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_concat_gather_roundtrip_gradients(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1, 1, (2, 3, 4)), requires_grad=True)

    def loss():
        idx = np.array([[1, 0], [2, 1]])
        sub = ag.gather_batch(a, idx)
        cat = ag.concat([sub, sub], axis=1)
        return ag.sum_(ag.mul(cat, cat))

    assert ag.grad_check(loss, {"a": a}).max_rel_error < 1e-4
