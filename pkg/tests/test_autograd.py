import math

import numpy as np
import pytest

from b2r import autograd as ag
from b2r.autograd import ShapeError, Tensor, gradient_check


def _param(data, name="x"):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ------------------------------
# Tape and elementary ops
# ------------------------------
def test_square_gradient():
    x = _param([3.0])
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_shared_subexpression_accumulates():
    x = _param([2.0])
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(16.0)


def test_gradients_only_reach_leaves_requiring_grad():
    x = _param([1.0, 2.0])
    c = Tensor([5.0, 5.0])
    (x * c).sum().backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_broadcast_gradient_is_reduced():
    x = _param(np.ones((3, 4)))
    b = _param(np.zeros(4), "b")
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [3.0] * 4)


def test_item_requires_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_backward_needs_seed_for_non_scalars():
    with pytest.raises(ShapeError):
        (_param([1.0, 2.0]) * 2.0).backward()


def test_matmul_identity_and_shape_errors():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ag.matmul(a, Tensor(np.eye(3))).data, a.data)
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        ag.matmul(a, Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        ag.matmul(Tensor([1.0, 2.0]), a)


def test_softmax_equal_logits_uniform():
    out = ag.softmax(Tensor(np.zeros((2, 5))))
    np.testing.assert_allclose(out.data, 0.2)


def test_layer_norm_constant_input():
    out = ag.layer_norm(Tensor(np.full((2, 6), 3.7)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.max(np.abs(out.data)) < 1e-6


def test_layer_norm_rejects_bad_affine():
    with pytest.raises(ShapeError):
        ag.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_dropout_identity_when_evaluating():
    x = Tensor(np.ones(10))
    assert ag.dropout(x, 0.5, 0, training=False) is x
    out = ag.dropout(x, 0.5, mask=np.array([1, 0] * 5), training=True)
    np.testing.assert_array_equal(out.data, [2.0, 0.0] * 5)


# ------------------------------
# RoPE
# ------------------------------
def test_rope_unit_rotation():
    out = ag.apply_rope(Tensor([[0.0, 0.0], [1.0, 0.0]]), [0, 1])
    np.testing.assert_allclose(out.data[1], [math.cos(1.0), math.sin(1.0)], atol=1e-12)
    np.testing.assert_allclose(out.data[1], [0.54030, 0.84147], atol=1e-5)


def test_rope_position_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 8))
    np.testing.assert_array_equal(ag.apply_rope(Tensor(x), [0]).data, x)


def test_rope_preserves_pair_norms():
    x = np.random.default_rng(1).normal(size=(5, 8))
    out = ag.apply_rope(Tensor(x), np.arange(5)).data
    before = np.hypot(x[:, 0::2], x[:, 1::2])
    after = np.hypot(out[:, 0::2], out[:, 1::2])
    np.testing.assert_allclose(after, before, atol=1e-12)


def test_rope_inner_products_depend_only_on_offset():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        p1, p2, shift = (int(v) for v in rng.integers(0, 50, size=3))
        base = ag.apply_rope(Tensor(q), [p1]).data @ ag.apply_rope(Tensor(k), [p2]).data.T
        moved = (
            ag.apply_rope(Tensor(q), [p1 + shift]).data
            @ ag.apply_rope(Tensor(k), [p2 + shift]).data.T
        )
        assert abs(base.item() - moved.item()) <= 1e-9


def test_rope_odd_dimension():
    with pytest.raises(ShapeError):
        ag.apply_rope(Tensor(np.ones((2, 3))), [0, 1])


# ------------------------------
# Attention
# ------------------------------
def test_attention_single_key_returns_value():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
    np.testing.assert_allclose(ag.causal_attention(q, k, v).data, v.data)


def test_attention_is_causal():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    before = ag.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    k2, v2 = k.copy(), v.copy()
    k2[3:] += 10.0
    v2[3:] -= 7.0
    after = ag.causal_attention(Tensor(q), Tensor(k2), Tensor(v2)).data
    np.testing.assert_allclose(after[:3], before[:3], atol=1e-12)


def test_attention_uniform_scores_give_running_mean():
    v = np.random.default_rng(5).normal(size=(4, 3))
    out = ag.causal_attention(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))), Tensor(v)).data
    expected = np.cumsum(v, axis=0) / np.arange(1, 5)[:, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)


# ------------------------------
# Finite differences
# ------------------------------
def test_gradient_check_square():
    x = _param([3.0])
    report = gradient_check(lambda: (x * x).sum(), {"x": x}, h=1e-5, tol=1e-6)
    assert report.passed
    assert report.checked == 1


def test_gradient_check_detects_wrong_gradient():
    x = _param([1.0, 2.0])

    def broken():
        y = x * x
        return ag.Tensor(y.data.sum(), requires_grad=True, _parents=(x,),
                         _backward=lambda g: (g * 3.0 * np.ones(2),), op="broken")

    report = gradient_check(broken, [x])
    assert not report.passed
    assert report.failures[0].param == "x"


def _off_by(x, true_slope, error):
    def broken():
        return ag.Tensor((x * true_slope).data.sum(), requires_grad=True, _parents=(x,),
                         _backward=lambda g: (g * (true_slope + error) * np.ones(x.shape),),
                         op="broken")
    return broken


def test_small_gradients_are_held_to_relative_tolerance():
    x = _param(np.linspace(-1.0, 1.0, 4))
    report = gradient_check(_off_by(x, 1e-5, 1e-8), [x])
    assert not report.passed
    assert report.failures[0].rel_error == pytest.approx(1e-3, rel=1e-2)


def test_sampled_coordinates_cover_the_whole_tensor():
    x = _param(np.zeros(200))
    report = gradient_check(_off_by(x, 1.0, 0.5), {"x": x}, max_coords=5, seed=3)
    assert report.checked == 5
    indices = [f.index[0] for f in report.failures]
    assert len(set(indices)) == 5
    assert max(indices) >= 5
    again = gradient_check(_off_by(x, 1.0, 0.5), {"x": x}, max_coords=5, seed=3)
    assert [f.index for f in again.failures] == [f.index for f in report.failures]


def test_max_coords_beyond_size_checks_everything():
    x = _param(np.ones(3))
    assert gradient_check(lambda: (x * x).sum(), [x], max_coords=10).checked == 3


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: ag.tanh(ag.matmul(a, b)).sum(),
        lambda a, b: ag.gelu(ag.matmul(a, b)).mean(),
        lambda a, b: (ag.softmax(ag.matmul(a, b)) * ag.matmul(a, b)).sum(),
        lambda a, b: ag.log(ag.exp(ag.clip(ag.matmul(a, b), -0.5, 0.5)) + 1.0).sum(),
        lambda a, b: ag.concat([a, ag.transpose(b)], axis=0).reshape(-1)[2:9].sum(),
    ],
)
def test_primitive_gradients(fn):
    rng = np.random.default_rng(6)
    a = _param(rng.normal(size=(3, 4)), "a")
    b = _param(rng.normal(size=(4, 3)) * 0.5, "b")
    report = gradient_check(lambda: fn(a, b), {"a": a, "b": b}, h=1e-6, tol=1e-5)
    assert report.passed, report.failures[:3]


def test_layer_norm_and_attention_gradients():
    rng = np.random.default_rng(7)
    x = _param(rng.normal(size=(2, 4, 6)), "x")
    gamma = _param(rng.normal(size=6), "gamma")
    beta = _param(rng.normal(size=6), "beta")
    w = Tensor(rng.normal(size=(2, 4, 6)))

    def f():
        h = ag.layer_norm(x, gamma, beta)
        q = ag.apply_rope(h, np.arange(4))
        return (ag.causal_attention(q, h, h) * w).sum()

    report = gradient_check(f, {"x": x, "gamma": gamma, "beta": beta}, h=1e-6, tol=1e-5)
    assert report.passed, report.failures[:3]


def test_embed_lookup_gradient():
    table = _param(np.random.default_rng(8).normal(size=(5, 3)), "table")
    out = ag.embed_lookup(table, [1, 1, 4])
    out.sum().backward()
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 0, 1])
    with pytest.raises(ShapeError):
        ag.embed_lookup(table, [5])
