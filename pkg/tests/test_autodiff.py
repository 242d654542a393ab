import math

import numpy as np
import pytest

from sentorder import autodiff as ad
from sentorder.autodiff import Tape, Tensor, grad_check, zero_grads
from sentorder.errors import FatalError
from sentorder.gradcheck import OP_TOLERANCE, _op_checks


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Forward values


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]))
    assert out.data.tolist() == [0.5, 0.5]


def test_softmax_rows_sum_to_one():
    x = Tensor(rng(1).normal(scale=30.0, size=(8, 11)))
    sums = ad.softmax(x).data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() <= 1e-12


def test_softmax_is_stable_for_huge_logits():
    out = ad.softmax(Tensor([[1e6, 1e6 - 1.0]]))
    assert np.all(np.isfinite(out.data))


def test_cross_entropy_uniform_logits_is_ln3():
    value = ad.cross_entropy_with_soft_targets(
        Tensor([0.0, 0.0, 0.0]), np.asarray([0.8, 0.1, 0.1])
    ).item()
    assert abs(value - math.log(3.0)) <= 1e-9


def test_cross_entropy_perfect_prediction_tends_to_zero():
    value = ad.cross_entropy_with_soft_targets(
        Tensor([60.0, 0.0, 0.0]), np.asarray([1.0, 0.0, 0.0])
    ).item()
    assert value < 1e-9


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.cross_entropy_with_soft_targets(Tensor([0.0, 0.0]), np.asarray([1.0, 0.0, 0.0]))


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), eps=1e-12)
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_normalizes():
    x = Tensor(rng(2).normal(size=(5, 9)))
    y = ad.layer_norm(x).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-12
    assert np.abs(y.std(axis=-1) - 1.0).max() < 1e-6


def test_dropout_eval_is_identity():
    x = Tensor(rng(3).normal(size=(4, 4)))
    assert ad.dropout(x, 0.5, rng(4), train=False) is x
    assert ad.dropout(x, 0.0, rng(4), train=True) is x


def test_dropout_train_scales_kept_values():
    x = Tensor(np.ones((200, 200)))
    y = ad.dropout(x, 0.25, rng(5), train=True).data
    kept = y != 0.0
    assert abs(kept.mean() - 0.75) < 0.01
    assert np.allclose(y[kept], 1.0 / 0.75)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\) vs \(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_gelu_variants_are_close_but_distinct():
    x = Tensor(np.linspace(-3, 3, 41))
    approx = ad.gelu(x).data
    exact = ad.gelu(x, exact=True).data
    assert np.abs(approx - exact).max() < 2e-3
    assert not np.array_equal(approx, exact)


def test_embedding_lookup_forward():
    table = Tensor([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    out = ad.embedding_lookup(table, np.asarray([[2, 0], [1, 1]]))
    assert out.data.shape == (2, 2, 2)
    assert out.data[0, 0].tolist() == [4.0, 5.0]


# ---------------------------------------------------------------------------
# Backward correctness


@pytest.mark.parametrize("case", _op_checks(np.random.default_rng(3)), ids=lambda c: c[0])
def test_each_op_matches_finite_differences(case):
    name, f, point = case
    assert grad_check(f, point, eps=1e-5) < OP_TOLERANCE


def test_grad_check_on_quadratic():
    point = Tensor([1.0, 2.0])
    err = grad_check(lambda x: ad.sum_(ad.mul(x, x)), point, eps=1e-5)
    assert err < 1e-9
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        tape.backward(ad.sum_(ad.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_grad_check_cross_entropy_logits():
    f = lambda x: ad.cross_entropy_with_soft_targets(x, np.asarray([0.2, 0.3, 0.5, 0.0, 0.0]))
    assert grad_check(f, Tensor(rng(6).normal(size=(5,))), eps=1e-5) < 1e-7


@pytest.mark.filterwarnings("ignore:overflow")
def test_grad_check_flags_non_finite():
    point = Tensor([1e200])
    with pytest.raises(FatalError, match="coordinate 0"):
        grad_check(lambda x: ad.sum_(ad.mul(x, x)), point)


def test_embedding_lookup_accumulates_duplicate_rows():
    table = Tensor(rng(7).normal(size=(3, 2)))
    with Tape() as tape:
        out = ad.sum_(ad.embedding_lookup(table, np.asarray([0, 0, 1])))
        tape.backward(out)
    assert np.array_equal(table.grad, [[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])


def test_reused_tensor_accumulates_gradient():
    x = Tensor([3.0])
    with Tape() as tape:
        tape.backward(ad.sum_(ad.add(ad.mul(x, 2.0), ad.mul(x, 5.0))))
    assert np.array_equal(x.grad, [7.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


def test_no_tape_means_no_graph():
    tape = Tape()
    with tape:
        ad.mul(Tensor([1.0]), Tensor([2.0]))
    n_inside = len(tape)
    ad.mul(Tensor([1.0]), Tensor([2.0]))
    assert n_inside == 1 and len(tape) == 1


def test_zero_grads():
    x = Tensor([1.0])
    with Tape() as tape:
        tape.backward(ad.sum_(ad.mul(x, x)))
    assert x.grad is not None
    zero_grads([x])
    assert x.grad is None


def test_constants_do_not_receive_gradients():
    x = Tensor([2.0])
    with Tape() as tape:
        tape.backward(ad.sum_(ad.mul(x, np.asarray([4.0]))))
    assert np.array_equal(x.grad, [4.0])


def test_forward_backward_determinism():
    def run():
        r = rng(8)
        x = Tensor(r.normal(size=(6, 6)))
        w = Tensor(r.normal(size=(6, 6)))
        with Tape() as tape:
            y = ad.sum_(ad.softmax(ad.matmul(ad.gelu(x), w)))
            tape.backward(y)
        return y.item(), x.grad.copy(), w.grad.copy()

    v1, gx1, gw1 = run()
    v2, gx2, gw2 = run()
    assert v1 == v2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_unbroadcast_add_shapes():
    a = Tensor(rng(9).normal(size=(4, 1)))
    b = Tensor(rng(10).normal(size=(1, 5)))
    with Tape() as tape:
        tape.backward(ad.sum_(ad.add(a, b)))
    assert a.grad.shape == (4, 1) and np.allclose(a.grad, 5.0)
    assert b.grad.shape == (1, 5) and np.allclose(b.grad, 4.0)


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        ad.dropout(Tensor([1.0]), 1.0, rng(0), train=True)
