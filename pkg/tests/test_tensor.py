import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipdistill import tensor as T
from lipdistill.tensor import Tensor, Tape


def test_add_componentwise():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_identity():
    x = Tensor([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(T.mul(x, Tensor(np.ones((2, 2)))).data, x.data)


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.item() == 11.0


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a = Tensor(rng.uniform(-1, 1, (3, 4)))
    b = Tensor(rng.uniform(-1, 1, (4, 2)))
    tgt = Tensor(rng.uniform(-1, 1, (3, 2)))
    rep = T.finite_diff_check(lambda: T.reduce_sum(T.mul(T.matmul(a, b), tgt)), [a, b])
    assert rep.passed, rep.max_rel_err


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_reduce_examples():
    assert T.reduce("mean", Tensor([1.0, 2.0, 3.0]), 0).data.item() == 2.0
    assert T.reduce("sum", Tensor(np.zeros((4, 4)))).data.item() == 0.0
    assert T.reduce("max", Tensor([-1.0, 5.0, 2.0])).data.item() == 5.0
    with pytest.raises(ValueError):
        T.reduce_sum(Tensor([1.0]), axis=3)
    with pytest.raises(ValueError):
        T.reduce("median", Tensor([1.0]))


def test_softmax_symmetry_and_stability():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.array_equal(big, [0.5, 0.5])


def test_softmax_hand_value():
    out = T.softmax(Tensor([0.0, np.log(3.0)])).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        T.softmax(Tensor([np.nan, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_softmax_rows_sum_to_one(logits):
    row = T.softmax(Tensor(logits)).data
    assert abs(row.sum() - 1.0) < 1e-12
    assert np.all(row > 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-2 ** 20, 2 ** 20), min_size=2, max_size=5),
       st.integers(-8, 8))
def test_softmax_shift_invariance_bitwise(grid, shift_pow):
    # dyadic inputs and power-of-two shifts add exactly, so the stabilized
    # softmax must match bit for bit
    logits = np.array(grid, dtype=np.float64) / 2 ** 16
    c = float(2.0 ** shift_pow)
    a = T.softmax(Tensor(logits)).data
    b = T.softmax(Tensor(logits + c)).data
    assert np.array_equal(a, b)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(1)
    x = rng.uniform(-5, 5, (3, 7))
    assert np.allclose(T.log_softmax(Tensor(x)).data,
                       np.log(T.softmax(Tensor(x)).data), atol=1e-12)


def test_backward_square():
    with Tape() as tape:
        x = Tensor(3.0)
        tape.watch(x)
        y = T.mul(x, x)
    assert tape.backward(y).wrt(x) == 6.0


def test_backward_fanout_accumulates():
    with Tape() as tape:
        a = Tensor([1.0, 2.0])
        tape.watch(a)
        s = T.reduce_sum(T.add(a, a))
    assert np.array_equal(tape.backward(s).wrt(a), [2.0, 2.0])


def test_backward_requires_scalar():
    with Tape() as tape:
        a = Tensor([1.0, 2.0])
        tape.watch(a)
        y = T.mul(a, a)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_untouched_leaf_gets_zeros():
    with Tape() as tape:
        a = Tensor([1.0, 2.0])
        b = Tensor([[3.0, 4.0]])
        tape.watch(a, b)
        s = T.reduce_sum(a)
    grads = tape.backward(s)
    assert np.array_equal(grads.wrt(b), np.zeros((1, 2)))


def test_tape_linearity():
    rng = np.random.default_rng(2)
    xv = rng.uniform(-1, 1, (4,))

    def build(tape, x):
        l1 = T.reduce_sum(T.mul(x, x))
        l2 = T.reduce_sum(T.exp(T.scale(x, 0.5)))
        return l1, l2

    with Tape() as tape:
        x = Tensor(xv.copy())
        tape.watch(x)
        l1, l2 = build(tape, x)
        total = T.add(l1, l2)
    g_sum = tape.backward(total).wrt(x)
    with Tape() as t1:
        x1 = Tensor(xv.copy())
        t1.watch(x1)
        a, _ = build(t1, x1)
    with Tape() as t2:
        x2 = Tensor(xv.copy())
        t2.watch(x2)
        _, b = build(t2, x2)
    g_parts = t1.backward(a).wrt(x1) + t2.backward(b).wrt(x2)
    assert np.allclose(g_sum, g_parts, rtol=1e-12, atol=1e-12)


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        T.log(Tensor([-1.0]))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_double_sided_broadcast_rejected():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 3))))


@pytest.mark.parametrize("shape_a,shape_b", [
    ((3, 4), ()),          # scalar
    ((2, 5, 4), (4,)),     # trailing vector (bias)
    ((2, 5, 4), (2, 1, 4)),  # middle axis expands
    ((4, 3, 3), (4, 1, 1)),  # trailing ones (gate)
])
def test_broadcast_gradients(shape_a, shape_b):
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(-1, 1, shape_a))
    b = Tensor(rng.uniform(-1, 1, shape_b))
    tgt = Tensor(rng.uniform(-1, 1, shape_a))
    rep = T.finite_diff_check(lambda: T.reduce_sum(T.mul(T.mul(a, b), tgt)), [a, b])
    assert rep.passed, rep.per_param


def test_structural_ops_gradcheck():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
    tgt4 = Tensor(rng.uniform(-1, 1, (3, 4)))

    def takes():
        return T.reduce_sum(T.mul(T.take(x, 1, 0), tgt4))

    rep = T.finite_diff_check(takes, [x])
    assert rep.passed

    tgt_slice = Tensor(rng.uniform(-1, 1, (2, 2, 4)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.slice_axis(x, 1, 0, 2), tgt_slice)), [x])
    assert rep.passed

    tgt_pad = Tensor(rng.uniform(-1, 1, (2, 5, 4)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.pad_axis(x, 1, 1, 1), tgt_pad)), [x])
    assert rep.passed

    y = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
    tgt_cat = Tensor(rng.uniform(-1, 1, (2, 6, 4)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.concat([x, y], 1), tgt_cat)), [x, y])
    assert rep.passed

    tgt_tr = Tensor(rng.uniform(-1, 1, (4, 2, 3)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.transpose(x, (2, 0, 1)), tgt_tr)), [x])
    assert rep.passed

    tgt_rs = Tensor(rng.uniform(-1, 1, (6, 4)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.reshape(x, (6, 4)), tgt_rs)), [x])
    assert rep.passed


def test_stack_gradcheck():
    rng = np.random.default_rng(5)
    xs = [Tensor(rng.uniform(-1, 1, (2, 3))) for _ in range(3)]
    tgt = Tensor(rng.uniform(-1, 1, (2, 3, 3)))
    rep = T.finite_diff_check(
        lambda: T.reduce_sum(T.mul(T.stack(xs, axis=1), tgt)), xs)
    assert rep.passed


def test_elementwise_dispatch():
    x = Tensor([0.5, 1.0])
    assert np.array_equal(T.elementwise("add", x, x).data, [1.0, 2.0])
    assert np.allclose(T.elementwise("exp", x).data, np.exp(x.data))
    assert np.array_equal(T.elementwise("scale-by-constant", x, 2.0).data, [1.0, 2.0])
    with pytest.raises(ValueError):
        T.elementwise("relu", x, x)
    with pytest.raises(ValueError):
        T.elementwise("mystery", x)


def test_dropout_modes():
    x = Tensor(np.ones((20, 20)))
    assert T.dropout(x, 0.5, None, training=False) is x
    assert T.dropout(x, 0.0, None, training=True) is x
    out = T.dropout(x, 0.5, np.random.default_rng(0), training=True)
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 2.0)  # inverted scaling
    again = T.dropout(x, 0.5, np.random.default_rng(0), training=True)
    assert np.array_equal(out.data, again.data)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, None, training=True)


def test_finite_diff_square_tight():
    x = Tensor([1.0])
    rep = T.finite_diff_check(lambda: T.reduce_sum(T.mul(x, x)), [x])
    assert rep.max_rel_err < 1e-10


def test_finite_diff_constant():
    x = Tensor([1.0, 2.0])
    rep = T.finite_diff_check(lambda: Tensor(0.5), [x])
    assert rep.max_rel_err == 0.0


def test_finite_diff_detects_nondeterminism():
    x = Tensor([1.0])
    state = {"n": 0.0}

    def f():
        state["n"] += 1.0
        return T.scale(x, state["n"])

    with pytest.raises(ValueError):
        T.finite_diff_check(f, [x])


def test_finite_diff_catches_corrupted_backward():
    x = Tensor(np.array([0.3, -0.7]))
    f = lambda: T.reduce_sum(T.tanh(x))
    assert T.finite_diff_check(f, [x]).passed
    T._debug_vjp_scale = 1.01
    try:
        assert not T.finite_diff_check(f, [x]).passed
    finally:
        T._debug_vjp_scale = 1.0


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        with Tape() as tape:
            x = Tensor(rng.uniform(-1, 1, (4, 4)))
            w = Tensor(rng.uniform(-1, 1, (4, 4)))
            tape.watch(x, w)
            y = T.reduce_sum(T.softmax(T.tanh(T.matmul(x, w))))
        g = tape.backward(y)
        return y.data.copy(), g.wrt(x).copy(), g.wrt(w).copy()

    y1, gx1, gw1 = run()
    y2, gx2, gw2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_rewatch_rejected():
    with Tape() as tape:
        x = Tensor([1.0])
        tape.watch(x)
        with pytest.raises(ValueError):
            tape.watch(x)


def test_stale_tape_tensor_is_constant():
    with Tape() as t1:
        x = Tensor([2.0])
        t1.watch(x)
        y = T.mul(x, x)
    with Tape() as t2:
        z = Tensor([3.0])
        t2.watch(z)
        w = T.mul(y, z)  # y belongs to the closed tape: constant here
        s = T.reduce_sum(w)
    grads = t2.backward(s)
    assert np.array_equal(grads.wrt(z), [4.0])
