import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from reliavatar import numcore as nc
from reliavatar.numcore import Graph, Tensor


def param64(a):
    return Tensor(a, requires_grad=True, dtype=np.float64)


# ---------------------------------------------------------------- forward ops

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nc.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_l1_value():
    assert nc.l1(Tensor([1.0, 3.0]), Tensor([2.0, 1.0])).item() == pytest.approx(1.5)


def test_layer_norm_matches_formula(f64, rng):
    x = rng.normal(size=(5, 7))
    g, b = rng.normal(size=7), rng.normal(size=7)
    out = nc.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-12)


@pytest.mark.parametrize("op", [nc.add, nc.sub, nc.mul])
def test_elementwise_shape_errors_name_op_and_shapes(op):
    with pytest.raises(nc.ShapeError) as e:
        op(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    msg = str(e.value)
    assert op.__name__ in msg and "(2, 3)" in msg and "(3, 2)" in msg


def test_matmul_shape_error():
    with pytest.raises(nc.ShapeError, match="matmul"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_bias_add_is_the_only_broadcast():
    x = Tensor(np.ones((4, 3)))
    assert nc.add(x, Tensor([1.0, 2.0, 3.0])).shape == (4, 3)
    with pytest.raises(nc.ShapeError):
        nc.add(x, Tensor(np.ones((4, 1))))


def test_float32_default_preserved():
    x = Tensor(np.ones((2, 3)))
    assert x.dtype == np.float32
    y = nc.sigmoid(nc.layer_norm(x * 2.0 + 1.0, Tensor(np.ones(3)), Tensor(np.zeros(3))))
    assert y.dtype == np.float32
    assert nc.attention(Tensor(np.ones((4, 12))), 2).dtype == np.float32


# ---------------------------------------------------------------- backward

def test_backward_sum_of_squares():
    x = param64([1.0, 2.0, 3.0])
    with Graph() as g:
        loss = nc.sum_(nc.mul(x, x))
    nc.backward(g, loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_l1_linear_vs_finite_differences(f64, rng):
    W, x = param64(rng.normal(size=(4, 5))), param64(rng.normal(size=(5, 1)))
    y = rng.normal(size=(4, 1))
    err = nc.grad_check(lambda W, x: nc.l1(nc.matmul(W, x), y), [W, x])
    assert err < 1e-4


def test_softmax_l1_chain_symmetric_rows(f64):
    # uniform softmax input with a target that is symmetric under swapping the two entries
    a = param64([[0.5, 0.5], [0.1, 0.9]])
    target = np.array([[0.0, 0.0], [0.3, 0.2]])
    with Graph() as g:
        loss = nc.l1(nc.softmax(a), target)
    nc.backward(g, loss)
    assert a.grad[0, 0] == pytest.approx(a.grad[0, 1])


def test_backward_accumulates_across_uses():
    x = param64([2.0])
    with Graph() as g:
        loss = nc.sum_(nc.add(nc.mul(x, x), x))
    nc.backward(g, loss)
    assert x.grad[0] == pytest.approx(5.0)
    with Graph() as g:
        loss = nc.sum_(x * 3.0)
    nc.backward(g, loss)
    assert x.grad[0] == pytest.approx(8.0)


def test_detached_and_unused_tensors_get_zero_grad():
    x, unused = param64([1.0, 2.0]), param64([5.0])
    with Graph() as g:
        loss = nc.sum_(nc.mul(nc.detach(x), param64([3.0, 3.0])))
        nc.tanh(unused)  # recorded, but does not reach the loss
    nc.backward(g, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_graph_consumed_and_scalar_errors():
    x = param64([1.0, 2.0])
    with Graph() as g:
        y = nc.mul(x, x)
        loss = nc.sum_(y)
    with pytest.raises(nc.ShapeError):
        nc.backward(g, y)
    nc.backward(g, loss)
    with pytest.raises(nc.GraphError):
        nc.backward(g, loss)
    with pytest.raises(nc.GraphError):
        with g:
            pass


def test_no_record_outside_graph():
    x = param64([1.0])
    y = nc.mul(x, x)
    assert y.node_id is None
    with Graph() as g, nc.no_record():
        nc.mul(x, x)
    assert len(g) == 0


def test_tape_inputs_precede_nodes(rng):
    x = param64(rng.normal(size=(3, 4)))
    w = param64(rng.normal(size=(5, 4)))
    with Graph() as g:
        nc.sum_(nc.tanh(nc.linear(x, w)))
    for i, node in enumerate(g.nodes):
        for t in node.inputs:
            assert t.node_id is None or t.node_id < i


# ---------------------------------------------------------------- grad_check

def test_grad_check_square_is_exact(f64):
    x = param64([3.0])
    assert nc.grad_check(lambda x: nc.sum_(nc.mul(x, x)), [x]) < 1e-9


def test_grad_check_rejects_float32():
    with pytest.raises(TypeError):
        nc.grad_check(lambda x: nc.sum_(x), [Tensor([1.0])])


def test_grad_check_detects_wrong_gradient(f64):
    def bad(a):
        out = nc._new(a.data ** 2)
        nc.record("bad", (a,), out, lambda g: (g * a.data,))  # should be 2a
        return nc.sum_(out)
    assert nc.grad_check(bad, [param64([1.0, 2.0])]) > 0.1


@pytest.mark.filterwarnings("ignore:invalid value")
def test_grad_check_non_finite():
    with pytest.raises(FloatingPointError):
        nc.grad_check(lambda x: nc.sum_(nc.sqrt(x)), [param64([-1.0])])


UNARY = [nc.sigmoid, nc.tanh, nc.softmax, lambda a: nc.affine(a, 2.5, -1.0),
         lambda a: nc.swap_last(a), lambda a: nc.reshape(a, (-1,)), lambda a: a[1:, ::2]]


@pytest.mark.parametrize("op", UNARY)
def test_unary_ops_gradients(f64, rng, op):
    a = param64(rng.normal(size=(3, 4)))
    w = rng.normal(size=op(Tensor(a.data)).shape)
    assert nc.grad_check(lambda a: nc.sum_(nc.mul(op(a), Tensor(w))), [a]) < 1e-4


def test_relu_l1_gradients_away_from_kinks(f64, rng):
    a = param64(rng.normal(size=(4, 4)))
    t = rng.normal(size=(4, 4))
    stats = {}
    err = nc.grad_check(lambda a: nc.l1(nc.relu(a), t), [a], avoid_kinks=True, stats=stats)
    assert err < 1e-4 and stats["checked"] == 16 - stats["kink_skipped"]


def test_binary_and_structural_gradients(f64, rng):
    a, b = param64(rng.normal(size=(2, 3, 4))), param64(rng.normal(size=(2, 4, 5)))
    m = param64(rng.normal(size=(4, 5)))
    bias = param64(rng.normal(size=5))
    def f(a, b, m, bias):
        p = nc.add(nc.matmul(a, b), nc.matmul(a, m))
        q = nc.concat([p, nc.sub(p, bias)], axis=1)
        r = nc.stack([q, nc.mul(q, q)], axis=0)
        return nc.mean(nc.tanh(r))
    assert nc.grad_check(f, [a, b, m, bias]) < 1e-4


def test_layer_norm_sqrt_weighted_sum_gradients(f64, rng):
    x, g, b = (param64(rng.normal(size=s)) for s in [(3, 6), 6, 6])
    def f(x, g, b):
        y = nc.layer_norm(x, g, b)
        return nc.weighted_sum([nc.mean(nc.mul(y, y)), nc.mean(nc.sqrt(nc.affine(nc.mul(x, x), 1.0, 1.0)))],
                               [0.3, 2.0])
    assert nc.grad_check(f, [x, g, b]) < 1e-4


# ---------------------------------------------------------------- fused vs composite

def gru_composite(x, h, w_ih, w_hh, bias):
    H = h.shape[-1]
    gi = nc.linear(x, w_ih, bias)
    gh = nc.linear(h, w_hh)
    z = nc.sigmoid(nc.add(gi[..., :H], gh[..., :H]))
    r = nc.sigmoid(nc.add(gi[..., H:2 * H], gh[..., H:2 * H]))
    n = nc.tanh(nc.add(gi[..., 2 * H:], nc.mul(r, gh[..., 2 * H:])))
    return nc.add(nc.mul(nc.affine(z, -1.0, 1.0), n), nc.mul(z, h))


def test_fused_gru_matches_composite(f64, rng):
    args = [param64(rng.normal(size=s)) for s in [(2, 3, 5), (2, 3, 4), (12, 5), (12, 4), 12]]
    w = rng.normal(size=(2, 3, 4))
    grads = []
    for fn in (nc.gru_cell, gru_composite):
        for a in args:
            a.grad = None
        with Graph() as g:
            loss = nc.sum_(nc.mul(fn(*args), Tensor(w)))
        nc.backward(g, loss)
        grads.append([a.grad.copy() for a in args])
        grads[-1].append(loss.data)
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def attention_loop(x, heads):
    N, W3 = x.shape
    W = W3 // 3
    dh = W // heads
    q, k, v = x[:, :W], x[:, W:2 * W], x[:, 2 * W:]
    out = np.zeros((N, W))
    for hd in range(heads):
        s = slice(hd * dh, (hd + 1) * dh)
        for i in range(N):
            scores = [sum(q[i, s][c] * k[j, s][c] for c in range(dh)) / np.sqrt(dh) for j in range(N)]
            e = np.exp(np.array(scores) - max(scores))
            wts = e / e.sum()
            for j in range(N):
                out[i, s] += wts[j] * v[j, s]
    return out


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_loop(f64, rng, heads):
    x = rng.normal(size=(5, 12))
    keep = []
    out = nc.attention(Tensor(x), heads, keep).data
    np.testing.assert_allclose(out, attention_loop(x, heads), atol=1e-12)
    np.testing.assert_allclose(keep[0].sum(-1), 1.0, atol=1e-12)


def test_attention_gradient(f64, rng):
    x = param64(rng.normal(size=(2, 5, 12)))
    w = rng.normal(size=(2, 5, 4))
    assert nc.grad_check(lambda x: nc.sum_(nc.mul(nc.attention(x, 2), Tensor(w))), [x]) < 1e-4


def test_block_and_sparse_linear_gradients(f64, rng):
    x = param64(rng.normal(size=(3, 8)))
    wb, bb = param64(rng.normal(size=(2, 3, 4))), param64(rng.normal(size=6))
    w1, w2 = param64(rng.normal(size=(2, 5))), param64(rng.normal(size=(4, 3)))
    w = rng.normal(size=(3, 6))
    assert nc.grad_check(lambda x, a, b: nc.sum_(nc.mul(nc.block_linear(x, a, b), Tensor(w))),
                         [x, wb, bb]) < 1e-4
    assert nc.grad_check(lambda x, a, c, b: nc.sum_(nc.mul(nc.sparse_linear(x, [a, c], b), Tensor(w))),
                         [x, w1, w2, bb]) < 1e-4


# ---------------------------------------------------------------- optimizer

def test_lr_schedule():
    assert nc.lr_at(5e-4, 0, 15000) == 5e-4
    assert nc.lr_at(5e-4, 14999, 15000) == 5e-4
    assert nc.lr_at(5e-4, 15000, 15000) == pytest.approx(2.5e-4)
    assert nc.lr_at(5e-4, 30000, 15000) == pytest.approx(1.25e-4)


def test_adam_zero_gradient_leaves_params():
    p = {"w": param64([1.0, -2.0])}
    st_ = nc.AdamState.init(p)
    assert nc.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert st_.step == 1


def test_adam_matches_hand_recurrence():
    p = {"w": param64([0.7])}
    st_ = nc.AdamState.init(p, base_lr=0.1)
    m = v = 0.0
    w = 0.7
    values = [w]
    for t in range(1, 3):
        nc.adam_step(p, {"w": np.array([1.0])}, st_)
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-12)
        values.append(p["w"].data[0])
    assert values[0] > values[1] > values[2]


def test_adam_skips_non_finite():
    p = {"w": param64([1.0])}
    st_ = nc.AdamState.init(p)
    assert not nc.adam_step(p, {"w": np.array([np.nan])}, st_)
    assert p["w"].data[0] == 1.0 and st_.step == 0 and st_.skipped == 1


def test_adam_lr_after_half_period():
    st_ = nc.AdamState.init({}, base_lr=5e-4, half_period=15000)
    st_.step = 15000
    assert st_.lr == pytest.approx(2.5e-4)


# ---------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(a):
    out = nc.softmax(Tensor(a, dtype=np.float64)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 5), elements=st.floats(-10, 10)))
def test_l1_symmetric_and_nonnegative(a, b):
    x = nc.l1(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
    y = nc.l1(Tensor(b, dtype=np.float64), Tensor(a, dtype=np.float64)).item()
    assert x == y and x >= 0


def test_evaluation_deterministic(rng):
    x = rng.normal(size=(6, 24)).astype(np.float32)
    a = nc.attention(Tensor(x), 4).data
    b = nc.attention(Tensor(x), 4).data
    assert a.tobytes() == b.tobytes()
