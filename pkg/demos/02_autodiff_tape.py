"""The tape-based autodiff core: recording, backward, detach and gradient checking.

Run:  python3 demos/02_autodiff_tape.py
"""
import numpy as np

from reliavatar import numcore as nc

rng = np.random.default_rng(0)

# Every differentiable op appends a node to the active graph.
with nc.float64_mode():
    w = nc.parameter(rng.normal(size=(3, 4)), name="w")
    b = nc.parameter(0.1 * rng.normal(size=3), name="b")
    x = nc.Tensor(rng.normal(size=(5, 4)))
    target = rng.normal(size=(5, 3))

    g = nc.Graph()
    with g:
        y = nc.tanh(nc.linear(x, w, b))
        loss = nc.l1(y, target)
    print("recorded ops:", [n.op for n in g.nodes])
    nc.backward(g, loss)
    print("loss:", float(loss.data), " |dw|:", np.abs(w.grad).sum().round(4))

    # A graph can be consumed only once.
    try:
        nc.backward(g, loss)
    except nc.GraphError as e:
        print("second backward:", e)

    # detach cuts the gradient; the cut leaf still gets an explicit zero grad.
    nc.zero_grad([w, b])
    g = nc.Graph()
    with g:
        cut = nc.sum_(nc.detach(nc.linear(x, w, b)))
        loss = nc.add(cut, nc.sum_(nc.mul(b, b)))
    nc.backward(g, loss)
    print("grad of w through detach:", np.abs(w.grad).max(), " grad of b equals 2b:", np.allclose(b.grad, 2 * b.data))

    # Central differences agree with the analytic gradient to well under 1e-5.
    def f(w_, b_):
        return nc.mean(nc.mul(nc.tanh(nc.linear(x, w_, b_)), nc.tanh(nc.linear(x, w_, b_))))

    err = nc.grad_check(f, [w, b])
    print(f"grad_check max relative error: {err:.2e}")

# Adam with the step-halving learning-rate schedule.
print("lr at steps 0, 15000, 30000:", [nc.lr_at(5e-4, s, 15000) for s in (0, 15000, 30000)])
