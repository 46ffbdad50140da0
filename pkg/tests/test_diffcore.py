import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktraj import diffcore as dc
from ktraj.errors import ShapeError


def _fd_check(build, arrays, tol=1e-4, eps=1e-6):
    """build(tape, *leaves) -> tensor; loss is a fixed random projection of it."""
    tape = dc.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    proj = np.random.default_rng(99).standard_normal(out.shape)
    tape.backward((out * tape.constant(proj)).sum())

    def f(vals):
        t = dc.Tape()
        return float(np.sum(build(*[t.leaf(v) for v in vals]).values * proj))

    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for i in range(a.size):
            vp = [x.copy() for x in arrays]
            vm = [x.copy() for x in arrays]
            vp[k].flat[i] += eps
            vm[k].flat[i] -= eps
            num.flat[i] = (f(vp) - f(vm)) / (2 * eps)
        scale = max(np.abs(num).max(), 1e-12)
        assert np.abs(leaves[k].grad - num).max() <= tol * scale, f"input {k}"


R = np.random.default_rng(0)
A = R.standard_normal((4, 4)) + 0.05
B = R.uniform(0.5, 1.5, (4, 4))
X3 = R.standard_normal((2, 4, 4))
W3 = R.standard_normal((3, 2, 3, 3))
W1 = R.standard_normal((3, 2, 1, 1))
BIAS = R.standard_normal(3)

OPS = {
    "add": (lambda a, b: a + b, [A, B]),
    "sub": (lambda a, b: a - b, [A, B]),
    "mul": (lambda a, b: a * b, [A, B]),
    "div": (lambda a, b: a / b, [A, B]),
    "neg": (lambda a: -a, [A]),
    "mul_scalar": (lambda a: dc.mul_scalar(a, 2.5), [A]),
    "scalar_broadcast": (lambda a, b: a * b.sum() + 1.0, [A, B]),
    "sqrt": (lambda b: dc.sqrt(b), [B]),
    "abs": (lambda a: dc.abs_(a), [A]),
    "relu": (lambda a: dc.relu(a), [A]),
    "leaky_relu": (lambda a: dc.leaky_relu(a), [A]),
    "sum_axis": (lambda a: a.sum(axis=0), [A]),
    "mean": (lambda a: a.mean(), [A]),
    "reshape": (lambda a: a.reshape(2, 8), [A]),
    "getitem": (lambda a: a[1:3, ::2], [A]),
    "concat": (lambda x, y: dc.concat([x, y], axis=0), [X3, X3[::-1].copy()]),
    "conv3x3": (lambda x, w, b: dc.conv2d(x, w, b), [X3, W3, BIAS]),
    "conv1x1": (lambda x, w: dc.conv2d(x, w), [X3, W1]),
    "instance_norm": (lambda x: dc.instance_norm(x), [X3]),
    "max_pool": (lambda x: dc.max_pool2d(x), [X3]),
    "upsample": (lambda x: dc.nearest_upsample(x), [X3]),
    "linear": (lambda x, w, b: dc.linear(x, w, b), [A, R.standard_normal((3, 4)), BIAS]),
    "uniform_filter": (lambda a: dc.uniform_filter(a, 3), [A]),
    "percentile": (lambda b: dc.percentile(b, 40.0), [B]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_fd(name):
    build, arrays = OPS[name]
    _fd_check(build, [a.copy() for a in arrays])


def test_conv_identity_kernel():
    t = dc.Tape()
    x = t.leaf(X3)
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1
    assert np.array_equal(dc.conv2d(x, t.leaf(w)).values, X3)
    w3 = np.zeros((2, 2, 3, 3))
    w3[0, 0, 1, 1] = w3[1, 1, 1, 1] = 1
    assert np.array_equal(dc.conv2d(x, t.leaf(w3)).values, X3)


def test_conv_matches_direct_loop():
    t = dc.Tape()
    out = dc.conv2d(t.leaf(X3), t.leaf(W3), t.leaf(BIAS)).values
    pad = np.pad(X3, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[o, i, j] = BIAS[o] + np.sum(W3[o] * pad[:, i:i + 3, j:j + 3])
    assert np.allclose(out, ref, atol=1e-12)


def test_max_pool_constant_routes_to_first_index():
    t = dc.Tape()
    x = t.leaf(np.ones((1, 4, 4)))
    y = dc.max_pool2d(x)
    assert np.array_equal(y.values, np.ones((1, 2, 2)))
    t.backward(y.sum())
    expect = np.zeros((1, 4, 4))
    expect[0, ::2, ::2] = 1
    assert np.array_equal(x.grad, expect)


def test_backward_basics():
    t = dc.Tape()
    x = t.leaf(A)
    g = t.backward(x.sum())
    assert np.array_equal(g[x.node_id], np.ones_like(A))
    t2 = dc.Tape()
    x2 = t2.leaf(A)
    t2.backward((x2 * x2).sum())
    assert np.allclose(x2.grad, 2 * A)


def test_backward_errors():
    t = dc.Tape()
    x = t.leaf(A)
    with pytest.raises(ShapeError):
        t.backward(x)
    loss = x.sum()
    t.backward(loss)
    with pytest.raises(RuntimeError):
        t.backward(loss)


def test_chain_conv_relu_sum():
    _fd_check(lambda x, w: dc.relu(dc.conv2d(x, w)).sum(), [X3.copy(), W3.copy()])


def test_shape_errors_name_op():
    t = dc.Tape()
    with pytest.raises(ShapeError, match="add"):
        t.leaf(np.ones(3)) + t.leaf(np.ones(4))
    with pytest.raises(ShapeError, match="conv2d"):
        dc.conv2d(t.leaf(X3), t.leaf(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="max_pool2d"):
        dc.max_pool2d(t.leaf(np.ones((1, 3, 3))))
    with pytest.raises(ShapeError, match="concat"):
        dc.concat([t.leaf(np.ones((1, 2, 2))), t.leaf(np.ones((1, 3, 3)))])


def test_no_grad_leaves_receive_nothing():
    t = dc.Tape()
    x = t.leaf(A)
    c = t.constant(B)
    grads = t.backward((x * c).sum())
    assert c.grad is None and c.node_id not in grads


@given(st.permutations([0, 1, 2]))
def test_accumulation_order_independent(order):
    # the same three branches recorded in different orders give the same gradient
    t = dc.Tape()
    x = t.leaf(B)
    branches = [lambda: dc.sqrt(x).sum(), lambda: (x * x).mean(), lambda: dc.relu(x - 1.0).sum()]
    total = None
    for i in order:
        b = branches[i]()
        total = b if total is None else total + b
    t.backward(total)
    ref = 0.5 / np.sqrt(B) + 2 * B / B.size + (B > 1.0)
    assert np.allclose(x.grad, ref, rtol=1e-12, atol=1e-15)
