import zlib

import numpy as np
import pytest

from faceprior import diffcore as dc
from faceprior.diffcore import Tensor, backward, gradcheck


def test_forward_closed_forms():
    x = Tensor(3.0)
    assert (x * x).item() == 9.0
    assert dc.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert dc.exp(-dc.relu(Tensor(0.0))).item() == 1.0


def test_backward_closed_forms():
    x = Tensor(3.0, requires_grad=True)
    assert backward(x * x, [x])[0] == 6.0

    x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    gx, gy = backward(x * y, [x, y])
    assert (gx, gy) == (5.0, 2.0)

    v = Tensor([-1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(backward(dc.sum(dc.abs(v)), [v])[0], [-1.0, 1.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0, [x])


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(dc.NonFiniteError):
        dc.log(Tensor([0.0, 1.0]))


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_fan_out_accumulates():
    x = Tensor(1.5, requires_grad=True)
    y = x * x + x * 3.0 + dc.sin(x)
    g = backward(y, [x])[0]
    assert g == pytest.approx(2 * 1.5 + 3.0 + np.cos(1.5), rel=1e-15)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    np.testing.assert_array_equal(backward(dc.sum(dc.relu(x)), [x])[0], [0.0, 1.0, 0.0])


def test_unused_input_gets_zero_gradient():
    x, y = Tensor(1.0, requires_grad=True), Tensor([1.0, 2.0], requires_grad=True)
    gx, gy = backward(x * 2.0, [x, y])
    np.testing.assert_array_equal(gy, [0.0, 0.0])


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with dc.no_grad():
        y = x * x
    assert not y.requires_grad


W = np.random.default_rng(0).normal(size=(4, 3))

UNARY_OPS = {
    "exp": lambda x: dc.exp(x),
    "expm1": lambda x: dc.expm1(x),
    "log": lambda x: dc.log(dc.square(x) + 0.5),
    "sqrt": lambda x: dc.sqrt(dc.square(x) + 0.5),
    "abs": lambda x: dc.abs(x),
    "relu": lambda x: dc.relu(x),
    "softplus": lambda x: dc.softplus(x * 3.0),
    "sigmoid": lambda x: dc.sigmoid(x * 2.0),
    "sin": lambda x: dc.sin(x),
    "cos": lambda x: dc.cos(x),
    "pow": lambda x: (dc.square(x) + 1.0) ** 1.5,
    "div": lambda x: 1.0 / (dc.square(x) + 0.3),
    "cumsum": lambda x: dc.cumsum(x, axis=1),
    "mean": lambda x: dc.mean(x, axis=0, keepdims=True),
    "transpose": lambda x: dc.transpose(x) @ Tensor(np.ones((3, 2))),
    "reshape": lambda x: dc.reshape(x, (3, 4)),
    "getitem": lambda x: x[1:, ::2],
    "fancy_getitem": lambda x: x[[0, 0, 2], [1, 2, 1]],
    "take_along_axis": lambda x: dc.take_along_axis(x, np.array([[0, 0, 3]] * 3), axis=1),
    "concat": lambda x: dc.concat([x, x * 2.0], axis=0),
    "stack": lambda x: dc.stack([x, dc.sin(x)], axis=1),
    "matmul": lambda x: x @ Tensor(W),
    "matmul_left": lambda x: Tensor(W.T) @ dc.transpose(x),
    "matvec": lambda x: x @ Tensor(W[:, 0]),
    "normalize": lambda x: dc.normalize(x, axis=-1),
    "where": lambda x: dc.where(np.eye(3, 4) > 0, x * 2.0, dc.sin(x)),
    "broadcast": lambda x: x[:, :1] * Tensor(np.ones((3, 5))) + dc.broadcast_to(x[0], (2, 4)).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_gradcheck_every_op_at_100_points(name):
    op = UNARY_OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    c = Tensor(rng.normal(size=op(Tensor(np.zeros((3, 4)))).shape))
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(3, 4))
        worst = max(worst, gradcheck(lambda t: dc.sum(op(t) * c), x))
    assert worst < 1e-4


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x0 = rng.normal(size=5)
        a, b = rng.normal(size=(2, 5, 5))
        f = lambda t: dc.sum(dc.sin(Tensor(a) @ t))
        g = lambda t: dc.sum(dc.square(Tensor(b) @ t))
        _, (gf,) = dc.grad(f, x0)
        _, (gg,) = dc.grad(g, x0)
        _, (gfg,) = dc.grad(lambda t: f(t) + g(t), x0)
        np.testing.assert_allclose(gfg, gf + gg, rtol=1e-12, atol=1e-12)


def test_two_passes_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        x = Tensor(rng.normal(size=(16, 8)))
        loss = dc.mean(dc.softplus(dc.relu(x @ w) @ w))
        return loss.data, backward(loss, [w])[0]
    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_gradcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        gradcheck(lambda t: dc.sum(t), np.ones(2), step=0.0)
