import numpy as np
import pytest

from blindsisnr.errors import ShapeError, StateError
from blindsisnr.nn import (
    Adam,
    Conv1d,
    Linear,
    ReLU,
    Sequential,
    Sigmoid,
    StatPool,
    Tensor,
    check_layer_gradients,
    sigmoid,
)


def naive_conv1d(x, w, b):
    """Nested-loop reference with the 1-left / 2-right padding used for kernel 4."""
    batch, cin, t = x.shape
    cout, _, k = w.shape
    left = (k - 1) // 2
    out = np.zeros((batch, cout, t))
    for n in range(batch):
        for o in range(cout):
            for i in range(t):
                acc = b[o]
                for c in range(cin):
                    for j in range(k):
                        src = i + j - left
                        if 0 <= src < t:
                            acc += w[o, c, j] * x[n, c, src]
                out[n, o, i] = acc
    return out


def _conv64(cin, cout, k, seed):
    layer = Conv1d(cin, cout, k, rng=seed)
    layer.astype(np.float64)
    return layer


def test_conv_matches_naive_exactly():
    rng = np.random.default_rng(0)
    layer = _conv64(3, 4, 4, seed=1)
    # integer-valued data makes every summation order exact
    layer.weight.data = rng.integers(-3, 4, layer.weight.shape).astype(np.float64)
    layer.bias.data = rng.integers(-3, 4, 4).astype(np.float64)
    x = rng.integers(-5, 6, (2, 3, 11)).astype(np.float64)
    np.testing.assert_array_equal(layer.forward(x), naive_conv1d(x, layer.weight.data, layer.bias.data))


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_conv_matches_naive_random(k):
    rng = np.random.default_rng(k)
    layer = _conv64(2, 3, k, seed=k)
    x = rng.standard_normal((2, 2, 9))
    np.testing.assert_allclose(layer.forward(x), naive_conv1d(x, layer.weight.data, layer.bias.data), atol=1e-12)


def test_conv_hand_case():
    layer = _conv64(1, 1, 4, seed=0)
    layer.weight.data = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    layer.bias.data = np.zeros(1)
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    # padded input [0, 1, 2, 3, 4, 0, 0]
    # y0 = 0*1 + 1*2 + 2*3 + 3*4 = 20; y1 = 1 + 4 + 9 + 16 = 30; y2 = 2 + 6 + 12 + 0 = 20; y3 = 3 + 8 = 11
    np.testing.assert_array_equal(layer.forward(x), [[[20.0, 30.0, 20.0, 11.0]]])


def test_conv_identity_tap_and_bias():
    layer = _conv64(1, 1, 4, seed=0)
    layer.weight.data = np.array([[[0.0, 1.0, 0.0, 0.0]]])
    layer.bias.data = np.zeros(1)
    x = np.arange(1.0, 7.0).reshape(1, 1, 6)
    np.testing.assert_array_equal(layer.forward(x), x)
    layer.weight.data = np.zeros((1, 1, 4))
    layer.bias.data = np.array([2.5])
    np.testing.assert_array_equal(layer.forward(x), np.full((1, 1, 6), 2.5))


def test_conv_shape_errors():
    layer = Conv1d(2, 3, 4, rng=0)
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((1, 3, 10), np.float32))
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((1, 2, 3), np.float32))


def test_relu_forward_backward():
    r = ReLU()
    np.testing.assert_array_equal(r.forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(r.backward(np.ones(3)), [0.0, 0.0, 1.0])


def test_statpool_values():
    p = StatPool()
    x = np.array([[[1.0, 3.0], [4.0, 4.0]]])
    out = p.forward(x)
    np.testing.assert_allclose(out, [[2.0, 4.0, np.sqrt(1.0 + 1e-8), np.sqrt(1e-8)]])
    with pytest.raises(ShapeError):
        p.forward(np.zeros((1, 2, 1)))


def test_linear_identity_and_hand_case():
    lin = Linear(2, 2, rng=0)
    lin.astype(np.float64)
    lin.weight.data = np.eye(2)
    lin.bias.data = np.zeros(2)
    x = np.array([[3.0, -4.0]])
    np.testing.assert_array_equal(lin.forward(x), x)
    lin.weight.data = np.array([[1.0, 2.0], [3.0, 4.0]])
    lin.bias.data = np.array([0.5, -0.5])
    np.testing.assert_array_equal(lin.forward(np.array([[1.0, 1.0]])), [[3.5, 6.5]])
    with pytest.raises(ShapeError):
        lin.forward(np.zeros((1, 3)))


def test_linear_sum_loss_gradient():
    lin = Linear(3, 2, rng=1)
    lin.astype(np.float64)
    x = np.array([[1.0, -2.0, 0.5]])
    lin.forward(x)
    lin.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(lin.weight.grad, np.outer(np.ones(2), x[0]))
    np.testing.assert_array_equal(lin.bias.grad, np.ones(2))


def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert abs(sigmoid(np.array([40.0]))[0] - 1.0) <= 1e-15
    with np.errstate(over="raise"):
        out = sigmoid(np.array([-500.0, 500.0, -40.0]))
    assert np.all(np.isfinite(out))
    assert out[0] >= 0.0 and out[1] == 1.0


def test_backward_before_forward():
    for layer in [Conv1d(1, 1, 4, rng=0), ReLU(), StatPool(), Linear(2, 1, rng=0), Sigmoid(), Sequential([ReLU()])]:
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 1)))


def _layers_for_check(seed):
    rng = np.random.default_rng(seed)
    conv = _conv64(2, 3, 4, seed)
    lin = Linear(5, 4, rng=seed)
    lin.astype(np.float64)
    return [
        ("conv", conv, rng.standard_normal((2, 2, 9))),
        ("relu", ReLU(), rng.standard_normal((3, 7)) + np.sign(rng.standard_normal((3, 7))) * 0.1),
        ("statpool", StatPool(), rng.standard_normal((2, 3, 8))),
        ("linear", lin, rng.standard_normal((3, 5))),
        ("sigmoid", Sigmoid(), rng.standard_normal((4, 3)) * 3),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients(seed):
    for name, layer, x in _layers_for_check(seed):
        for res in check_layer_gradients(layer, x, rng=seed, step=1e-6, max_entries=None):
            assert res.max_rel_error < 1e-4, (name, res.name, res.max_rel_error)


def test_sigmoid_derivative_formula():
    x = np.linspace(-6, 6, 25)
    y = sigmoid(x)
    h = 1e-6
    numeric = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
    np.testing.assert_allclose(y * (1 - y), numeric, atol=1e-9)


def test_zero_upstream_gives_zero_grads():
    conv = Conv1d(2, 3, 4, rng=0)
    net = Sequential([conv, ReLU(), StatPool(), Linear(6, 1, rng=1), Sigmoid()])
    net.forward(np.random.default_rng(0).standard_normal((2, 2, 10)).astype(np.float32))
    net.backward(np.zeros((2, 1), np.float32))
    for p in net.parameters():
        assert not np.any(p.grad)


def test_forward_deterministic_and_finite():
    net = Sequential([Conv1d(2, 4, 4, rng=0), ReLU(), StatPool(), Linear(8, 1, rng=1), Sigmoid()])
    x = np.random.default_rng(1).uniform(-1e3, 1e3, (3, 2, 50)).astype(np.float32)
    a = net.forward(x)
    b = net.forward(x)
    np.testing.assert_array_equal(a, b)
    net.backward(np.ones_like(a))
    assert all(np.all(np.isfinite(p.grad)) for p in net.parameters())


def test_adam_first_step_magnitude():
    p = Tensor(np.zeros(5))
    opt = Adam([p], lr=1e-4)
    p.grad = np.ones(5)
    opt.step()
    np.testing.assert_allclose(p.data, -1e-4 * np.ones(5) * (1 / (1 + 1e-8)), rtol=1e-6)
    assert opt.state.step_count == 1


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]))
    opt = Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_skips_non_finite():
    p = Tensor(np.array([1.0]))
    q = Tensor(np.array([2.0]))
    opt = Adam([p, q], lr=0.1)
    p.grad = np.array([1.0])
    q.grad = np.array([np.nan])
    assert opt.step() is False
    assert p.data[0] == 1.0 and q.data[0] == 2.0
    assert opt.state.skipped_steps == 1 and opt.state.step_count == 0


def _scalar_adam_oracle(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        path.append(theta)
    return path


def test_adam_quadratic():
    p = Tensor(np.array([1.0]))
    opt = Adam([p], lr=0.01)
    path = []
    for _ in range(100):
        p.grad = 2 * p.data
        opt.step()
        path.append(float(p.data[0]))
    np.testing.assert_allclose(path, _scalar_adam_oracle(1.0, 100, 0.01), rtol=1e-12, atol=1e-15)
    mags = np.abs(path)
    # upper envelope of |theta| (max over the remaining trajectory) never increases
    envelope = np.maximum.accumulate(mags[::-1])[::-1]
    assert np.all(np.diff(envelope) <= 0)
    assert envelope[0] > envelope[-1]
    assert mags[-1] < 0.5


def test_init_modes():
    conv = Conv1d(8, 16, 4, rng=0, init="he")
    bound = np.sqrt(6.0 / 32)
    assert np.all(np.abs(conv.weight.data) <= bound) and np.abs(conv.weight.data).max() > 0.9 * bound
    assert not np.any(conv.bias.data)
    lin = Linear(50, 3, rng=0)
    assert np.all(np.abs(lin.weight.data) <= np.sqrt(1 / 50)) and np.any(lin.bias.data)
    with pytest.raises(ValueError):
        Linear(2, 2, init="xavier")
