import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqstop.nn import MLP, Adam, NonFiniteGradient, check_finite, numerical_gradient, softmax


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


def _loss_linear(x, w):
    return lambda net: float(np.sum(w * net(x)))


@pytest.mark.parametrize("cfg", range(10))
def test_backward_matches_finite_differences_linear(cfg):
    rng = np.random.default_rng(cfg)
    sizes = (2, *rng.integers(2, 7, size=rng.integers(1, 3)), 3)
    net = MLP.init(sizes, rng)
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 3))
    _, cache = net.forward(x)
    grads = net.backward(cache, w)
    num = numerical_gradient(net, _loss_linear(x, w))
    for g, n in zip(grads, num):
        assert _rel_err(g, n) < 1e-4


@pytest.mark.parametrize("cfg", range(10))
def test_backward_matches_finite_differences_softmax(cfg):
    rng = np.random.default_rng(100 + cfg)
    net = MLP.init((2, 5, 4, 3), rng, head="softmax")
    x = rng.standard_normal((4, 2))
    w = rng.standard_normal((4, 3))
    mask = np.ones((4, 3), dtype=bool)
    mask[0, 0] = False
    _, cache = net.forward(x, mask)
    grads = net.backward(cache, w)
    num = numerical_gradient(net, lambda n: float(np.sum(w * n(x, mask))))
    for g, n in zip(grads, num):
        assert _rel_err(g, n) < 1e-4


def test_logit_gradient_path():
    rng = np.random.default_rng(1)
    net = MLP.init((2, 4, 3), rng, head="softmax")
    x = rng.standard_normal((3, 2))
    onehot = np.eye(3)[[0, 2, 1]]
    # d log p_a / d z = onehot - p
    p, cache = net.forward(x)
    grads = net.backward(cache, onehot - p, wrt="logits")
    num = numerical_gradient(net, lambda n: float(np.sum(np.log(np.sum(n(x) * onehot, axis=1)))))
    for g, n in zip(grads, num):
        assert _rel_err(g, n) < 1e-4


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_softmax_is_distribution(z):
    p = softmax(np.array(z))
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)


def test_masked_softmax_zeroes_illegal():
    p = softmax(np.array([[5.0, 1.0, 1.0]]), np.array([[False, True, True]]))
    np.testing.assert_allclose(p, [[0.0, 0.5, 0.5]])


def test_adam_decreases_quadratic_loss_monotonically():
    rng = np.random.default_rng(0)
    net = MLP.init((2, 8, 3), rng)
    x = rng.standard_normal((64, 2))
    y = rng.standard_normal((64, 3))
    opt = Adam(lr=1e-3)
    losses = []
    for _ in range(100):
        out, cache = net.forward(x)
        losses.append(float(np.mean((out - y) ** 2)))
        opt.update(net, net.backward(cache, 2 * (out - y) / out.size))
    assert np.all(np.diff(losses) < 0)


def test_adam_first_step_is_lr_sized():
    net = MLP.init((1, 1), 0)
    before = [p.copy() for p in net.params()]
    Adam(lr=0.01).update(net, [np.array([[3.0]]), np.array([-0.5])])
    np.testing.assert_allclose(net.params()[0] - before[0], [[-0.01]], rtol=1e-6)
    np.testing.assert_allclose(net.params()[1] - before[1], [0.01], rtol=1e-6)


def test_adam_ascent_flips_direction():
    net = MLP.init((1, 1), 0)
    w0 = net.weights[0].copy()
    Adam(lr=0.01).update(net, [np.array([[1.0]]), np.array([1.0])], ascent=True)
    assert net.weights[0][0, 0] > w0[0, 0]


def test_non_finite_gradient_detected():
    with pytest.raises(NonFiniteGradient, match="weight gradient in layer 1"):
        check_finite([np.zeros(2), np.zeros(2), np.array([np.nan]), np.zeros(1)])


def test_save_load_round_trip(tmp_path):
    net = MLP.init((2, 7, 3), 3, head="softmax")
    net.save(tmp_path / "n.bin")
    back = MLP.load(tmp_path / "n.bin")
    assert back.equals(net)


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        MLP.load(tmp_path / "x.bin")
    net = MLP.init((2, 3), 0)
    net.save(tmp_path / "n.bin")
    (tmp_path / "n.bin").write_bytes((tmp_path / "n.bin").read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        MLP.load(tmp_path / "n.bin")


def test_export_csv(tmp_path):
    net = MLP.init((2, 3), 0)
    net.export_csv(tmp_path / "n.csv")
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "layer,param,row,col,value" and len(lines) == 1 + 6 + 3


def test_init_is_deterministic():
    assert MLP.init((2, 4, 3), 5).equals(MLP.init((2, 4, 3), 5))


def test_invalid_shapes():
    with pytest.raises(ValueError):
        MLP((2, 3), [np.zeros((3, 2))], [np.zeros(3)])
    with pytest.raises(ValueError):
        MLP.init((2, 3), 0, head="tanh")


def test_linear_net_matches_regression_gradient():
    rng = np.random.default_rng(9)
    net = MLP.init((3, 1), rng)
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal((10, 1))
    out, cache = net.forward(x)
    gw, gb = net.backward(cache, 2 * (out - y) / 10)
    r = x @ net.weights[0] + net.biases[0] - y
    np.testing.assert_allclose(gw, 2 * x.T @ r / 10)
    np.testing.assert_allclose(gb, 2 * r.sum(axis=0) / 10)


def test_softmax_symmetric_logits():
    net = MLP((2, 3), [np.zeros((2, 3))], [np.zeros(3)], head="softmax")
    np.testing.assert_allclose(net(np.ones((1, 2))), [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_training_trajectory_is_deterministic():
    def run():
        net = MLP.init((2, 4, 1), 7)
        opt = Adam(lr=1e-2)
        x = np.linspace(-1, 1, 20).reshape(10, 2)
        for _ in range(20):
            out, cache = net.forward(x)
            opt.update(net, net.backward(cache, out - x[:, :1] ** 2))
        return net
    assert run().equals(run())
