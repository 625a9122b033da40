import math
import struct

import numpy as np
import pytest

from egr_forge.nn import (
    BCE_CLAMP,
    Adam,
    Conv3x3,
    GlobalAvgPool,
    Linear,
    MaxPool2,
    Network,
    ParameterStore,
    ReLU,
    ShapeError,
    Sigmoid,
    StateError,
    adam_step,
    backward,
    bce_loss,
    grad_check,
    make_rng,
    numeric_grad,
    read_checkpoint,
    relative_error,
    save_checkpoint,
    sigmoid,
)


def test_make_rng_streams():
    a = make_rng(5).random(4)
    np.testing.assert_array_equal(a, make_rng(5).random(4))
    assert not np.array_equal(a, make_rng(5, 1).random(4))
    assert not np.array_equal(make_rng(5, 1).random(4), make_rng(5, 2).random(4))


def test_relu_and_maxpool_examples():
    assert ReLU().forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert MaxPool2().forward(x).item() == 4.0


def test_identity_kernel_conv(rng):
    store = ParameterStore()
    conv = Conv3x3(store, "c", 1, 1)
    store.params["c.weight"][...] = 0
    store.params["c.weight"][0, 0, 1, 1] = 1
    x = rng.random((1, 2, 6, 6))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_shape_errors_name_the_layer(rng):
    store = ParameterStore()
    conv = Conv3x3(store, "conv9", 3, 4)
    with pytest.raises(ShapeError, match="conv9"):
        conv.forward(rng.random((2, 1, 4, 4)))
    with pytest.raises(ShapeError):
        MaxPool2().forward(rng.random((1, 1, 3, 4)))
    lin = Linear(store, "fc", 5, 1)
    with pytest.raises(ShapeError, match="fc"):
        lin.forward(rng.random((2, 4)))


def test_sigmoid_open_interval_and_stability():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5
    assert np.all(np.diff(s) >= 0)
    assert 0 < sigmoid(np.array([-30.0]))[0] < sigmoid(np.array([30.0]))[0] < 1


@pytest.mark.parametrize(
    "yhat, y, expected",
    [(0.5, 0, math.log(2)), (0.5, 1, math.log(2)), (0.9, 0, -math.log(0.1))],
)
def test_bce_closed_forms(yhat, y, expected):
    assert bce_loss(np.array([yhat]), np.array([y])) == pytest.approx(expected, abs=1e-12)


def test_bce_clamped_perfect_and_nonnegative(rng):
    assert bce_loss(np.array([1 - BCE_CLAMP]), np.array([1])) <= 2e-7
    assert bce_loss(np.array([1.0]), np.array([1])) <= 2e-7
    assert bce_loss(np.array([0.0]), np.array([1])) == pytest.approx(-math.log(BCE_CLAMP))
    p, y = rng.random(100), rng.integers(0, 2, 100)
    assert bce_loss(p, y) >= 0


def _layer_jvp_check(layer, x, params=()):
    """Max relative error of d(sum(w * layer(x)))/dx and d/dparams."""
    store = getattr(layer, "store", None)
    out = layer.forward(x)
    w = np.random.default_rng(0).normal(size=out.shape)

    def f():
        return float(np.sum(w * layer.forward(x)))

    layer.forward(x)
    if store is not None:
        store.zero_grad()
    dx = layer.backward(w)
    worst = 0.0
    if dx is not None:
        worst = relative_error(dx, numeric_grad(f, x, 1e-6)).max()
    for name in params:
        analytic = store.grads[name].copy()
        num = numeric_grad(f, store.params[name], 1e-6)
        worst = max(worst, relative_error(analytic, num).max())
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_layer_jacobians(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    conv = Conv3x3(store, "c", 2, 3, make_rng(seed))
    store.params["c.bias"][...] = rng.normal(size=3)
    assert _layer_jvp_check(conv, rng.normal(size=(2, 2, 5, 4)), ["c.weight", "c.bias"]) < 1e-5
    # keep ReLU inputs and pooling windows away from kinks
    x = rng.normal(size=(2, 2, 4, 4))
    x += np.sign(x) * 0.1
    assert _layer_jvp_check(ReLU(), x) < 1e-5
    x = rng.permutation(np.arange(64.0)).reshape(2, 2, 4, 4) / 10
    assert _layer_jvp_check(MaxPool2(), x) < 1e-5
    assert _layer_jvp_check(GlobalAvgPool(), rng.normal(size=(3, 2, 4, 4))) < 1e-5
    lin = Linear(store, "fc", 3, 2, make_rng(seed))
    assert _layer_jvp_check(lin, rng.normal(size=(4, 3)), ["fc.weight", "fc.bias"]) < 1e-5
    assert _layer_jvp_check(Sigmoid(), rng.normal(size=(4, 1))) < 1e-5


def _tiny_net(seed, freeze=()):
    store = ParameterStore()
    rng = make_rng(seed)
    layers = [Conv3x3(store, "c1", 3, 4, rng), ReLU(), MaxPool2(), GlobalAvgPool(), Linear(store, "fc", 4, 1, rng), Sigmoid()]
    net = Network(layers, store)
    store.freeze(freeze)
    return net


def test_backward_requires_forward(rng):
    net = _tiny_net(0)
    with pytest.raises(StateError):
        backward(net, rng.random((2, 3, 4, 4)), np.array([0, 1]))


def test_all_frozen_gives_zero_gradients(rng):
    net = _tiny_net(0, freeze=["c1.weight", "c1.bias", "fc.weight", "fc.bias"])
    x = rng.random((2, 3, 4, 4))
    net.forward(x)
    grads = backward(net, x, np.array([[0], [1]]))
    assert all(not g.any() for g in grads.values())


def test_duplicated_sample_same_gradient(rng):
    net = _tiny_net(1)
    x = rng.random((1, 3, 4, 4))
    net.forward(x)
    single = {k: v.copy() for k, v in backward(net, x, np.array([[1]])).items()}
    xx = np.concatenate([x, x])
    net.forward(xx)
    double = backward(net, xx, np.array([[1], [1]]))
    for k in single:
        np.testing.assert_allclose(double[k], single[k], rtol=1e-12, atol=1e-15)


def test_linear_only_grad_check(rng):
    store = ParameterStore()
    net = Network([GlobalAvgPool(), Linear(store, "fc", 3, 1, make_rng(0)), Sigmoid()], store)
    assert grad_check(net, rng.random((4, 3, 1, 1)), np.array([0, 1, 1, 0])) < 1e-8


def test_grad_check_rejects_nonpositive_eps(rng):
    with pytest.raises(ValueError):
        grad_check(_tiny_net(0), rng.random((2, 3, 4, 4)), np.array([0, 1]), eps=0)


def test_small_network_grad_check(rng):
    net = _tiny_net(3)
    assert grad_check(net, rng.random((2, 3, 6, 6)), np.array([0, 1])) < 1e-5


def test_adam_zero_gradient_is_noop():
    store = ParameterStore()
    store.add("w", np.array([0.3, -0.2]))
    opt = Adam()
    opt.step(store)
    np.testing.assert_array_equal(store.params["w"], [0.3, -0.2])


def test_adam_first_step_closed_form():
    store = ParameterStore()
    store.add("theta", np.array([0.0]))
    store.grads["theta"][...] = 1.0
    store, state = adam_step(store, Adam(lr=0.1))
    assert state.t == 1
    assert store.params["theta"][0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_respects_freeze(rng):
    net = _tiny_net(2, freeze=["c1.weight"])
    before = net.store.params["c1.weight"].copy()
    opt = Adam()
    for _ in range(5):
        net.store.zero_grad()
        net.loss_and_backward(rng.random((2, 3, 4, 4)), np.array([0, 1]))
        opt.step(net.store)
    np.testing.assert_array_equal(net.store.params["c1.weight"], before)
    assert net.store.n_params(trainable_only=True) == net.store.n_params() - before.size


def _train_run(seed):
    net = _tiny_net(seed)
    data = np.random.default_rng(seed).random((4, 3, 4, 4))
    opt = Adam()
    for _ in range(3):
        net.store.zero_grad()
        net.loss_and_backward(data, np.array([0, 1, 0, 1]))
        opt.step(net.store)
    return net.store.flat()


def test_training_bit_identical():
    np.testing.assert_array_equal(_train_run(4), _train_run(4))


def test_forward_deterministic(rng):
    net = _tiny_net(0)
    x = rng.random((3, 3, 4, 4))
    np.testing.assert_array_equal(net.forward(x), net.forward(x.copy()))


def test_checkpoint_roundtrip_and_layout(tmp_path):
    net = _tiny_net(6)
    path = tmp_path / "m.egrd"
    save_checkpoint(path, net.store, {"seed": 6, "config_digest": "abc"})
    raw = path.read_bytes()
    assert raw[:8] == b"EGRD0001"
    (n,) = struct.unpack("<I", raw[8:12])
    header, values = read_checkpoint(path)
    assert header["seed"] == 6 and header["config_digest"] == "abc"
    assert [p["name"] for p in header["params"]] == list(net.store.names())
    first = net.store.names()[0]
    np.testing.assert_array_equal(
        np.frombuffer(raw, "<f8", count=net.store.params[first].size, offset=12 + n),
        net.store.params[first].ravel(),
    )
    for name in net.store.names():
        np.testing.assert_array_equal(values[name], net.store.params[name])


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "x.egrd"
    bad.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(ValueError):
        read_checkpoint(bad)
    net = _tiny_net(0)
    good = tmp_path / "g.egrd"
    save_checkpoint(good, net.store, {})
    (tmp_path / "t.egrd").write_bytes(good.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "t.egrd")
