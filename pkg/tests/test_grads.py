import numpy as np
import pytest

from doconv.conv import ConvGeometry, conv_forward, depthwise_forward, grouped_conv_forward
from doconv.errors import NumericError
from doconv.gradcheck import finite_diff_check, numeric_grad
from doconv.grads import conv_backward, depthwise_backward, doconv_backward, grouped_conv_backward
from doconv.nn import DOConv, MaxPool2, NetworkSpec, ReLU, build_network, softmax_cross_entropy
from doconv.overparam import DO_CONV, DO_DCONV, DO_GCONV, doconv_forward, init_params
from doconv.train import OptimizerState, sgd_step


def scalar_loss(out, up):
    return float(np.sum(out * up))


def test_conv_backward_zero_upstream(rng):
    g = ConvGeometry(3, 3, 2, 3, pad=1)
    x = rng.standard_normal((4, 4, 2))
    k = rng.standard_normal(g.kernel_shape())
    gx, gk = conv_backward(x, k, g, np.zeros((4, 4, 3)))
    assert np.all(gx == 0) and np.all(gk == 0)


def test_conv_backward_single_patch(rng):
    g = ConvGeometry(2, 2, 3, 1)
    x = rng.standard_normal((2, 2, 3))
    k = rng.standard_normal(g.kernel_shape())
    _, gk = conv_backward(x, k, g, np.full((1, 1, 1), 2.5))
    np.testing.assert_allclose(gk[0], 2.5 * x.reshape(4, 3), atol=1e-15)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 0, 4)])
def test_conv_backward_finite_differences(rng, stride, pad, groups):
    g = ConvGeometry(3, 2, 4, 4, stride=stride, pad=pad, groups=groups)
    x = rng.standard_normal((2, 5, 6, 4))
    k = rng.standard_normal(g.kernel_shape())
    up = rng.standard_normal(grouped_conv_forward(x, k, g).shape)
    gx, gk = grouped_conv_backward(x, k, g, up)
    f = lambda: scalar_loss(grouped_conv_forward(x, k, g), up)  # noqa: E731
    assert finite_diff_check(f, k, gk, max_elements=10**6) <= 1e-6
    assert finite_diff_check(f, x, gx, max_elements=10**6) <= 1e-6


def test_depthwise_backward_finite_differences(rng):
    g = ConvGeometry(3, 3, 3, 6, pad=1, stride=2, d_mul=2)
    x = rng.standard_normal((5, 5, 3))
    k = rng.standard_normal(g.depthwise_shape())
    up = rng.standard_normal(depthwise_forward(x, k, g).shape)
    gx, gk = depthwise_backward(x, k, g, up)
    f = lambda: scalar_loss(depthwise_forward(x, k, g), up)  # noqa: E731
    assert finite_diff_check(f, k, gk, max_elements=10**6) <= 1e-6
    assert finite_diff_check(f, x, gx, max_elements=10**6) <= 1e-6


def test_doconv_backward_identity_chain_matches_conv(rng):
    g = ConvGeometry(3, 3, 2, 3, pad=1, d_mul=9)
    p = init_params(g, rng)
    x = rng.standard_normal((5, 5, 2))
    up = rng.standard_normal((5, 5, 3))
    grads = doconv_backward(p, x, up)
    gx, gk = conv_backward(x, p.w, g.with_(d_mul=1), up)
    np.testing.assert_array_equal(grads["w"], gk)
    np.testing.assert_array_equal(grads["x"], gx)


@pytest.mark.parametrize(
    "kind,geom",
    [
        (DO_CONV, ConvGeometry(3, 3, 2, 3, pad=1, d_mul=9)),
        (DO_CONV, ConvGeometry(2, 2, 2, 2, d_mul=7)),
        (DO_GCONV, ConvGeometry(3, 3, 4, 4, pad=1, groups=2, d_mul=11)),
        (DO_DCONV, ConvGeometry(3, 3, 2, 4, pad=1, stride=2, d_mul=9)),
        (DO_CONV, ConvGeometry(3, 3, 2, 2, d_mul=4)),
    ],
)
def test_doconv_backward_finite_differences(rng, kind, geom):
    p = init_params(geom, rng, kind, d_init="random", bias=True, separable=True)
    p.bias[:] = rng.standard_normal(p.bias.shape)
    x = rng.standard_normal((2, 5, 5, geom.c_in))
    up = rng.standard_normal(doconv_forward(p, x).shape)
    grads = doconv_backward(p, x, up)
    f = lambda: scalar_loss(doconv_forward(p, x), up)  # noqa: E731
    for name, param in (("d_res", p.d_res), ("w", p.w), ("bias", p.bias), ("x", x)):
        assert finite_diff_check(f, param, grads[name], max_elements=10**6) <= 1e-6, name


def test_doconv_backward_zero_w_gives_zero_d_grad(rng):
    g = ConvGeometry(3, 3, 2, 3, pad=1, d_mul=10)
    p = init_params(g, rng, d_init="random")
    p.w[:] = 0
    grads = doconv_backward(p, rng.standard_normal((4, 4, 2)), rng.standard_normal((4, 4, 3)))
    assert np.all(grads["d_res"] == 0)


@pytest.mark.parametrize("kind", [DO_CONV, DO_DCONV])
def test_feature_mode_backward_agrees_with_kernel_mode(rng, kind):
    g = ConvGeometry(3, 3, 2, 4, pad=1, d_mul=11)
    p = init_params(g, rng, kind, d_init="random", bias=True)
    x = rng.standard_normal((2, 5, 5, 2))
    up = rng.standard_normal((2, 5, 5, 4))
    out = {}
    for mode in ("kernel", "feature"):
        layer = DOConv(p, mode)
        y = layer.forward(x)
        gx = layer.backward(up)
        out[mode] = (y, gx, dict(layer.grads))
    np.testing.assert_allclose(out["kernel"][0], out["feature"][0], atol=1e-12)
    np.testing.assert_allclose(out["kernel"][1], out["feature"][1], atol=1e-12)
    for k in out["kernel"][2]:
        np.testing.assert_allclose(out["kernel"][2][k], out["feature"][2][k], atol=1e-12)


def test_relu_and_maxpool_gradients(rng):
    # inputs kept away from ReLU kinks and pooling ties so central differences are valid
    x = rng.uniform(0.1, 1.0, size=(2, 4, 6, 3)) * rng.choice([-1, 1], size=(2, 4, 6, 3))
    x[:, ::2, ::2] += 2.0 * np.sign(x[:, ::2, ::2])
    up = rng.standard_normal((2, 2, 3, 3))
    relu, pool = ReLU(), MaxPool2()

    def f():
        return scalar_loss(pool.forward(relu.forward(x)), up)

    f()
    gx = relu.backward(pool.backward(up))
    assert finite_diff_check(f, x, gx, max_elements=10**6) <= 1e-8


def test_maxpool_odd_sizes_drop_last(rng):
    x = rng.standard_normal((1, 5, 3, 2))
    out = MaxPool2().forward(x)
    assert out.shape == (1, 2, 1, 2)
    assert out[0, 1, 0, 1] == x[0, 2:4, 0:2, 1].max()


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 4, 2, 2])
    loss, g = softmax_cross_entropy(logits, labels)
    f = lambda: softmax_cross_entropy(logits, labels)[0]  # noqa: E731
    assert finite_diff_check(f, logits, g) <= 1e-7
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert np.isclose(loss, -np.mean(np.log(p[np.arange(4), labels])))


def test_network_gradients_finite_differences():
    spec = NetworkSpec(
        (4, 4, 2),
        [
            {"type": "doconv", "filters": 3, "kernel": 3, "pad": 1},
            {"type": "dodconv", "multiplier": 2, "kernel": 2, "d_mul": 5},
            {"type": "flatten"},
            {"type": "dense", "units": 3},
            {"type": "softmax_ce"},
        ],
    )
    rng = np.random.default_rng(77)
    net = build_network(spec, rng, d_init="random")
    x = rng.standard_normal((2, 4, 4, 2))
    y = np.array([1, 2])
    _, grads, _ = net.loss_and_grads(x, y)
    grads = {k: v.copy() for k, v in grads.items()}
    f = lambda: softmax_cross_entropy(net.forward(x), y)[0]  # noqa: E731
    for k, p in net.params().items():
        assert finite_diff_check(f, p, grads[k], max_elements=10**6) <= 1e-5, k


# --- finite_diff_check ------------------------------------------------------


def test_fd_square():
    w = np.array([3.0])
    assert finite_diff_check(lambda: float(w[0] ** 2), w, np.array([6.0])) <= 1e-10


def test_fd_linear(rng):
    a = rng.standard_normal(10)
    w = rng.standard_normal(10)
    assert finite_diff_check(lambda: float(a @ w), w, a) <= 1e-9


def test_fd_subset_for_large_tensors(rng):
    w = rng.standard_normal(500)
    calls = []

    def f():
        calls.append(1)
        return float(np.sum(w**2))

    assert finite_diff_check(f, w, 2 * w, max_elements=64) <= 1e-6
    assert len(calls) == 128


def test_fd_restores_parameter(rng):
    w = rng.standard_normal(5)
    before = w.copy()
    numeric_grad(lambda: float(np.sum(np.sin(w))), w)
    np.testing.assert_array_equal(w, before)


def test_fd_non_finite():
    w = np.array([0.0])
    with pytest.raises(NumericError):
        finite_diff_check(lambda: float("nan"), w, np.zeros(1))


def test_fd_detects_wrong_gradient(rng):
    w = rng.standard_normal(4)
    assert finite_diff_check(lambda: float(np.sum(w**3)), w, 3 * w**2 + 0.01) > 1e-3


# --- SGD ----------------------------------------------------------------------


def test_sgd_plain_step():
    p = {"a": np.array([5.0])}
    sgd_step(p, {"a": np.array([2.0])}, OptimizerState(lr=1.0))
    assert p["a"][0] == 3.0


def test_sgd_decay_keeps_zero_residual_at_zero():
    p = {"0.d_res": np.zeros((9, 9, 2))}
    opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.5)
    for _ in range(5):
        sgd_step(p, {"0.d_res": np.zeros((9, 9, 2))}, opt)
    assert np.all(p["0.d_res"] == 0)


def test_sgd_momentum_two_steps():
    # v1 = -0.1*(1 + 0.01*2) = -0.102, p1 = 1.898
    # v2 = 0.9*v1 - 0.1*(0.5 + 0.01*1.898) = -0.0918 - 0.051898 = -0.143698, p2 = 1.754302
    p = {"a": np.array([2.0])}
    opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.01)
    sgd_step(p, {"a": np.array([1.0])}, opt)
    assert np.isclose(p["a"][0], 1.898, rtol=0, atol=1e-15)
    sgd_step(p, {"a": np.array([0.5])}, opt)
    assert np.isclose(p["a"][0], 1.754302, rtol=0, atol=1e-14)


def test_sgd_zero_gradient_is_identity(rng):
    p = {"a": rng.standard_normal(7)}
    before = p["a"].copy()
    sgd_step(p, {"a": np.zeros(7)}, OptimizerState(lr=0.3, momentum=0.9))
    np.testing.assert_array_equal(p["a"], before)


def test_sgd_non_finite_names_layer():
    p = {"3.w": np.ones(2)}
    with pytest.raises(NumericError) as err:
        sgd_step(p, {"3.w": np.array([np.inf, 0.0])}, OptimizerState(lr=1.0))
    assert err.value.layer == "3"
    np.testing.assert_array_equal(p["3.w"], np.ones(2))
