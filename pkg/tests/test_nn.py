import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cgmq.gates import SatState
from cgmq.nn import (SGD, Adam, Conv2d, Dense, Flatten, InputQuant, MaxPool2d, Network, ReLU,
                     ShapeError, attach_quantizers, cross_entropy_loss, init_weights, lenet5)
from oracles import softmax_ce

FD_STEP = 1e-3
FD_RTOL = 1e-3


def to_float64(net):
    for layer in net.parameterized():
        for k in layer.params:
            layer.params[k] = layer.params[k].astype(np.float64)


def numeric_grad(f, arr, idx, h=FD_STEP):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_layer(layer, x, rng, n_checks=12):
    """Finite differences of ``sum(probe * layer(x))`` against backward."""
    out = layer.forward(x)
    probe = rng.normal(size=out.shape)
    dx = layer.backward(probe)

    def f():
        return float(np.sum(probe * layer.forward(x)))

    flat = x.reshape(-1)
    for i in rng.choice(flat.size, size=min(n_checks, flat.size), replace=False):
        idx = np.unravel_index(i, x.shape)
        assert rel_err(dx[idx], numeric_grad(f, x, idx)) < FD_RTOL
    for k, p in layer.params.items():
        layer.forward(x)
        layer.backward(probe)
        g = layer.grads[k]
        for i in rng.choice(p.size, size=min(n_checks, p.size), replace=False):
            idx = np.unravel_index(i, p.shape)
            assert rel_err(g[idx], numeric_grad(f, p, idx)) < FD_RTOL, k


class TestForwardExamples:
    def test_dense_identity(self):
        d = Dense(2, 2)
        d.params["weight"][...] = np.eye(2)
        assert_array_equal(d.forward(np.array([[1.0, 2.0]], dtype=np.float32)), [[1.0, 2.0]])

    def test_relu(self):
        assert_array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_conv_1x1_identity(self, rng):
        c = Conv2d(1, 1, 1, 5)
        c.params["weight"][...] = 1.0
        x = rng.normal(size=(2, 1, 5, 5)).astype(np.float32)
        assert_array_equal(c.forward(x), x)

    def test_conv_matches_direct_loop(self, rng):
        c = Conv2d(2, 3, 3, 5)
        c.params["weight"][...] = rng.normal(size=c.params["weight"].shape)
        c.params["bias"][...] = rng.normal(size=3)
        x = rng.normal(size=(2, 2, 5, 5))
        out = c.forward(x)
        w, b = c.params["weight"].astype(np.float64), c.params["bias"].astype(np.float64)
        for n in range(2):
            for o in range(3):
                for i in range(3):
                    for j in range(3):
                        ref = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
                        assert_allclose(out[n, o, i, j], ref, rtol=1e-6)

    def test_maxpool_picks_window_max(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        assert_array_equal(MaxPool2d(2).forward(x)[0, 0], [[5, 7], [13, 15]])

    def test_lenet_shapes(self, rng):
        net = lenet5()
        init_weights(net, 0)
        assert net.forward(rng.normal(size=(3, 1, 28, 28)).astype(np.float32)).shape == (3, 10)
        assert [r["out_shape"] for r in net.describe()][-4:] == [[800], [500], [500], [10]]

    def test_shape_error_names_layer(self):
        net = lenet5()
        with pytest.raises(ShapeError, match="conv1"):
            net.forward(np.zeros((1, 1, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeError, match="dense"):
            Dense(3, 2).forward(np.zeros((1, 4)))

    def test_forward_is_pure(self, rng):
        net = lenet5()
        init_weights(net, 3)
        attach_quantizers(net)
        x = rng.normal(size=(4, 1, 28, 28)).astype(np.float32)
        assert_array_equal(net.forward(x), net.forward(x))

    def test_init_is_seeded(self):
        a, b = lenet5(), lenet5()
        init_weights(a, 7)
        init_weights(b, 7)
        for (ka, va), (kb, vb) in zip(a.named_params().items(), b.named_params().items()):
            assert ka == kb
            assert_array_equal(va, vb)

    def test_input_quant_is_identity_on_pixels(self):
        raw = np.arange(256, dtype=np.float64)
        x = ((raw / 255 - 0.5) / 0.5).astype(np.float32)
        assert_array_equal(InputQuant(-1.0, 1.0, 8).forward(x), x)

    def test_duplicate_layer_names(self):
        with pytest.raises(ValueError):
            Network([("a", ReLU()), ("a", ReLU())], (3,))


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = cross_entropy_loss(np.zeros((4, 10), dtype=np.float32), np.arange(4))
        assert_allclose(loss, math.log(10), rtol=1e-12)

    def test_saturated_correct(self):
        logits = np.zeros((1, 10), dtype=np.float32)
        logits[0, 3] = 1e6
        assert cross_entropy_loss(logits, np.array([3]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        loss, _ = cross_entropy_loss(np.array([[0.5, -0.5]]), np.array([0]))
        assert_allclose(loss, math.log(1 + math.exp(-1)), rtol=1e-12)
        assert_allclose(loss, 0.313262, atol=1e-6)

    def test_matches_oracle_and_gradient(self, rng):
        logits = rng.normal(size=(5, 10))
        y = rng.integers(0, 10, 5)
        loss, grad = cross_entropy_loss(logits, y)
        assert_allclose(loss, softmax_ce(logits, y), rtol=1e-12)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        p[np.arange(5), y] -= 1
        assert_allclose(grad, p / 5, rtol=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            cross_entropy_loss(np.zeros((1, 10)), np.array([10]))


class TestBackward:
    def test_dense_gradcheck(self, rng):
        d = Dense(4, 3)
        d.params["weight"] = rng.normal(size=(4, 3))
        d.params["bias"] = rng.normal(size=3)
        check_layer(d, rng.normal(size=(5, 4)), rng)

    def test_conv_gradcheck(self, rng):
        c = Conv2d(2, 3, 3, 6)
        c.params["weight"] = rng.normal(size=(3, 2, 3, 3))
        c.params["bias"] = rng.normal(size=3)
        check_layer(c, rng.normal(size=(2, 2, 6, 6)), rng)

    def test_relu_gradcheck(self, rng):
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 0.01] = 0.5
        check_layer(ReLU(), x, rng)

    def test_maxpool_gradcheck(self, rng):
        check_layer(MaxPool2d(2), rng.normal(size=(2, 3, 4, 4)), rng)

    def test_flatten_gradcheck(self, rng):
        check_layer(Flatten(), rng.normal(size=(2, 3, 2, 2)), rng)

    def test_lenet_float_gradcheck(self, rng):
        # a conv1 weight moves thousands of activations; a small step keeps
        # every max-pool window and ReLU on the same side between probes
        net = lenet5()
        init_weights(net, 1)
        to_float64(net)
        x = rng.normal(size=(2, 1, 28, 28))
        y = np.array([3, 7])

        def f():
            return cross_entropy_loss(net.forward(x), y)[0]

        _, d = cross_entropy_loss(net.forward(x), y)
        net.backward(d)
        grads = {k: v.copy() for k, v in net.named_grads().items()}
        params = net.named_params()
        for k, p in params.items():
            for i in rng.choice(p.size, size=4, replace=False):
                idx = np.unravel_index(i, p.shape)
                num = numeric_grad(f, p, idx, h=1e-6)
                if abs(num) < 1e-7 and abs(grads[k][idx]) < 1e-7:
                    continue
                assert rel_err(grads[k][idx], num) < FD_RTOL, (k, idx)

    def test_zero_upstream_gives_zero_grads(self, rng):
        net = lenet5()
        init_weights(net, 2)
        net.forward(rng.normal(size=(2, 1, 28, 28)).astype(np.float32))
        net.backward(np.zeros((2, 10), dtype=np.float32))
        assert all(not g.any() for g in net.named_grads().values())

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            lenet5().backward(np.zeros((1, 10), dtype=np.float32))
        with pytest.raises(RuntimeError):
            Dense(2, 2).backward(np.zeros((1, 2)))

    def test_skipping_input_gradient_keeps_param_grads(self, rng):
        net = lenet5()
        init_weights(net, 4)
        x = rng.normal(size=(2, 1, 28, 28)).astype(np.float32)
        d = rng.normal(size=(2, 10)).astype(np.float32)
        net.forward(x)
        assert net.backward(d).shape == x.shape
        full = {k: v.copy() for k, v in net.named_grads().items()}
        net.forward(x)
        assert net.backward(d, input_grad=False) is None
        for k, v in net.named_grads().items():
            assert_array_equal(v, full[k])

    def test_quantized_network_has_no_gate_gradient(self, rng):
        net = lenet5()
        init_weights(net, 5)
        attach_quantizers(net)
        net.forward(rng.normal(size=(2, 1, 28, 28)).astype(np.float32))
        net.backward(rng.normal(size=(2, 10)).astype(np.float32))
        assert not any(k.endswith(".gate") for k in net.named_grads())


class TestQuantizedLayout:
    def test_gate_count_per_layer(self):
        net = lenet5()
        attach_quantizers(net)
        names = sorted(net.gates())
        assert names == ["conv1.aq.gate", "conv1.wq.gate", "conv2.aq.gate", "conv2.wq.gate",
                         "fc1.aq.gate", "fc1.wq.gate", "fc2.wq.gate"]
        assert all(g.value.shape == () for g in net.gates().values())

    def test_element_gate_shapes(self):
        net = lenet5()
        attach_quantizers(net, "element")
        gates = net.gates()
        assert gates["conv1.wq.gate"].value.shape == (20, 1, 5, 5)
        assert gates["conv1.aq.gate"].value.shape == (20, 24, 24)
        assert gates["fc1.aq.gate"].value.shape == (500,)

    def test_activation_quantizer_after_relu(self):
        net = lenet5()
        attach_quantizers(net)
        names = [l.name for l in net.layers]
        assert names.index("fc1.aq") == names.index("relu1") + 1
        assert names[0] == "input.q"

    def test_state_dict_round_trip(self, rng):
        a = lenet5()
        init_weights(a, 1)
        attach_quantizers(a)
        a.gates()["fc1.wq.gate"].value[...] = 1.5
        b = lenet5()
        attach_quantizers(b)
        b.load_state_dict(a.state_dict())
        x = rng.normal(size=(2, 1, 28, 28)).astype(np.float32)
        assert_array_equal(a.forward(x), b.forward(x))

    def test_load_state_dict_rejects_mismatch(self):
        net = lenet5()
        with pytest.raises(KeyError):
            net.load_state_dict({"conv1.weight": np.zeros((20, 1, 5, 5))})


class TestOptimizers:
    def test_adam_first_step(self):
        p = {"t": np.array([1.0])}
        Adam(0.001).step(p, {"t": np.array([0.1])})
        assert_allclose(p["t"], 0.999, atol=1e-6)

    def test_adam_zero_gradient(self):
        p = {"t": np.array([1.0])}
        opt = Adam(0.001)
        for _ in range(5):
            opt.step(p, {"t": np.array([0.0])})
        assert p["t"][0] == 1.0

    def test_adam_monotone_for_positive_gradient(self):
        p = {"t": np.array([1.0])}
        opt = Adam(0.001)
        seen = [1.0]
        for _ in range(3):
            opt.step(p, {"t": np.array([0.1])})
            seen.append(float(p["t"][0]))
        assert seen[0] > seen[1] > seen[2] > seen[3]
        assert opt.t == 3

    def test_adam_moment_shapes(self):
        p = {"w": np.ones((2, 3))}
        opt = Adam()
        opt.step(p, {"w": np.ones((2, 3))})
        assert opt.m["w"].shape == opt.v["w"].shape == (2, 3)
        with pytest.raises(ShapeError):
            opt.step(p, {"w": np.ones(3)})

    def test_sgd(self):
        p = {"g": np.array([5.5])}
        SGD(0.01).step(p, {"g": np.array([2.0])})
        assert_allclose(p["g"], 5.48)
        SGD(0.01).step(p, {"g": np.array([0.0])})
        assert_allclose(p["g"], 5.48)
        with pytest.raises(ValueError):
            SGD(0.0)


def test_sat_state_values():
    assert SatState.from_satisfied(True) is SatState.SAT
    assert SatState.from_satisfied(False) is SatState.UNSAT
