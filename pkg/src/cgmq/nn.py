"""Small deterministic CNN engine with hand-written backpropagation.

Tensors are plain numpy arrays (float32 for training; layers also accept
float64 input, which the gradient checks use).  Layers cache what backward
needs during ``forward``; ``Network`` chains them and exposes parameters,
gradients and fake-quant blocks by dotted name.
"""

from __future__ import annotations

import math

import numpy as np

from . import _nnkernels as _nnk
from .gates import GateVariable
from .quantizer import FakeQuant, QuantRange


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: str, expected, got):
        super().__init__(f"layer {layer!r}: expected input shape {expected}, got {tuple(got)}")
        self.layer = layer
        self.expected = expected
        self.got = tuple(got)


def _check_trailing(name, expected, x):
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(name, ("N",) + tuple(expected), x.shape)


class Layer:
    kind = "layer"
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.name = self.kind

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape


class _Parameterized(Layer):
    """Layer with a weight tensor, a bias, and an optional weight quantizer."""

    weight_quant: FakeQuant | None = None

    def _effective_weight(self):
        w = self.params["weight"]
        if self.weight_quant is None:
            return w
        return self.weight_quant.forward(w)

    def _store_weight_grad(self, dw_eff):
        if self.weight_quant is None:
            self.grads["weight"] = dw_eff
        else:
            self.grads["weight"] = self.weight_quant.backward(dw_eff)


class Conv2d(_Parameterized):
    """Valid (no padding), stride-1 convolution.  Weight layout ``(O, I, k, k)``."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, in_size):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.in_size = in_size
        self.out_size = in_size - kernel_size + 1
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel_size, kernel_size),
                                         dtype=np.float32)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)
        self._cache = None

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size**2

    def output_shape(self, in_shape):
        return (self.out_channels, self.out_size, self.out_size)

    def forward(self, x):
        _check_trailing(self.name, (self.in_channels, self.in_size, self.in_size), x)
        n, k, o = x.shape[0], self.kernel_size, self.out_size
        w = self._effective_weight()
        cols = _nnk.im2col(np.ascontiguousarray(x), k)
        out = cols @ w.reshape(self.out_channels, -1).T.astype(x.dtype, copy=False)
        out += self.params["bias"].astype(x.dtype, copy=False)
        self._cache = (x.shape, cols, w)
        return _nnk.rows_to_nchw(out, n, self.out_channels, o, o)

    def backward(self, dout, input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"layer {self.name!r}: backward before forward")
        x_shape, cols, w = self._cache
        k = self.kernel_size
        dmat = _nnk.nchw_to_rows(np.ascontiguousarray(dout))
        self.grads["bias"] = dmat.sum(axis=0).astype(self.params["bias"].dtype, copy=False)
        dw = (dmat.T @ cols).reshape(w.shape)
        self._store_weight_grad(dw.astype(self.params["weight"].dtype, copy=False))
        if not input_grad:
            return None
        dcols = dmat @ w.reshape(self.out_channels, -1).astype(dout.dtype, copy=False)
        return _nnk.col2im(dcols, *x_shape, k)


class Dense(_Parameterized):
    """``y = x @ W + b`` with weight layout ``(in, out)``."""

    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = np.zeros((in_features, out_features), dtype=np.float32)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)
        self._cache = None

    @property
    def fan_in(self):
        return self.in_features

    def output_shape(self, in_shape):
        return (self.out_features,)

    def forward(self, x):
        _check_trailing(self.name, (self.in_features,), x)
        w = self._effective_weight()
        self._cache = (x, w)
        return x @ w.astype(x.dtype, copy=False) + self.params["bias"].astype(x.dtype, copy=False)

    def backward(self, dout, input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"layer {self.name!r}: backward before forward")
        x, w = self._cache
        self.grads["bias"] = dout.sum(axis=0).astype(self.params["bias"].dtype, copy=False)
        self._store_weight_grad((x.T @ dout).astype(self.params["weight"].dtype, copy=False))
        if not input_grad:
            return None
        return dout @ w.T.astype(dout.dtype, copy=False)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, dout):
        return np.where(self._mask, dout, np.zeros((), dtype=dout.dtype))


class MaxPool2d(Layer):
    """Non-overlapping ``size x size`` max pooling.  The gradient goes to the
    first maximal element of each window."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(self.name, f"spatial dims divisible by {s}", x.shape)
        out, arg = _nnk.maxpool_forward(np.ascontiguousarray(x), s)
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        shape, arg = self._cache
        return _nnk.maxpool_backward(np.ascontiguousarray(dout), arg, self.size, shape[2], shape[3])


class InputQuant(Layer):
    """Fixed unsigned ``bits``-bit quantizer over the data range ``[lo, hi]``.

    The grid is ``lo + n * (hi - lo) / (2^bits - 1)``; it has no gate and no
    learnable range and does not enter the BOP cost.  On 8-bit image data
    normalized affinely onto ``[lo, hi]`` it is the identity.
    """

    kind = "inputquant"

    def __init__(self, lo=-1.0, hi=1.0, bits=8):
        super().__init__()
        if not hi > lo:
            raise ValueError(f"input range must satisfy lo < hi, got [{lo}, {hi}]")
        self.lo = float(lo)
        self.hi = float(hi)
        self.bits = int(bits)

    def forward(self, x):
        m = 2.0**self.bits - 1.0
        xc = np.clip(x.astype(np.float64), self.lo, self.hi)
        n = np.floor((xc - self.lo) * (m / (self.hi - self.lo)) + 0.5)
        self._x = x
        return (self.lo + n * ((self.hi - self.lo) / m)).astype(x.dtype)

    def backward(self, dout):
        inside = (self._x >= self.lo) & (self._x <= self.hi)
        return np.where(inside, dout, np.zeros((), dtype=dout.dtype))


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Network:
    """Sequential network over named layers.

    Activation fake-quant blocks appear as ordinary layers; weight fake-quant
    blocks hang off their parameterized layer as ``weight_quant``.
    """

    def __init__(self, layers, input_shape):
        self.layers: list[Layer] = []
        self.input_shape = tuple(input_shape)
        names = set()
        for name, layer in layers:
            if name in names:
                raise ValueError(f"duplicate layer name {name!r}")
            names.add(name)
            layer.name = name
            self.layers.append(layer)
        self._forward_done = False

    def __getitem__(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(self.layers[0].name, ("N",) + self.input_shape, x.shape)
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        return x

    def backward(self, dout, input_grad=True):
        """Backpropagate ``dout``; returns the input gradient, or ``None`` when
        ``input_grad`` is false and the first layer can skip computing it."""
        if not self._forward_done:
            raise RuntimeError("backward called before forward")
        layers = self.layers
        if not input_grad:
            # nothing before the first weight layer has anything to learn
            start = next(i for i, l in enumerate(layers) if isinstance(l, _Parameterized))
            layers = layers[start:]
        for layer in reversed(layers[1:]):
            dout = layer.backward(dout)
        if isinstance(layers[0], _Parameterized):
            dout = layers[0].backward(dout, input_grad=input_grad)
        else:
            dout = layers[0].backward(dout)
        self._forward_done = False
        return dout

    def parameterized(self) -> list[_Parameterized]:
        return [l for l in self.layers if isinstance(l, _Parameterized)]

    def quantizers(self) -> list[FakeQuant]:
        out = []
        for layer in self.layers:
            if isinstance(layer, _Parameterized) and layer.weight_quant is not None:
                out.append(layer.weight_quant)
            elif isinstance(layer, FakeQuant):
                out.append(layer)
        return out

    @property
    def is_quantized(self) -> bool:
        return bool(self.quantizers())

    def named_params(self, include_ranges=True, include_weights=True) -> dict:
        out = {}
        for layer in self.layers:
            if isinstance(layer, _Parameterized):
                if include_weights:
                    for k, v in layer.params.items():
                        out[f"{layer.name}.{k}"] = v
                if include_ranges and layer.weight_quant is not None:
                    out[f"{layer.name}.wq.beta"] = layer.weight_quant.params["beta"]
            elif isinstance(layer, FakeQuant) and include_ranges:
                out[f"{layer.name}.beta"] = layer.params["beta"]
        return out

    def named_grads(self, include_ranges=True, include_weights=True) -> dict:
        out = {}
        for layer in self.layers:
            if isinstance(layer, _Parameterized):
                if include_weights:
                    for k in layer.params:
                        out[f"{layer.name}.{k}"] = layer.grads[k]
                if include_ranges and layer.weight_quant is not None:
                    out[f"{layer.name}.wq.beta"] = layer.weight_quant.grads["beta"]
            elif isinstance(layer, FakeQuant) and include_ranges:
                out[f"{layer.name}.beta"] = layer.grads["beta"]
        return out

    def gates(self) -> dict[str, GateVariable]:
        return {fq.gate.name: fq.gate for fq in self.quantizers()}

    def clamp_ranges(self):
        for fq in self.quantizers():
            fq.range.clamp()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.named_params().items()}
        for name, gate in self.gates().items():
            state[name] = gate.value.copy()
        return state

    def load_state_dict(self, state):
        targets = dict(self.named_params())
        targets.update({k: g.value for k, g in self.gates().items()})
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in targets.items():
            src = np.asarray(state[k], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ShapeError(k, arr.shape, src.shape)
            arr[...] = src

    def input_quant(self) -> InputQuant | None:
        first = self.layers[0]
        return first if isinstance(first, InputQuant) else None

    def quant_meta(self) -> dict:
        """Static quantizer layout (signedness, granularity) for checkpoints."""
        meta = {fq.gate.name: {"signed": fq.range.signed, "target": fq.target,
                               "gate_shape": list(fq.gate.value.shape)}
                for fq in self.quantizers()}
        iq = self.input_quant()
        if iq is not None:
            meta["input"] = {"range": [iq.lo, iq.hi], "bits": iq.bits}
        return meta

    def describe(self) -> list[dict]:
        shape = self.input_shape
        rows = []
        for layer in self.layers:
            out = layer.output_shape(shape)
            row = {"name": layer.name, "kind": layer.kind,
                   "in_shape": list(shape), "out_shape": list(out)}
            if isinstance(layer, _Parameterized):
                row["weight_shape"] = list(layer.params["weight"].shape)
            rows.append(row)
            shape = out
        return rows


def lenet5() -> Network:
    """Caffe LeNet-5: conv(20@5x5) -> pool -> conv(50@5x5) -> pool ->
    dense(800->500) -> ReLU -> dense(500->10)."""
    return Network([
        ("conv1", Conv2d(1, 20, 5, 28)),
        ("pool1", MaxPool2d(2)),
        ("conv2", Conv2d(20, 50, 5, 12)),
        ("pool2", MaxPool2d(2)),
        ("flatten", Flatten()),
        ("fc1", Dense(800, 500)),
        ("relu1", ReLU()),
        ("fc2", Dense(500, 10)),
    ], input_shape=(1, 28, 28))


def init_weights(net: Network, seed: int) -> None:
    """Kaiming-uniform (fan-in, ReLU gain) weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in net.parameterized():
        bound = math.sqrt(6.0 / layer.fan_in)
        w = layer.params["weight"]
        w[...] = rng.uniform(-bound, bound, size=w.shape).astype(np.float32)
        layer.params["bias"][...] = 0.0


def activation_sites(net: Network) -> list[tuple[str, int]]:
    """Where each parameterized layer's output activation is quantized:
    ``(layer name, insertion index)``.  The insertion point skips an
    immediately following ReLU.  The last parameterized layer is excluded
    because the logits stay in floating point."""
    params = net.parameterized()
    sites = []
    for layer in params[:-1]:
        idx = net.layers.index(layer) + 1
        if idx < len(net.layers) and isinstance(net.layers[idx], ReLU):
            idx += 1
        sites.append((layer.name, idx))
    return sites


def attach_quantizers(net: Network, granularity: str = "layer", signed=None,
                      init_gate: float = 5.5, input_range=(-1.0, 1.0)) -> Network:
    """Insert weight and activation fake-quant blocks in place.

    Ranges start at ``beta = 1`` and are set by calibration.  ``signed`` maps
    gate names to signedness (used when rebuilding from a checkpoint).  A
    fixed 8-bit input quantizer over ``input_range`` is prepended unless
    ``input_range`` is ``None``.
    """
    if net.is_quantized:
        raise ValueError("network already carries quantizers")
    if granularity not in ("layer", "element"):
        raise ValueError(f"granularity must be 'layer' or 'element', got {granularity!r}")
    signed = signed or {}
    shapes = {}
    shape = net.input_shape
    for layer in net.layers:
        shape = layer.output_shape(shape)
        shapes[layer.name] = shape
    sites = activation_sites(net)

    for layer in net.parameterized():
        name = f"{layer.name}.wq.gate"
        gshape = layer.params["weight"].shape if granularity == "element" else ()
        gate = GateVariable.initial(name, "weight", gshape, init_gate)
        layer.weight_quant = FakeQuant(gate, QuantRange(1.0, signed.get(name, True)), "weight")

    for offset, (lname, idx) in enumerate(sites):
        name = f"{lname}.aq.gate"
        gshape = shapes[lname] if granularity == "element" else ()
        gate = GateVariable.initial(name, "activation", gshape, init_gate)
        fq = FakeQuant(gate, QuantRange(1.0, signed.get(name, True)), "activation")
        fq.name = f"{lname}.aq"
        net.layers.insert(idx + offset, fq)
    if input_range is not None:
        iq = InputQuant(*input_range)
        iq.name = "input.q"
        net.layers.insert(0, iq)
    return net


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


class Adam:
    """Adam with bias correction; moments are created lazily per name."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeError(k, p.shape, g.shape)
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


class SGD:
    """Plain gradient descent without momentum: ``p <- p - lr * d``."""

    def __init__(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, params: dict, directions: dict) -> None:
        for k, p in params.items():
            p -= self.lr * np.asarray(directions[k], dtype=p.dtype)
