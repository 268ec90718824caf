"""Small feed-forward networks with hand-written reverse-mode gradients.

Everything here is plain numpy over float64. Parameters are values:
no function mutates its inputs, updates return fresh objects. forward
accepts either a single input vector or a batch of rows; backward then
returns parameter gradients summed over the batch and the gradient with
respect to the input, which is what lets an actor update flow through
the critic's input.
"""

import base64
from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DOC_FORMAT = "mlp-v1"

_ACTIVATIONS = ("tanh", "relu", "linear")


class BadArchitecture(ValueError):
    """Layer dimensions or activation tags do not form a valid network."""


class ShapeMismatch(ValueError):
    """An input, upstream, or parameter array has the wrong shape."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str

    def __post_init__(self):
        w, b = np.asarray(self.weight, float), np.asarray(self.bias, float)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise BadArchitecture(f"bad layer shapes {w.shape}, {b.shape}")
        if self.activation not in _ACTIVATIONS:
            raise BadArchitecture(f"unknown activation {self.activation!r}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise BadArchitecture("non-finite layer parameters")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpParams:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise BadArchitecture("network needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise BadArchitecture(
                    f"layer input {cur.in_dim} does not chain with {prev.out_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def sizes(self):
        return (self.in_dim,) + tuple(l.out_dim for l in self.layers)

    @property
    def activations(self):
        return tuple(l.activation for l in self.layers)

    def copy(self):
        return MlpParams(tuple(
            Layer(l.weight.copy(), l.bias.copy(), l.activation)
            for l in self.layers
        ))


@dataclass(frozen=True)
class GradientBundle:
    """Gradients of a scalar objective: one array per parameter array,
    plus the gradient with respect to the network input."""

    weight_grads: tuple
    bias_grads: tuple
    input_grad: np.ndarray


@dataclass(frozen=True)
class ForwardCache:
    inputs: tuple    # input seen by each layer
    outputs: tuple   # activated output of each layer


def init_mlp(layer_sizes, activations, rng):
    """Fresh parameters: weights uniform in +-1/sqrt(fan_in), zero biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise BadArchitecture("need an input size and at least one layer size")
    if any(int(s) != s or s < 1 for s in sizes):
        raise BadArchitecture(f"layer sizes must be positive integers: {sizes}")
    if len(activations) != len(sizes) - 1:
        raise BadArchitecture(
            f"{len(sizes) - 1} layers but {len(activations)} activation tags"
        )
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return MlpParams(tuple(layers))


def _activate(tag, z):
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(tag, out):
    # derivative expressed through the activated output
    if tag == "tanh":
        return 1.0 - out * out
    if tag == "relu":
        return (out > 0.0).astype(float)
    return np.ones_like(out)


def forward(params, x):
    """Evaluate the network; returns (output, cache for backward).

    x may be a vector of length in_dim or a (batch, in_dim) array.
    """
    x = np.asarray(x, float)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ShapeMismatch(
            f"input shape {x.shape} does not match in_dim {params.in_dim}"
        )
    inputs = []
    outputs = []
    h = x
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, z)
        outputs.append(h)
    return h, ForwardCache(tuple(inputs), tuple(outputs))


def backward(params, cache, upstream):
    """Exact gradients of <upstream, output> for every parameter and the input.

    For batched caches the parameter gradients are summed over rows and
    input_grad has one row per batch element.
    """
    upstream = np.asarray(upstream, float)
    if upstream.shape != cache.outputs[-1].shape:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} does not match output "
            f"{cache.outputs[-1].shape}"
        )
    n_layers = len(params.layers)
    weight_grads = [None] * n_layers
    bias_grads = [None] * n_layers
    g = upstream
    for k in range(n_layers - 1, -1, -1):
        layer = params.layers[k]
        g = g * _activation_grad(layer.activation, cache.outputs[k])
        x = cache.inputs[k]
        if g.ndim == 2:
            weight_grads[k] = g.T @ x
            bias_grads[k] = g.sum(axis=0)
        else:
            weight_grads[k] = np.outer(g, x)
            bias_grads[k] = g.copy()
        g = g @ layer.weight
    return GradientBundle(tuple(weight_grads), tuple(bias_grads), g)


def input_gradient(params, cache, upstream):
    """Gradient of <upstream, output> in the network input only.

    Same backward sweep as backward() minus the parameter-gradient
    accumulation; used where only the chain into an earlier network is
    needed.
    """
    upstream = np.asarray(upstream, float)
    if upstream.shape != cache.outputs[-1].shape:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} does not match output "
            f"{cache.outputs[-1].shape}"
        )
    g = upstream
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        g = g * _activation_grad(layer.activation, cache.outputs[k])
        g = g @ layer.weight
    return g


@dataclass(frozen=True)
class AdamState:
    step: int
    m: tuple  # per layer: (weight moment, bias moment)
    v: tuple

    @classmethod
    def zeros(cls, params):
        m = tuple((np.zeros_like(l.weight), np.zeros_like(l.bias))
                  for l in params.layers)
        v = tuple((np.zeros_like(l.weight), np.zeros_like(l.bias))
                  for l in params.layers)
        return cls(0, m, v)


def adam_step(params, grads, state, lr):
    """One Adam descent step; returns (new params, new state)."""
    if len(grads.weight_grads) != len(params.layers):
        raise ShapeMismatch("gradient layer count does not match params")
    t = state.step + 1
    corr1 = 1.0 - ADAM_BETA1 ** t
    corr2 = 1.0 - ADAM_BETA2 ** t
    new_layers = []
    new_m = []
    new_v = []
    for layer, gw, gb, (mw, mb), (vw, vb) in zip(
            params.layers, grads.weight_grads, grads.bias_grads,
            state.m, state.v):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeMismatch("gradient shapes do not match params")
        mw = ADAM_BETA1 * mw + (1.0 - ADAM_BETA1) * gw
        mb = ADAM_BETA1 * mb + (1.0 - ADAM_BETA1) * gb
        vw = ADAM_BETA2 * vw + (1.0 - ADAM_BETA2) * gw * gw
        vb = ADAM_BETA2 * vb + (1.0 - ADAM_BETA2) * gb * gb
        weight = layer.weight - lr * (mw / corr1) / (np.sqrt(vw / corr2) + ADAM_EPS)
        bias = layer.bias - lr * (mb / corr1) / (np.sqrt(vb / corr2) + ADAM_EPS)
        new_layers.append(Layer(weight, bias, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return MlpParams(tuple(new_layers)), AdamState(t, tuple(new_m), tuple(new_v))


def polyak_update(target, online, tau):
    """Elementwise soft update: tau * online + (1 - tau) * target."""
    if target.sizes != online.sizes or target.activations != online.activations:
        raise ShapeMismatch(
            f"architectures differ: {target.sizes} vs {online.sizes}"
        )
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    layers = []
    for t_l, o_l in zip(target.layers, online.layers):
        layers.append(Layer(
            tau * o_l.weight + (1.0 - tau) * t_l.weight,
            tau * o_l.bias + (1.0 - tau) * t_l.bias,
            t_l.activation,
        ))
    return MlpParams(tuple(layers))


def _encode_array(arr):
    data = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(data.tobytes()).decode("ascii")


def _decode_array(text, shape):
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    expect = int(np.prod(shape)) * 8
    if len(raw) != expect:
        raise ValueError(f"expected {expect} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)


def params_to_doc(params):
    """JSON-ready description: architecture plus base64 float64 arrays."""
    return {
        "format": DOC_FORMAT,
        "sizes": list(params.sizes),
        "activations": list(params.activations),
        "weights": [_encode_array(l.weight) for l in params.layers],
        "biases": [_encode_array(l.bias) for l in params.layers],
    }


def params_from_doc(doc):
    if doc.get("format") != DOC_FORMAT:
        raise ValueError(f"unsupported network document {doc.get('format')!r}")
    sizes = doc["sizes"]
    activations = doc["activations"]
    if len(doc["weights"]) != len(sizes) - 1 or len(doc["biases"]) != len(sizes) - 1:
        raise ValueError("array count does not match architecture")
    layers = []
    for k, act in enumerate(activations):
        weight = _decode_array(doc["weights"][k], (sizes[k + 1], sizes[k]))
        bias = _decode_array(doc["biases"][k], (sizes[k + 1],))
        layers.append(Layer(weight, bias, act))
    return MlpParams(tuple(layers))
