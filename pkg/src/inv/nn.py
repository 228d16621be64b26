"""Dense MLPs with hand-written backprop, Adam, and a flat f32 weight blob.

Networks are batch-major: an input batch is ``(B, input_dim)`` and a layer
computes ``act(x @ W.T + b)`` with ``W`` stored ``(out_dim, in_dim)``.

Three head layouts are supported (see :class:`~inv.config.Heads`). All of
them share a plain ReLU trunk; none has skip connections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Activation, Heads, LayerShape, NetworkConfig, PosEncodingSpec
from .errors import CorruptData, InvalidArgument

F32 = np.dtype("<f4")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise InvalidArgument("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise InvalidArgument(
                f"weights rows ({self.weights.shape[0]}) != bias length ({self.bias.shape[0]})"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def shape(self) -> LayerShape:
        return LayerShape(self.in_dim, self.out_dim, self.activation)

    def copy(self) -> DenseLayer:
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)

    def tobytes(self) -> bytes:
        return self.weights.astype(F32, copy=False).tobytes() + self.bias.astype(F32, copy=False).tobytes()

    def same_bits(self, other: DenseLayer) -> bool:
        return self.activation == other.activation and self.tobytes() == other.tobytes() and (
            self.weights.shape == other.weights.shape
        )


_HEAD_COUNT = {Heads.RGB: 0, Heads.RGB_SIGMA: 2, Heads.RGB_SIGMA_VIEWDEP: 4}


@dataclass
class MlpNetwork:
    layers: list[DenseLayer]
    input_dim: int
    heads: Heads = Heads.RGB
    view_dim: int = 0

    def __post_init__(self):
        self.heads = Heads(self.heads)
        _validate_topology(self.layers, self.input_dim, self.heads, self.view_dim)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def trunk(self) -> list[DenseLayer]:
        return self.layers[: len(self.layers) - _HEAD_COUNT[self.heads]]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim if self.heads is Heads.RGB else 4

    def copy(self) -> MlpNetwork:
        return MlpNetwork([l.copy() for l in self.layers], self.input_dim, self.heads, self.view_dim)

    def astype(self, dtype) -> MlpNetwork:
        layers = [
            DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers
        ]
        return MlpNetwork(layers, self.input_dim, self.heads, self.view_dim)

    def param_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def same_bits(self, other: MlpNetwork) -> bool:
        return (
            self.heads == other.heads
            and self.input_dim == other.input_dim
            and len(self.layers) == len(other.layers)
            and all(a.same_bits(b) for a, b in zip(self.layers, other.layers))
        )


def _validate_topology(layers, input_dim, heads, view_dim):
    n_heads = _HEAD_COUNT[heads]
    if len(layers) < n_heads + 1:
        raise InvalidArgument(f"{heads.value} needs at least {n_heads + 1} layers, got {len(layers)}")
    trunk = layers[: len(layers) - n_heads]
    if heads is Heads.RGB:
        expected_in = input_dim
    else:
        expected_in = input_dim - view_dim
    for i, layer in enumerate(trunk):
        if layer.in_dim != expected_in:
            raise InvalidArgument(f"layer {i} expects input {layer.in_dim}, chain provides {expected_in}")
        expected_in = layer.out_dim
    width = expected_in
    if heads is Heads.RGB_SIGMA:
        sigma, rgb = layers[-2:]
        if sigma.in_dim != width or rgb.in_dim != width or sigma.out_dim != 1 or rgb.out_dim != 3:
            raise InvalidArgument("rgb_sigma heads must map trunk width to 1 and 3 outputs")
    elif heads is Heads.RGB_SIGMA_VIEWDEP:
        sigma, feat, view, rgb = layers[-4:]
        ok = (
            sigma.in_dim == width
            and sigma.out_dim == 1
            and feat.in_dim == width
            and view.in_dim == feat.out_dim + view_dim
            and rgb.in_dim == view.out_dim
            and rgb.out_dim == 3
        )
        if not ok:
            raise InvalidArgument("view-dependent head dimensions do not line up")


def network_from_layers(layers: Sequence[DenseLayer], config: NetworkConfig) -> MlpNetwork:
    return MlpNetwork(list(layers), config.input_dim, config.heads, config.view_dim)


# ---------------------------------------------------------------------------
# positional encoding


def positional_encode(p: np.ndarray, spec: PosEncodingSpec) -> np.ndarray:
    """Sinusoidal encoding, frequency-major.

    ``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``
    where each sin/cos block covers all ``input_dim`` coordinates. Accepts a
    single vector or a ``(B, input_dim)`` batch; inputs are expected in [-1, 1].
    """
    p = np.asarray(p)
    if p.shape[-1] != spec.input_dim:
        raise InvalidArgument(f"expected {spec.input_dim} coordinates, got {p.shape[-1]}")
    dtype = p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64
    p = p.astype(dtype, copy=False)
    parts = [p] if spec.include_input else []
    for l in range(spec.num_freqs):
        arg = p * dtype.type((2.0**l) * np.pi)
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros(p.shape[:-1] + (0,), dtype=dtype)
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# forward / backward


def _act(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0)
    if activation is Activation.SIGMOID:
        # tanh form never overflows in float32
        half = z.dtype.type(0.5) if isinstance(z, np.ndarray) else 0.5
        return half * (np.tanh(half * z) + 1)
    return z


def _act_grad(d: np.ndarray, z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return d * (z > 0)
    if activation is Activation.SIGMOID:
        return d * a * (1 - a)
    return d


@dataclass
class ForwardCache:
    inputs: list  # input of each layer, aligned with net.layers
    pre: list  # pre-activation of each layer
    post: list  # post-activation of each layer
    layer_ids: tuple = field(default_factory=tuple)


def _layer_forward(layer: DenseLayer, x: np.ndarray, cache: ForwardCache, i: int) -> np.ndarray:
    z = x @ layer.weights.T
    z += layer.bias
    a = _act(z, layer.activation)
    cache.inputs[i] = x
    cache.pre[i] = z
    cache.post[i] = a
    return a


def mlp_forward(net: MlpNetwork, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate ``net`` on a batch; returns ``(output, cache)``.

    Output is ``(B, 3)`` RGB for the 2D layout and ``(B, 4)`` as
    ``[r, g, b, raw_sigma]`` for the radiance-field layouts.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InvalidArgument(f"input batch must be (B, {net.input_dim}), got {x.shape}")
    n = net.num_layers
    cache = ForwardCache([None] * n, [None] * n, [None] * n, tuple(id(l) for l in net.layers))
    n_trunk = len(net.trunk)
    h = x[:, : net.input_dim - net.view_dim] if net.view_dim else x
    for i in range(n_trunk):
        h = _layer_forward(net.layers[i], h, cache, i)
    if net.heads is Heads.RGB:
        return h, cache
    if net.heads is Heads.RGB_SIGMA:
        sigma = _layer_forward(net.layers[n - 2], h, cache, n - 2)
        rgb = _layer_forward(net.layers[n - 1], h, cache, n - 1)
        return np.concatenate([rgb, sigma], axis=1), cache
    sigma = _layer_forward(net.layers[n - 4], h, cache, n - 4)
    feat = _layer_forward(net.layers[n - 3], h, cache, n - 3)
    v = np.concatenate([feat, x[:, net.input_dim - net.view_dim :]], axis=1)
    v = _layer_forward(net.layers[n - 2], v, cache, n - 2)
    rgb = _layer_forward(net.layers[n - 1], v, cache, n - 1)
    return np.concatenate([rgb, sigma], axis=1), cache


def _layer_backward(layer, cache, i, d_out, grads, frozen, need_input_grad=True):
    dz = _act_grad(d_out, cache.pre[i], cache.post[i], layer.activation)
    if frozen is None or not frozen[i]:
        grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
    if need_input_grad:
        return dz @ layer.weights
    return None


def mlp_backward(
    net: MlpNetwork,
    cache: ForwardCache,
    d_output: np.ndarray,
    frozen: Sequence[bool] | None = None,
) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Reverse-mode gradients ``[(dW, db), ...]`` aligned with ``net.layers``.

    Layers flagged in ``frozen`` get ``None`` instead of a gradient (their
    weights still carry the signal through to earlier layers). Backprop stops
    early once every remaining earlier layer is frozen.
    """
    n = net.num_layers
    if len(cache.pre) != n or cache.layer_ids != tuple(id(l) for l in net.layers):
        raise InvalidArgument("cache was not produced by this network")
    if frozen is not None and len(frozen) != n:
        raise InvalidArgument(f"freeze mask has {len(frozen)} entries for {n} layers")
    d_output = np.asarray(d_output)
    if d_output.shape != (cache.inputs[0].shape[0], net.output_dim):
        raise InvalidArgument(f"d_output shape {d_output.shape} does not match network output")

    grads: list = [None] * n
    n_trunk = len(net.trunk)
    # earliest trainable layer; nothing before it needs an input gradient
    first_live = 0
    if frozen is not None:
        live = [i for i in range(n) if not frozen[i]]
        if not live:
            return grads
        first_live = live[0]

    if net.heads is Heads.RGB:
        dh = d_output
        top = n_trunk
    elif net.heads is Heads.RGB_SIGMA:
        dh = _layer_backward(net.layers[n - 1], cache, n - 1, d_output[:, :3], grads, frozen)
        dh = dh + _layer_backward(net.layers[n - 2], cache, n - 2, d_output[:, 3:], grads, frozen)
        top = n_trunk
    else:
        dv = _layer_backward(net.layers[n - 1], cache, n - 1, d_output[:, :3], grads, frozen)
        dcat = _layer_backward(net.layers[n - 2], cache, n - 2, dv, grads, frozen)
        width = net.layers[n - 3].out_dim
        dh = _layer_backward(net.layers[n - 3], cache, n - 3, dcat[:, :width], grads, frozen)
        dh = dh + _layer_backward(net.layers[n - 4], cache, n - 4, d_output[:, 3:], grads, frozen)
        top = n_trunk
    for i in range(top - 1, first_live - 1, -1):
        dh = _layer_backward(net.layers[i], cache, i, dh, grads, frozen, need_input_grad=i > first_live)
    return grads


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, diff * diff.dtype.type(2.0 / diff.size)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0

    @classmethod
    def zeros_like(cls, net: MlpNetwork) -> AdamState:
        m = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
        v = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
        return cls(m, v, 0)

    def copy(self) -> AdamState:
        return AdamState(
            [(a.copy(), b.copy()) for a, b in self.m], [(a.copy(), b.copy()) for a, b in self.v], self.t
        )


def adam_step(
    net: MlpNetwork,
    grads: Sequence,
    state: AdamState,
    lr: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    mask: Sequence[bool] | None = None,
) -> tuple[MlpNetwork, AdamState]:
    """One bias-corrected Adam update, in place; layers with ``mask[i]`` set are skipped.

    Skipped layers keep their parameters and their moment buffers untouched.
    """
    n = net.num_layers
    if len(grads) != n or len(state.m) != n or len(state.v) != n:
        raise InvalidArgument("grads/state do not match the network's layer count")
    if mask is not None and len(mask) != n:
        raise InvalidArgument(f"freeze mask has {len(mask)} entries for {n} layers")
    if state.t < 0:
        raise InvalidArgument("Adam step counter must be non-negative")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, layer in enumerate(net.layers):
        if mask is not None and mask[i]:
            continue
        if grads[i] is None:
            raise InvalidArgument(f"missing gradient for trainable layer {i}")
        for p, g, m, v in zip((layer.weights, layer.bias), grads[i], state.m[i], state.v[i]):
            if g.shape != p.shape or m.shape != p.shape:
                raise InvalidArgument(f"shape mismatch in layer {i}: grad {g.shape} vs param {p.shape}")
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * np.square(g)
            denom = np.sqrt(v / p.dtype.type(c2))
            denom += p.dtype.type(eps)
            p -= p.dtype.type(lr / c1) * m / denom
    return net, state


# ---------------------------------------------------------------------------
# init / serialization


def init_layers(shapes: Sequence[LayerShape], rng: np.random.Generator) -> list[DenseLayer]:
    layers = []
    for s in shapes:
        a = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        w = rng.uniform(-a, a, size=(s.out_dim, s.in_dim)).astype(np.float32)
        layers.append(DenseLayer(w, np.zeros(s.out_dim, np.float32), s.activation))
    return layers


def init_network(config: NetworkConfig, seed: int) -> MlpNetwork:
    """Glorot-uniform weights, zero biases; bit-reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    return network_from_layers(init_layers(config.layer_shapes(), rng), config)


def serialize_layers(layers: Sequence[DenseLayer]) -> bytes:
    return b"".join(l.tobytes() for l in layers)


def deserialize_layers(data: bytes, shapes: Sequence[LayerShape]) -> list[DenseLayer]:
    expected = 4 * sum(s.param_count for s in shapes)
    if len(data) != expected:
        raise CorruptData(f"weight blob is {len(data)} bytes, layout needs {expected}")
    flat = np.frombuffer(data, dtype=F32).astype(np.float32)
    layers, off = [], 0
    for s in shapes:
        w = flat[off : off + s.in_dim * s.out_dim].reshape(s.out_dim, s.in_dim)
        off += s.in_dim * s.out_dim
        b = flat[off : off + s.out_dim]
        off += s.out_dim
        layers.append(DenseLayer(w.copy(), b.copy(), s.activation))
    return layers


def serialize_weights(net: MlpNetwork) -> bytes:
    """Layers in order; per layer row-major weights then bias; little-endian f32."""
    return serialize_layers(net.layers)


def deserialize_weights(data: bytes, config: NetworkConfig) -> MlpNetwork:
    return network_from_layers(deserialize_layers(data, config.layer_shapes()), config)

