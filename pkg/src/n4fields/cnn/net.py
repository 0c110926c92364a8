"""Layered network container, forward/backward passes and persistence."""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from .. import _binio
from ..errors import ConfigError, FormatError, ShapeError, StateError
from . import layers as L
from .layers import LayerSpec

NET_MAGIC = b"N4NN"
NET_FORMAT_VERSION = 1
_KIND_CODES = {kind: code for code, kind in enumerate(L.KINDS)}

_version_counter = itertools.count(1)


def default_stack(out_units: int = 16) -> list[LayerSpec]:
    """conv5x48-pool-conv3x64-pool-fc512-fc512-fc(out) with ReLUs and dropout."""
    return L.parse_stack(
        "conv5x48,relu,pool2,conv3x64,relu,pool2,"
        f"fc512,relu,dropout0.5,fc512,relu,dropout0.5,fc{out_units}"
    )


def with_output_units(stack, units: int) -> list[LayerSpec]:
    """Copy of ``stack`` whose last fully-connected layer has ``units`` outputs."""
    stack = list(stack)
    for k in range(len(stack) - 1, -1, -1):
        if stack[k].kind == "fc":
            stack[k] = LayerSpec("fc", units=units)
            return stack
    raise ConfigError("stack has no fully-connected output layer")


def layer_shapes(stack, input_shape) -> list[tuple]:
    """Activation shape after every layer (without the batch axis)."""
    shape = tuple(input_shape)
    shapes = []
    flat = False
    for spec in stack:
        if spec.kind == "conv":
            if flat:
                raise ConfigError("convolution after a fully-connected layer")
            c, h, w = shape
            ho, wo = (h - spec.size) // spec.stride + 1, (w - spec.size) // spec.stride + 1
            if min(h, w) < spec.size:
                raise ConfigError(f"{spec} kernel larger than {h}x{w} input")
            shape = (spec.units, ho, wo)
        elif spec.kind == "maxpool":
            if flat:
                raise ConfigError("pooling after a fully-connected layer")
            c, h, w = shape
            if min(h, w) < spec.size:
                raise ConfigError(f"{spec} window larger than {h}x{w} input")
            shape = (c, h // spec.size, w // spec.size)
        elif spec.kind == "fc":
            shape = (spec.units,)
            flat = True
        shapes.append(shape)
    return shapes


@dataclass
class ConvNet:
    layers: list[LayerSpec]
    params: list  # per layer: {"W": ..., "b": ...} or None
    input_shape: tuple[int, int, int]  # (C, M, M)
    version: int = field(default_factory=lambda: next(_version_counter))

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p["W"].dtype
        return np.dtype(np.float32)

    @property
    def output_dim(self) -> int:
        return int(np.prod(layer_shapes(self.layers, self.input_shape)[-1]))

    @property
    def first_param_layer(self) -> int:
        for k, p in enumerate(self.params):
            if p is not None:
                return k
        raise ConfigError("network has no parameters")

    def touch(self):
        """Mark parameters as modified, invalidating earlier caches."""
        self.version = next(_version_counter)

    def copy(self) -> "ConvNet":
        return ConvNet(list(self.layers), copy.deepcopy(self.params), self.input_shape)

    def n_params(self) -> int:
        return sum(p["W"].size + p["b"].size for p in self.params if p is not None)


@dataclass
class ForwardCache:
    net_version: int
    entries: list
    output_shape: tuple


def init_net(stack, input_shape, seed=0, sigma: float = 1e-2, dtype=np.float32,
             scheme: str = "gaussian") -> ConvNet:
    """Weights ~ N(0, sigma^2), biases zero; deterministic given ``seed``.

    ``scheme="fanin"`` instead uses ``sigma_l = sqrt(2 / fan_in)`` for every
    hidden layer, which keeps activations from shrinking with depth in short
    runs; the output layer keeps ``sigma`` so initial outputs stay near 0.
    """
    if scheme not in ("gaussian", "fanin"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    stack = list(stack)
    if not stack:
        raise ConfigError("empty layer stack")
    shapes = layer_shapes(stack, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    prev = tuple(input_shape)
    last = max(k for k, s in enumerate(stack) if s.kind in ("conv", "fc"))
    for k, (spec, shape) in enumerate(zip(stack, shapes)):
        layer_scheme = "gaussian" if k == last else scheme
        if spec.kind == "conv":
            fan_in = prev[0] * spec.size * spec.size
            w = rng.normal(0.0, _scale(layer_scheme, sigma, fan_in),
                           (spec.units, prev[0], spec.size, spec.size))
            params.append({"W": w.astype(dtype), "b": np.zeros(spec.units, dtype)})
        elif spec.kind == "fc":
            fan_in = int(np.prod(prev))
            w = rng.normal(0.0, _scale(layer_scheme, sigma, fan_in), (spec.units, fan_in))
            params.append({"W": w.astype(dtype), "b": np.zeros(spec.units, dtype)})
        else:
            params.append(None)
        prev = shape
    return ConvNet(stack, params, tuple(input_shape))


def _scale(scheme, sigma, fan_in):
    return sigma if scheme == "gaussian" else float(np.sqrt(2.0 / fan_in))


def _check_input(net: ConvNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"input {x.shape} does not match network input {net.input_shape}")
    return x.astype(net.dtype, copy=False)


def forward(net: ConvNet, x, train: bool = False, rng=None):
    """Run the network on a batch ``(B, C, M, M)`` (or a single patch).

    Returns ``(B, D)`` outputs, flattened after the last layer. In training
    mode also returns a :class:`ForwardCache` for :func:`backward`; dropout
    masks are drawn from ``rng``.
    """
    x = _check_input(net, x)
    if train and rng is None:
        raise StateError("training-mode forward needs a random generator")
    entries = [] if train else None
    for spec, params in zip(net.layers, net.params):
        if spec.kind == "conv":
            x, c = L.conv_forward(params, x, spec)
        elif spec.kind == "maxpool":
            x, c = L.pool_forward(x, spec)
        elif spec.kind == "relu":
            x, c = L.relu_forward(x)
        elif spec.kind == "fc":
            x, c = L.fc_forward(params, x)
        else:
            x, c = L.dropout_forward(x, spec, train, rng)
        if train:
            entries.append(c)
    out = x.reshape(x.shape[0], -1)
    if train:
        return out, ForwardCache(net.version, entries, x.shape)
    return out


def backward(net: ConvNet, cache: ForwardCache, dout) -> list:
    """Parameter gradients given the loss gradient at the flattened output."""
    if cache is None or not isinstance(cache, ForwardCache):
        raise StateError("backward needs the cache of a training-mode forward")
    if cache.net_version != net.version:
        raise StateError("stale cache: parameters changed since the forward pass")
    dy = np.asarray(dout, dtype=net.dtype).reshape(cache.output_shape)
    grads = [None] * len(net.layers)
    first = net.first_param_layer
    for k in range(len(net.layers) - 1, first - 1, -1):
        spec, params, c = net.layers[k], net.params[k], cache.entries[k]
        need_dx = k > first
        if spec.kind == "conv":
            dy, grads[k] = L.conv_backward(params, c, dy, spec, need_dx)
        elif spec.kind == "fc":
            dy, grads[k] = L.fc_backward(params, c, dy, need_dx)
        elif spec.kind == "maxpool":
            dy = L.pool_backward(c, dy, spec)
        elif spec.kind == "relu":
            dy = L.relu_backward(c, dy)
        else:
            dy = L.dropout_backward(c, dy)
    return grads


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over the batch of half the squared error; returns (loss, grad)."""
    diff = pred.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    b = pred.shape[0]
    loss = 0.5 * float(np.sum(diff * diff)) / b
    return loss, (diff / b).astype(pred.dtype)


def infer(net: ConvNet, x, batch_size: int = 256) -> np.ndarray:
    """Inference-mode forward over an arbitrarily large batch."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    outs = [forward(net, x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, net.output_dim), dtype=net.dtype)
    return np.concatenate(outs, axis=0)


# -- persistence ------------------------------------------------------------

def save_net(net: ConvNet, path) -> None:
    """Magic, version, input geometry, layer table, then f32 tensors."""
    with open(path, "wb") as fh:
        _binio.write_magic(fh, NET_MAGIC)
        c, h, w = net.input_shape
        _binio.write_u32(fh, NET_FORMAT_VERSION, c, h, w, len(net.layers))
        for spec in net.layers:
            _binio.write_u32(fh, _KIND_CODES[spec.kind], spec.size, spec.stride, spec.units)
            _binio.write_f32(fh, np.array([spec.rate]))
        for p in net.params:
            if p is not None:
                _binio.write_f32(fh, p["W"])
                _binio.write_f32(fh, p["b"])


def load_net(path) -> ConvNet:
    with open(path, "rb") as fh:
        _binio.read_magic(fh, NET_MAGIC)
        version, c, h, w, n_layers = _binio.read_u32(fh, 5)
        if version != NET_FORMAT_VERSION:
            raise FormatError(f"unsupported network format version {version}")
        stack = []
        for _ in range(n_layers):
            kind, size, stride, units = _binio.read_u32(fh, 4)
            rate = float(_binio.read_f32(fh, 1)[0])
            if kind >= len(L.KINDS):
                raise FormatError(f"unknown layer code {kind}")
            stack.append(LayerSpec(L.KINDS[kind], size=size, stride=stride,
                                   units=units, rate=rate))
        net = init_net(stack, (c, h, w), sigma=0.0)
        for p in net.params:
            if p is not None:
                p["W"] = _binio.read_f32(fh, p["W"].size).reshape(p["W"].shape)
                p["b"] = _binio.read_f32(fh, p["b"].size)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after network payload")
    return net
