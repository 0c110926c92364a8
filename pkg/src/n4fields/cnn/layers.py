"""Forward and backward kernels for the supported layer kinds.

All activations are batched ``(B, C, H, W)`` (or ``(B, D)`` after the
first fully-connected layer).  Convolutions are "valid" and use an
im2col matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError

KINDS = ("conv", "maxpool", "relu", "fc", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0       # conv/pool kernel side
    stride: int = 1
    units: int = 0      # conv output channels or fc units
    rate: float = 0.0   # dropout probability

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool") and (self.size < 1 or self.stride < 1):
            raise ConfigError(f"{self.kind} needs positive size and stride")
        if self.kind == "maxpool" and self.stride != self.size:
            raise ConfigError("only non-overlapping pooling (stride == size) is supported")
        if self.kind in ("conv", "fc") and self.units < 1:
            raise ConfigError(f"{self.kind} needs at least one output unit")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")

    def __str__(self):
        if self.kind == "conv":
            s = f"conv{self.size}x{self.units}"
            return s if self.stride == 1 else f"{s}s{self.stride}"
        if self.kind == "maxpool":
            return f"pool{self.size}"
        if self.kind == "fc":
            return f"fc{self.units}"
        if self.kind == "dropout":
            return f"dropout{self.rate:g}"
        return "relu"


def parse_stack(text: str) -> list[LayerSpec]:
    """Parse ``"conv5x48,relu,pool2,fc512,dropout0.5,fc16"`` style stacks."""
    layers = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            if tok == "relu":
                layers.append(LayerSpec("relu"))
            elif tok.startswith("conv"):
                body, _, stride = tok[4:].partition("s")
                size, units = body.split("x")
                layers.append(LayerSpec("conv", size=int(size), units=int(units),
                                        stride=int(stride or 1)))
            elif tok.startswith("pool"):
                k = int(tok[4:])
                layers.append(LayerSpec("maxpool", size=k, stride=k))
            elif tok.startswith("fc"):
                layers.append(LayerSpec("fc", units=int(tok[2:])))
            elif tok.startswith("dropout"):
                layers.append(LayerSpec("dropout", rate=float(tok[7:])))
            else:
                raise ValueError(tok)
        except ValueError as exc:
            raise ConfigError(f"cannot parse layer {tok!r}") from exc
    return layers


def format_stack(layers) -> str:
    return ",".join(str(layer) for layer in layers)


# -- convolution ------------------------------------------------------------

def im2col(x: np.ndarray, k: int, stride: int = 1) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B * Ho * Wo, C * k * k)`` patch matrix."""
    b, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols


def conv_forward(params, x, spec: LayerSpec):
    w, bias = params["W"], params["b"]
    k, s = spec.size, spec.stride
    b = x.shape[0]
    ho = (x.shape[2] - k) // s + 1
    wo = (x.shape[3] - k) // s + 1
    cols = im2col(x, k, s)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += bias
    y = out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def conv_backward(params, cache, dy, spec: LayerSpec, need_dx=True):
    w = params["W"]
    cols, xshape = cache
    k, s = spec.size, spec.stride
    b, c, h, wd = xshape
    _, kout, ho, wo = dy.shape
    dmat = dy.transpose(0, 2, 3, 1).reshape(-1, kout)
    grads = {"W": (dmat.T @ cols).reshape(w.shape), "b": dmat.sum(axis=0)}
    if not need_dx:
        return None, grads
    dcols = (dmat @ w.reshape(kout, -1)).reshape(b, ho, wo, c, k, k)
    dx = np.zeros(xshape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, grads


# -- pooling ----------------------------------------------------------------

def pool_forward(x, spec: LayerSpec):
    k = spec.size
    b, c, h, w = x.shape
    hp, wp = h // k, w // k
    blocks = x[:, :, :hp * k, :wp * k].reshape(b, c, hp, k, wp, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp, k * k)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape)


def pool_backward(cache, dy, spec: LayerSpec):
    arg, xshape = cache
    k = spec.size
    b, c, h, w = xshape
    hp, wp = dy.shape[2:]
    blocks = np.zeros((b, c, hp, wp, k * k), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(b, c, hp, wp, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :, :hp * k, :wp * k] = blocks.reshape(b, c, hp * k, wp * k)
    return dx


# -- fully connected ----------------------------------------------------------

def fc_forward(params, x):
    xshape = x.shape
    flat = x.reshape(xshape[0], -1)
    y = flat @ params["W"].T
    y += params["b"]
    return y, (flat, xshape)


def fc_backward(params, cache, dy, need_dx=True):
    flat, xshape = cache
    grads = {"W": dy.T @ flat, "b": dy.sum(axis=0)}
    if not need_dx:
        return None, grads
    return (dy @ params["W"]).reshape(xshape), grads


# -- elementwise ----------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dy):
    return dy * mask


def dropout_forward(x, spec: LayerSpec, train: bool, rng):
    """Inverted dropout: scale kept units by ``1 / (1 - rate)`` in training."""
    if not train or spec.rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= spec.rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - spec.rate)
    return x * keep, keep


def dropout_backward(keep, dy):
    return dy if keep is None else dy * keep
