"""Whole-image network application.

Instead of running the network once per pixel, the reflect-padded image is
pushed through the convolutional part once.  Every pooling (or strided
convolution) layer with factor ``k`` splits each feature map into ``k * k``
phase-shifted fragments, so each fragment is an ordinary subsampled map
and all pixel positions stay covered.  The first fully-connected layer is
then evaluated as a convolution over each fragment.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from ..imagecore import PatchGeometry, pad_for_patches
from . import layers as L
from .net import ConvNet, layer_shapes


def _split_phases(frag, k):
    x, oy, ox, step = frag
    out = []
    for a in range(k):
        for b in range(k):
            out.append((x[:, :, a:, b:], oy + a * step, ox + b * step, step * k))
    return out


def _window_features(x, hf, wf, row_chunk):
    """Rows of the flattened ``(C, hf, wf)`` window at every position."""
    c, h, w = x.shape[1:]
    win = sliding_window_view(x[0], (hf, wf), axis=(1, 2))  # (C, H', W', hf, wf)
    hh, ww = win.shape[1:3]
    for r0 in range(0, hh, row_chunk):
        block = win[:, r0:r0 + row_chunk]
        rows = block.shape[1]
        yield r0, rows, ww, block.transpose(1, 2, 0, 3, 4).reshape(rows * ww, c * hf * wf)


def dense_apply(net: ConvNet, image: np.ndarray, row_chunk: int = 64) -> np.ndarray:
    """Network output at every pixel: ``(D, H, W)`` for a ``(C, H, W)`` image.

    Equivalent to running the inference-mode network on the patch centred
    at each pixel, with reflect padding at the borders.
    """
    image = np.asarray(image)
    c, m, _ = net.input_shape
    if image.ndim != 3 or image.shape[0] != c:
        raise ShapeError(f"image {image.shape} does not match network channels {c}")
    h, w = image.shape[1:]
    geometry = PatchGeometry(m, 1) if m > 1 else None
    if geometry is None:
        padded = image
    else:
        if min(h, w) <= geometry.input_anchor:
            raise ShapeError(f"image {h}x{w} too small for {m}x{m} patches")
        padded = pad_for_patches(image, geometry)
    x = padded[None].astype(net.dtype)

    shapes = layer_shapes(net.layers, net.input_shape)
    frags = [(x, 0, 0, 1)]
    k = 0
    n_layers = len(net.layers)
    while k < n_layers and net.layers[k].kind != "fc":
        spec, params = net.layers[k], net.params[k]
        if spec.kind == "conv":
            unit = L.LayerSpec("conv", size=spec.size, units=spec.units)
            nxt = []
            for fx, oy, ox, step in frags:
                y, _ = L.conv_forward(params, fx, unit)
                nxt.append((y, oy, ox, step))
            frags = nxt
            if spec.stride > 1:
                frags = [_split_phases(f, spec.stride) for f in frags]
                frags = [(fx[:, :, ::spec.stride, ::spec.stride], oy, ox, st)
                         for group in frags for fx, oy, ox, st in group]
        elif spec.kind == "maxpool":
            nxt = []
            for f in frags:
                for fx, oy, ox, step in _split_phases(f, spec.size):
                    if min(fx.shape[2:]) >= spec.size:
                        y, _ = L.pool_forward(fx, spec)
                        nxt.append((y, oy, ox, step))
            frags = nxt
        elif spec.kind == "relu":
            frags = [(np.maximum(fx, 0), oy, ox, st) for fx, oy, ox, st in frags]
        k += 1  # dropout is the identity at inference

    feat_shape = shapes[k - 1] if k > 0 else tuple(net.input_shape)
    hf, wf = feat_shape[1], feat_shape[2]
    out = np.zeros((net.output_dim, h, w), dtype=net.dtype)
    filled = np.zeros((h, w), dtype=bool)
    tail = list(zip(net.layers[k:], net.params[k:]))
    for fx, oy, ox, step in frags:
        if fx.shape[2] < hf or fx.shape[3] < wf:
            continue
        for r0, rows, ww, feats in _window_features(fx, hf, wf, row_chunk):
            y = feats
            for spec, params in tail:
                if spec.kind == "fc":
                    y = y @ params["W"].T
                    y += params["b"]
                elif spec.kind == "relu":
                    y = np.maximum(y, 0)
            ys = oy + (r0 + np.arange(rows)) * step
            xs = ox + np.arange(ww) * step
            rsel, csel = ys < h, xs < w
            y = y.reshape(rows, ww, -1)[np.ix_(rsel, csel)]
            out[:, ys[rsel][:, None], xs[csel][None, :]] = np.moveaxis(y, -1, 0)
            filled[ys[rsel][:, None], xs[csel][None, :]] = True
    if not filled.all():
        raise ShapeError("dense application left pixels uncovered")
    return out
