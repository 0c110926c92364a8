"""Mini-batch SGD training of a :class:`ConvNet` regressor."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from ..errors import ConfigError, ShapeError, TrainingError
from .net import ConvNet, backward, forward, infer, mse_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-1
    momentum: float = 0.9
    init_sigma: float = 1e-2
    init_scheme: str = "gaussian"
    max_first_layer_norm: float = 1.0
    anneal_factor: float = 10.0
    plateau_epochs: int = 10
    min_learning_rate: float = 1e-5
    epochs: int = 20
    validation_fraction: float = 0.1
    rotate: bool = True
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.anneal_factor < 1.0:
            raise ConfigError("anneal_factor must be >= 1")
        if self.init_scheme not in ("gaussian", "fanin"):
            raise ConfigError("init_scheme must be gaussian or fanin")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")


@dataclass
class Velocity:
    values: list

    @classmethod
    def zeros_like(cls, net: ConvNet) -> "Velocity":
        return cls([None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
                    for p in net.params])


def sgd_step(net: ConvNet, grads, velocity: Velocity, config: TrainConfig,
             learning_rate: float | None = None) -> None:
    """In-place momentum update ``v = mu v - lr g; theta += v``.

    Afterwards every first-layer filter whose L2 norm exceeds
    ``config.max_first_layer_norm`` is rescaled onto that bound.
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    for g in grads:
        if g is not None and not all(np.all(np.isfinite(v)) for v in g.values()):
            raise TrainingError("non-finite gradient encountered")
    mu = net.dtype.type(config.momentum)
    lr = net.dtype.type(lr)
    for p, g, v in zip(net.params, grads, velocity.values):
        if p is None:
            continue
        if g is None:
            raise ShapeError("missing gradient for a parametric layer")
        for key in p:
            if g[key].shape != p[key].shape:
                raise ShapeError(f"gradient shape {g[key].shape} != {p[key].shape}")
            v[key] *= mu
            v[key] -= lr * g[key]
            p[key] += v[key]
    bound = config.max_first_layer_norm
    if bound is not None and bound > 0:
        w = net.params[net.first_param_layer]["W"]
        flat = w.reshape(w.shape[0], -1)
        norms = np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
        over = norms > bound
        if np.any(over):
            flat[over] *= (bound / norms[over])[:, None].astype(w.dtype)
    net.touch()


def augment_batch(inputs, targets, rng, rotate=True, flip=True):
    """Random 90-degree rotations and horizontal flips, same for both sides.

    ``inputs`` is ``(B, C, M, M)``, ``targets`` ``(B, N, N)``.  Each sample
    draws its own transform.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if not (rotate or flip):
        return inputs, targets
    if inputs.shape[-1] != inputs.shape[-2] or targets.shape[-1] != targets.shape[-2]:
        raise ShapeError("augmentation needs square patches")
    b = inputs.shape[0]
    turns = rng.integers(0, 4, size=b) if rotate else np.zeros(b, dtype=int)
    flips = rng.random(b) < 0.5 if flip else np.zeros(b, dtype=bool)
    out_x = np.empty_like(inputs)
    out_t = np.empty_like(targets)
    for k in range(4):
        for fl in (False, True):
            sel = np.nonzero((turns == k) & (flips == fl))[0]
            if sel.size == 0:
                continue
            out_x[sel] = dihedral(inputs[sel], k, fl)
            out_t[sel] = dihedral(targets[sel], k, fl)
    return out_x, out_t


def dihedral(x, turns: int, flip: bool):
    """Horizontal flip (optional) then ``turns`` counter-clockwise quarter turns
    of the last two axes."""
    if flip:
        x = x[..., ::-1]
    return np.rot90(x, turns, axes=(-2, -1))


class PatchData(Protocol):
    """Indexable training data: ``batch(indices) -> (inputs, targets)``."""

    def __len__(self) -> int: ...

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ArrayPatchData:
    """In-memory inputs and targets."""

    def __init__(self, inputs, targets):
        self.inputs = np.asarray(inputs)
        self.targets = np.asarray(targets)
        if len(self.inputs) != len(self.targets):
            raise ShapeError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def batch(self, indices):
        return self.inputs[indices], self.targets[indices]


@dataclass
class CurveRow:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "trainLoss", "valLoss", "learningRate"])
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.learning_rate)])


def smoothed(values, window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def train_regressor(
    net: ConvNet,
    data: PatchData,
    config: TrainConfig,
    encode: Callable[[np.ndarray], np.ndarray] | None = None,
    callback: Callable[[int, ConvNet, CurveRow], None] | None = None,
) -> tuple[ConvNet, list[CurveRow]]:
    """Train ``net`` in place on mean squared error; return the best copy.

    When ``encode`` is given, targets from ``data`` are annotation patches:
    they are augmented together with the inputs and then encoded.  Without
    it targets are used verbatim and augmentation is skipped.  A held-out
    fraction of ``data`` is used for validation, plateau annealing and
    best-parameter selection.  ``callback(epoch, net, row)`` fires after
    every epoch.
    """
    n = len(data)
    if n < 1:
        raise ShapeError("no training data")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_val = int(round(n * config.validation_fraction))
    if n - n_val < 1:
        n_val = 0
    val_idx = np.sort(order[:n_val])
    train_idx = order[n_val:]
    augment = encode is not None and (config.rotate or config.flip)

    def targets_for(raw):
        return raw if encode is None else encode(raw)

    val_batches = []
    for s in range(0, n_val, 512):
        x, t = data.batch(val_idx[s:s + 512])
        val_batches.append((x, np.asarray(targets_for(t), dtype=np.float64)))

    velocity = Velocity.zeros_like(net)
    lr = config.learning_rate
    best_net, best_val = net.copy(), math.inf
    since_best = 0
    curve: list[CurveRow] = []
    for epoch in range(1, config.epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            x, t = data.batch(idx)
            if augment:
                x, t = augment_batch(x, t, rng, config.rotate, config.flip)
            target = targets_for(t)
            out, cache = forward(net, x, train=True, rng=rng)
            loss, dout = mse_loss(out, target)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", checkpoint=best_net)
            losses.append(loss * len(idx))
            grads = backward(net, cache, dout)
            try:
                sgd_step(net, grads, velocity, config, learning_rate=lr)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}", checkpoint=best_net) from None
        train_loss = float(np.sum(losses) / len(perm))
        if val_batches:
            total = sum(mse_loss(infer(net, x), t)[0] * len(x) for x, t in val_batches)
            val_loss = float(total / n_val)
        else:
            val_loss = train_loss
        if not math.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}", checkpoint=best_net)
        row = CurveRow(epoch, train_loss, val_loss, float(lr))
        curve.append(row)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val, best_net, since_best = val_loss, net.copy(), 0
        else:
            since_best += 1
            if since_best >= config.plateau_epochs:
                lr = max(lr / config.anneal_factor, config.min_learning_rate)
                since_best = 0
        if callback is not None:
            callback(epoch, net, row)
    return best_net, curve
