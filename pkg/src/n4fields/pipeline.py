"""Training and whole-image inference for patch-transfer fields.

Training runs in three steps: fit the annotation codec, regress codes from
image patches with the CNN, then fill a dictionary with the network codes
of random training patches and their annotations.  Inference computes a code
at every pixel, transfers the nearest dictionary annotation and averages
the overlapping annotation patches.
"""
from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .cnn import (ConvNet, TrainConfig, default_stack, dense_apply, infer, init_net,
                  load_net, save_net, train_regressor, with_output_units)
from .errors import ConfigError, FormatError, ShapeError
from .imagecore import (PatchGeometry, accumulate_field, check_image, extract_windows,
                        pad_for_annotations, pad_for_patches, per_channel_mean_subtract)
from .nnfield import (LEAF_SIZE, CodeDictionary, SearchConfig, load_dictionary, nearest,
                      save_dictionary)
from .targets import (PairwiseEncoding, PcaCodec, as_stored, encode, encode_pairwise,
                      fit_alternative_codec, fit_pca, load_codec, save_codec,
                      segments_from_edges)

log = logging.getLogger(__name__)

ENCODINGS = ("raw", "alternative")
BASELINE_MODES = ("central", "patch")
BUNDLE_VERSION = 1
ALTERNATIVE_LEARNING_RATE = 1e-3


@dataclass
class FieldModel:
    net: ConvNet
    codec: PcaCodec
    dictionary: CodeDictionary
    geometry: PatchGeometry
    channel_means: np.ndarray
    encoding: str = "raw"

    def __post_init__(self):
        self.channel_means = np.asarray(self.channel_means, dtype=np.float64)
        g = self.geometry
        if self.net.output_dim != self.codec.code_dim:
            raise ShapeError(f"net output {self.net.output_dim} != code dim {self.codec.code_dim}")
        if self.dictionary.code_dim != self.codec.code_dim:
            raise ShapeError("dictionary code dim differs from codec")
        if self.dictionary.patch_size != g.output_size:
            raise ShapeError("dictionary annotation size differs from geometry")
        if tuple(self.net.input_shape[1:]) != (g.input_size, g.input_size):
            raise ShapeError("network input size differs from geometry")
        if len(self.channel_means) != self.net.input_shape[0]:
            raise ShapeError("one channel mean per input channel required")
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"unknown encoding {self.encoding!r}")

    @property
    def channels(self) -> int:
        return self.net.input_shape[0]


@dataclass
class BaselineModel:
    net: ConvNet
    geometry: PatchGeometry
    channel_means: np.ndarray
    mode: str = "patch"

    def __post_init__(self):
        self.channel_means = np.asarray(self.channel_means, dtype=np.float64)
        if self.mode not in BASELINE_MODES:
            raise ConfigError(f"unknown baseline mode {self.mode!r}")
        n = self.geometry.output_size
        want = 1 if self.mode == "central" else n * n
        if self.net.output_dim != want:
            raise ShapeError(f"{self.mode} baseline needs {want} outputs, net has {self.net.output_dim}")

    @property
    def channels(self) -> int:
        return self.net.input_shape[0]


@dataclass
class InferenceConfig:
    committee: Sequence = ()
    scales: tuple = (0.5, 1.0, 2.0)
    search: SearchConfig = field(default_factory=SearchConfig)
    stride: int = 1

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("at least one scale is required")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


# -- training data -----------------------------------------------------------

class _ImagePatches:
    """Patch/annotation pairs cut on demand from padded training images."""

    def __init__(self, images, targets, geometry: PatchGeometry, centres: np.ndarray):
        self.images = images      # padded, normalised (C, H+M-1, W+M-1) float32
        self.targets = targets    # padded (H+N-1, W+N-1) float32
        self.geometry = geometry
        self.centres = centres    # (K, 3): image, row, col

    def __len__(self):
        return len(self.centres)

    def windows(self, indices):
        sel = self.centres[np.asarray(indices)]
        m, n = self.geometry.input_size, self.geometry.output_size
        x = np.empty((len(sel), self.images[0].shape[0], m, m), dtype=np.float32)
        t = np.empty((len(sel), n, n), dtype=np.float32)
        for k in np.unique(sel[:, 0]):
            rows = np.nonzero(sel[:, 0] == k)[0]
            x[rows] = extract_windows(self.images[k], sel[rows, 1:], m)
            t[rows] = extract_windows(self.targets[k], sel[rows, 1:], n)
        return x, t

    def batch(self, indices):
        return self.windows(indices)


def _prepare(dataset, geometry: PatchGeometry, means=None):
    images = [check_image(s.image) for s in dataset]
    if not images:
        raise ShapeError("empty training set")
    normalised, means = per_channel_mean_subtract(images, means)
    padded = [pad_for_patches(im, geometry).astype(np.float32) for im in normalised]
    targets = [pad_for_annotations(s.target(), geometry).astype(np.float32) for s in dataset]
    shapes = [im.shape[1:] for im in images]
    return padded, targets, shapes, means


def sample_centres(shapes, count: int, rng, replace: bool = True) -> np.ndarray:
    """Uniform pixel positions over a collection of images, ``(count, 3)``."""
    sizes = np.array([h * w for h, w in shapes], dtype=np.int64)
    total = int(sizes.sum())
    if not replace and count > total:
        raise ConfigError(f"cannot draw {count} distinct patches from {total} pixels")
    flat = rng.choice(total, size=count, replace=replace)
    if not replace:
        flat = np.sort(flat)
    bounds = np.cumsum(sizes)
    img = np.searchsorted(bounds, flat, side="right")
    local = flat - np.concatenate([[0], bounds[:-1]])[img]
    widths = np.array([w for _, w in shapes], dtype=np.int64)[img]
    return np.stack([img, local // widths, local % widths], axis=1).astype(np.int64)


def _seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _code_targets(codec: PcaCodec, encoding: str, n: int):
    if encoding == "raw":
        return lambda t: encode(codec, t)
    enc = PairwiseEncoding(n)
    return lambda t: encode_pairwise(codec, segments_from_edges(t), enc)


def fit_codec(annotation_patches: np.ndarray, encoding: str, code_dim: int) -> PcaCodec:
    """Step 1: PCA of raw annotation patches or of their pairwise vectors."""
    if encoding == "raw":
        return fit_pca(annotation_patches.reshape(len(annotation_patches), -1), code_dim)
    if encoding == "alternative":
        n = annotation_patches.shape[-1]
        return fit_alternative_codec(segments_from_edges(annotation_patches),
                                     PairwiseEncoding(n), code_dim)
    raise ConfigError(f"unknown encoding {encoding!r}")


def train_field(dataset, geometry: PatchGeometry = PatchGeometry(), stack=None,
                config: TrainConfig = TrainConfig(), encoding: str = "raw",
                dict_size: int = 10_000, seed: int = 0, code_dim: int = 16,
                n_samples: int = 20_000, codec_samples: int | None = None,
                callback=None, leaf_size: int = LEAF_SIZE):
    """Train a field model on ``dataset`` (a sequence of ``LabeledImage``).

    Returns ``(model, curve)``.  ``n_samples`` training centres and
    ``dict_size`` distinct dictionary centres are drawn uniformly over all
    training pixels.  The alternative encoding lowers the starting learning
    rate to 1e-3.  All randomness derives from ``seed``.
    """
    if encoding not in ENCODINGS:
        raise ConfigError(f"unknown encoding {encoding!r}")
    if codec_samples is None:
        codec_samples = 50_000 if encoding == "raw" else 2_000
    s_codec, s_train, s_init, s_dict = _seeds(seed, 4)
    padded, targets, shapes, means = _prepare(dataset, geometry)
    n = geometry.output_size

    # step 1: codec
    codec_centres = sample_centres(shapes, codec_samples, np.random.default_rng(s_codec))
    _, ann = _ImagePatches(padded, targets, geometry, codec_centres).windows(
        np.arange(len(codec_centres)))
    # the float32 form is used throughout so a reloaded bundle behaves identically
    codec = as_stored(fit_codec(ann.astype(np.float64), encoding, code_dim))
    log.info("codec: %d -> %d dims from %d patches", codec.input_dim, codec.code_dim, len(ann))

    # step 2: regressor
    stack = default_stack(codec.code_dim) if stack is None else with_output_units(stack, codec.code_dim)
    channels = padded[0].shape[0]
    net = init_net(stack, (channels, geometry.input_size, geometry.input_size),
                   seed=s_init, sigma=config.init_sigma,
                   scheme=config.init_scheme)
    changes = {"seed": s_train}
    if encoding == "alternative":
        changes["learning_rate"] = ALTERNATIVE_LEARNING_RATE
    config = dataclasses.replace(config, **changes)
    data = _ImagePatches(padded, targets, geometry,
                         sample_centres(shapes, n_samples, np.random.default_rng(s_train)))
    net, curve = train_regressor(net, data, config, encode=_code_targets(codec, encoding, n),
                                 callback=callback)

    # step 3: dictionary
    model = build_dictionary(net, codec, geometry, means, padded, targets, shapes,
                             dict_size, s_dict, encoding, leaf_size)
    return model, curve


def build_dictionary(net, codec, geometry, means, padded, targets, shapes,
                     dict_size: int, seed: int, encoding: str = "raw",
                     leaf_size: int = LEAF_SIZE) -> FieldModel:
    centres = sample_centres(shapes, dict_size, np.random.default_rng(seed), replace=False)
    data = _ImagePatches(padded, targets, geometry, centres)
    codes, anns = [], []
    for s in range(0, len(centres), 1024):
        x, t = data.windows(np.arange(s, min(s + 1024, len(centres))))
        codes.append(infer(net, x))
        anns.append(t)
    dictionary = CodeDictionary(np.concatenate(codes), np.concatenate(anns), centres,
                                leaf_size=leaf_size)
    return FieldModel(net, codec, dictionary, geometry, means, encoding)


def rebuild_dictionary(model: FieldModel, dataset, dict_size: int, seed: int,
                       leaf_size: int = LEAF_SIZE) -> FieldModel:
    """Replace the dictionary with ``dict_size`` patches drawn from ``dataset``."""
    padded, targets, shapes, _ = _prepare(dataset, model.geometry, model.channel_means)
    return build_dictionary(model.net, model.codec, model.geometry, model.channel_means,
                            padded, targets, shapes, dict_size, _seeds(seed, 4)[3],
                            model.encoding, leaf_size)


# -- inference ---------------------------------------------------------------

def _normalise(model, image) -> np.ndarray:
    image = check_image(image, allowed=None)
    if image.shape[0] != model.channels:
        raise ShapeError(f"image has {image.shape[0]} channels, model expects {model.channels}")
    return image - model.channel_means[:, None, None]


def apply_field(model: FieldModel, image, search: SearchConfig = SearchConfig(),
                stride: int = 1) -> np.ndarray:
    """Response map ``(H, W)`` in [0, 1] for one ``(C, H, W)`` image."""
    x = _normalise(model, image)
    h, w = x.shape[1:]
    codes = dense_apply(model.net, x)[:, ::stride, ::stride]
    hs, ws = codes.shape[1:]
    idx, _ = nearest(model.dictionary, codes.reshape(codes.shape[0], -1).T, search)
    ann = model.dictionary.annotations[idx].reshape(hs, ws, model.geometry.output_size, -1)
    g = model.geometry
    out = accumulate_field(lambda dr, dc: ann[:, :, dr, dc], (h, w), g.output_size,
                           g.output_anchor, stride)
    return np.clip(out, 0.0, 1.0)


def apply_baseline(model: BaselineModel, image, stride: int = 1) -> np.ndarray:
    """Per-pixel scores (central) or overlap-averaged centre patches (patch)."""
    x = _normalise(model, image)
    h, w = x.shape[1:]
    out = np.clip(dense_apply(model.net, x)[:, ::stride, ::stride], 0.0, 1.0)
    if model.mode == "central":
        if stride == 1:
            return out[0].astype(np.float64)
        return resize_bilinear(out[0], (h, w))
    g = model.geometry
    n = g.output_size
    return accumulate_field(lambda dr, dc: out[dr * n + dc], (h, w), n, g.output_anchor, stride)


def resize_bilinear(array, shape) -> np.ndarray:
    """Bilinear resampling of the trailing two axes with pixel-centre alignment."""
    array = np.asarray(array, dtype=np.float64)
    h, w = array.shape[-2:]
    ho, wo = shape
    if (ho, wo) == (h, w):
        return array.copy()
    r = (np.arange(ho) + 0.5) * (h / ho) - 0.5
    c = (np.arange(wo) + 0.5) * (w / wo) - 0.5
    grid = np.meshgrid(r, c, indexing="ij")
    if array.ndim == 2:
        return ndimage.map_coordinates(array, grid, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(a, grid, order=1, mode="nearest") for a in array])


def _apply_one(model, image, search, stride):
    if isinstance(model, BaselineModel):
        return apply_baseline(model, image, stride)
    return apply_field(model, image, search, stride)


def apply_multiscale(model, image, cfg: InferenceConfig) -> np.ndarray:
    """Average of responses at each relative scale, resampled to native size."""
    image = check_image(image, allowed=None)
    h, w = image.shape[1:]
    m = model.geometry.input_size
    total, used = np.zeros((h, w)), 0
    for s in sorted(cfg.scales):
        size = (max(1, int(round(h * s))), max(1, int(round(w * s))))
        if min(size) < m:
            warnings.warn(f"scale {s} gives {size[0]}x{size[1]} image, smaller than {m}; skipped",
                          stacklevel=2)
            continue
        scaled = image if size == (h, w) else resize_bilinear(image, size)
        response = _apply_one(model, scaled, cfg.search, cfg.stride)
        total += resize_bilinear(response, (h, w))
        used += 1
    if used == 0:
        raise ShapeError(f"image {h}x{w} is too small for every configured scale")
    return np.clip(total / used, 0.0, 1.0)


def apply_committee(cfg: InferenceConfig, image) -> np.ndarray:
    """Uniform average of the members' multi-scale responses."""
    if not cfg.committee:
        raise ValueError("committee is empty")
    geometries = {m.geometry for m in cfg.committee}
    if len(geometries) > 1:
        raise ConfigError("committee members use different patch geometries")
    total = None
    for member in cfg.committee:
        r = apply_multiscale(member, image, cfg)
        total = r if total is None else total + r
    return total / len(cfg.committee)


# -- baselines ---------------------------------------------------------------

def train_baseline(dataset, mode: str = "patch", geometry: PatchGeometry = PatchGeometry(),
                   stack=None, config: TrainConfig = TrainConfig(), seed: int = 0,
                   n_samples: int = 20_000, callback=None):
    """CNN that regresses raw labels of the centre pixel or the centre patch.

    Returns ``(model, curve)``.  Sampling and augmentation follow
    :func:`train_field`, so equal arguments give equal patch streams.
    """
    if mode not in BASELINE_MODES:
        raise ConfigError(f"unknown baseline mode {mode!r}")
    n = geometry.output_size
    units = 1 if mode == "central" else n * n
    _, s_train, s_init, _ = _seeds(seed, 4)
    padded, targets, shapes, means = _prepare(dataset, geometry)
    stack = default_stack(units) if stack is None else with_output_units(stack, units)
    net = init_net(stack, (padded[0].shape[0], geometry.input_size, geometry.input_size),
                   seed=s_init, sigma=config.init_sigma,
                   scheme=config.init_scheme)
    config = dataclasses.replace(config, seed=s_train)
    data = _ImagePatches(padded, targets, geometry,
                         sample_centres(shapes, n_samples, np.random.default_rng(s_train)))
    a = geometry.output_anchor
    if mode == "central":
        def to_target(t):
            return t[:, a, a].reshape(-1, 1).astype(np.float64)
    else:
        def to_target(t):
            return t.reshape(len(t), -1).astype(np.float64)
    net, curve = train_regressor(net, data, config, encode=to_target, callback=callback)
    return BaselineModel(net, geometry, means, mode), curve


# -- bundles -----------------------------------------------------------------

def _write_manifest(path: Path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


def save_model(model, directory) -> Path:
    """Write a bundle directory: manifest, network, and codec/dictionary."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    kind = "field" if isinstance(model, FieldModel) else f"baseline-{model.mode}"
    g = model.geometry
    manifest = {
        "bundle.version": BUNDLE_VERSION,
        "bundle.kind": kind,
        "geometry.inputSize": g.input_size,
        "geometry.outputSize": g.output_size,
        "channelMeans": ",".join(repr(float(v)) for v in model.channel_means),
        "net": "net.n4nn",
    }
    save_net(model.net, d / "net.n4nn")
    if isinstance(model, FieldModel):
        manifest.update({"encoding": model.encoding, "codec": "codec.n4pc",
                         "dictionary": "dict.n4dc",
                         "dictionary.leafSize": model.dictionary.leaf_size})
        save_codec(model.codec, d / "codec.n4pc")
        save_dictionary(model.dictionary, d / "dict.n4dc")
    _write_manifest(d / "manifest.txt", manifest)
    return d


def load_model(directory):
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FormatError(f"{d} is not a model bundle (no manifest.txt)")
    m = read_manifest(d / "manifest.txt")
    try:
        if int(m["bundle.version"]) != BUNDLE_VERSION:
            raise FormatError(f"unsupported bundle version {m['bundle.version']}")
        g = PatchGeometry(int(m["geometry.inputSize"]), int(m["geometry.outputSize"]))
        means = np.array([float(v) for v in m["channelMeans"].split(",")])
        net = load_net(d / m["net"])
        kind = m["bundle.kind"]
        if kind == "field":
            return FieldModel(net, load_codec(d / m["codec"]),
                              load_dictionary(d / m["dictionary"], int(m["dictionary.leafSize"])),
                              g, means, m["encoding"])
        if kind.startswith("baseline-"):
            return BaselineModel(net, g, means, kind.split("-", 1)[1])
    except KeyError as exc:
        raise FormatError(f"{d}/manifest.txt: missing key {exc}") from None
    raise FormatError(f"unknown bundle kind {kind!r}")
