"""Image and patch geometry.

Images are plain ``numpy`` arrays laid out ``(channels, height, width)``;
annotation maps are ``(height, width)``.  A patch centred at ``(i, j)`` with
input size ``M`` covers rows ``i - M//2 .. i - M//2 + M - 1`` (columns
likewise); its annotation window is the central ``N x N`` block starting
``center_offset`` pixels inside the input window.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import _binio
from .errors import ConfigError, CoordinateError, FormatError, ShapeError

ALLOWED_CHANNELS = (1, 3, 4)
IMAGE_MAGIC = b"N4IM"


@dataclass(frozen=True)
class PatchGeometry:
    input_size: int = 34
    output_size: int = 16

    def __post_init__(self):
        if self.input_size <= 0 or self.output_size <= 0:
            raise ConfigError("patch sizes must be positive")
        if self.output_size >= self.input_size:
            raise ConfigError("output size N must be smaller than input size M")

    @property
    def center_offset(self) -> int:
        return (self.input_size - self.output_size) // 2

    @property
    def input_anchor(self) -> int:
        """Rows above the centre that belong to the input window."""
        return self.input_size // 2

    @property
    def output_anchor(self) -> int:
        """Rows above the centre that belong to the annotation window."""
        return self.input_anchor - self.center_offset

    def input_pad(self) -> tuple[int, int]:
        """Reflect padding (before, after) that makes every centre valid."""
        return self.input_anchor, self.input_size - 1 - self.input_anchor

    def output_pad(self) -> tuple[int, int]:
        return self.output_anchor, self.output_size - 1 - self.output_anchor


@dataclass
class Patch:
    origin: tuple[int, int]
    geometry: PatchGeometry
    pixels: np.ndarray  # (C, M, M)


def check_image(image: np.ndarray, allowed=ALLOWED_CHANNELS) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {image.shape}")
    if allowed is not None and image.shape[0] not in allowed:
        raise ShapeError(f"unsupported channel count {image.shape[0]}")
    return image


def reflect_pad(image: np.ndarray, before: int, after: int) -> np.ndarray:
    """Reflect-pad the two trailing axes (edge pixel not repeated)."""
    h, w = image.shape[-2:]
    if max(before, after) >= min(h, w):
        raise ShapeError(
            f"image {h}x{w} too small for reflect padding of {max(before, after)}"
        )
    widths = [(0, 0)] * (image.ndim - 2) + [(before, after), (before, after)]
    return np.pad(image, widths, mode="reflect")


def pad_for_patches(image: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    return reflect_pad(image, *geometry.input_pad())


def pad_for_annotations(annotation: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    return reflect_pad(annotation, *geometry.output_pad())


def extract_patch(image: np.ndarray, center: tuple[int, int], geometry: PatchGeometry) -> Patch:
    image = check_image(image, allowed=None)
    i, j = center
    _, h, w = image.shape
    if not (0 <= i < h and 0 <= j < w):
        raise CoordinateError(f"centre {center} outside {h}x{w} image")
    padded = pad_for_patches(image, geometry)
    m = geometry.input_size
    return Patch((i, j), geometry, padded[:, i:i + m, j:j + m].copy())


def central_window(patch: Patch) -> np.ndarray:
    """The N x N block of a patch that its annotation describes."""
    o, n = patch.geometry.center_offset, patch.geometry.output_size
    return patch.pixels[:, o:o + n, o:o + n]


def extract_windows(padded: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Gather ``size x size`` windows from an already padded array.

    ``centers`` is ``(K, 2)``; window ``k`` starts at ``padded[..., i, j]``.
    Used for batched training-patch and annotation extraction.
    """
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 2)
    offs = np.arange(size)
    rows = centers[:, 0, None] + offs
    cols = centers[:, 1, None] + offs
    if padded.ndim == 2:
        return padded[rows[:, :, None], cols[:, None, :]]
    out = padded[:, rows[:, :, None], cols[:, None, :]]
    return np.moveaxis(out, 0, 1)


def per_channel_mean_subtract(images: Sequence[np.ndarray], means=None):
    """Subtract global per-channel means computed over the whole collection.

    Returns ``(normalized, means)``.  Pass ``means`` to reuse training
    statistics at inference time.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("empty image collection")
    channels = {im.shape[0] for im in images}
    if len(channels) != 1:
        raise ShapeError(f"mixed channel counts {sorted(channels)}")
    if means is None:
        total = sum(im.sum(axis=(1, 2)) for im in images)
        count = sum(im.shape[1] * im.shape[2] for im in images)
        means = total / count
    means = np.asarray(means, dtype=np.float64)
    return [im - means[:, None, None] for im in images], means


def accumulate_overlaps(outputs: Iterable, image_size: tuple[int, int], n: int,
                        anchor: int | None = None) -> np.ndarray:
    """Average overlapping ``n x n`` annotation patches into a full map.

    ``outputs`` yields ``((i, j), patch)``.  Pixel ``(x, y)`` is the mean of
    the patch values that cover it; the divisor is the number of
    contributing patches, so it drops below ``n**2`` near borders.  Pixels no
    patch covers are 0.
    """
    h, w = image_size
    anchor = n // 2 if anchor is None else anchor
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for (i, j), patch in outputs:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape != (n, n):
            raise ShapeError(f"patch shape {patch.shape} != ({n}, {n})")
        if not (0 <= i < h and 0 <= j < w):
            raise CoordinateError(f"centre {(i, j)} outside {h}x{w} image")
        r0, c0 = i - anchor, j - anchor
        rs, re = max(r0, 0), min(r0 + n, h)
        cs, ce = max(c0, 0), min(c0 + n, w)
        total[rs:re, cs:ce] += patch[rs - r0:re - r0, cs - c0:ce - c0]
        count[rs:re, cs:ce] += 1.0
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def accumulate_field(values, image_size: tuple[int, int], n: int, anchor: int,
                     stride: int = 1) -> np.ndarray:
    """Dense counterpart of :func:`accumulate_overlaps`.

    ``values(dr, dc)`` returns the ``(H', W')`` array of patch pixel
    ``(dr, dc)`` for every centre on the stride grid, so the full
    ``H x W x N x N`` field is never materialised.
    """
    h, w = image_size
    centers_r = np.arange(0, h, stride)
    centers_c = np.arange(0, w, stride)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for dr in range(n):
        rows = centers_r - anchor + dr
        rmask = (rows >= 0) & (rows < h)
        for dc in range(n):
            cols = centers_c - anchor + dc
            cmask = (cols >= 0) & (cols < w)
            v = np.asarray(values(dr, dc), dtype=np.float64)[np.ix_(rmask, cmask)]
            ix = np.ix_(rows[rmask], cols[cmask])
            total[ix] += v
            count[ix] += 1.0
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


# -- file formats ----------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Load an 8-bit PNG as a ``(C, H, W)`` float array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr


def write_png(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}.get(data.shape[0])
    if mode is None:
        raise ShapeError(f"cannot write {data.shape[0]}-channel PNG")
    pixels = data[0] if data.shape[0] == 1 else np.moveaxis(data, 0, -1)
    Image.fromarray(pixels, mode=mode).save(path, optimize=False)


def write_raw(path, image: np.ndarray) -> None:
    """Write the float container: magic, C/H/W as u32, then planar f32."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    with open(path, "wb") as fh:
        _binio.write_magic(fh, IMAGE_MAGIC)
        _binio.write_u32(fh, c, h, w)
        _binio.write_f32(fh, image)


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _binio.read_magic(fh, IMAGE_MAGIC)
        c, h, w = _binio.read_u32(fh, 3)
        data = _binio.read_f32(fh, c * h * w)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after image payload")
    return data.reshape(c, h, w)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".n4im":
        return read_raw(path)
    return read_png(path)


def read_binary_mask(path) -> np.ndarray:
    """Load an annotation/ROI image as a ``(H, W)`` boolean mask."""
    arr = read_image(path)
    return arr.max(axis=0) >= 0.5
