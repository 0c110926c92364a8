"""Dataset ingestion and synthetic corpora.

Two on-disk layouts are understood:

``bsds``
    ``images/<split>/<stem>.png`` with one or more annotations
    ``groundTruth/<split>/<stem>.png`` or ``<stem>_<k>.png`` and an optional
    ``roi/<split>/<stem>.png``.
``flat``
    ``<stem>.png`` next to ``<stem>.gt.png`` (and optionally
    ``<stem>.roi.png``), either directly in the root (split ``all``) or in
    per-split subdirectories.

Annotations are binary images; several files per image mean several
annotators.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .errors import ConfigError, FormatError
from .imagecore import read_binary_mask, read_image, write_png

IMAGE_SUFFIXES = (".png", ".n4im")
SPLITS = ("train", "val", "test")


@dataclass
class LabeledImage:
    image: np.ndarray                 # (C, H, W) float in [0, 1]
    annotations: list                 # list of (H, W) bool masks
    roi: np.ndarray | None = None     # (H, W) bool
    name: str = ""

    def target(self) -> np.ndarray:
        """Annotator-averaged label map in [0, 1]."""
        return np.mean([np.asarray(a, dtype=np.float64) for a in self.annotations], axis=0)


@dataclass(frozen=True)
class Entry:
    image: Path
    annotations: tuple
    roi: Path | None = None

    @property
    def name(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    splits: dict = field(default_factory=dict)   # split -> list[Entry]
    channels: int | None = None
    source: str = ""
    problems: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.problems and any(self.splits.values())

    def report(self) -> str:
        if not any(self.splits.values()) and not self.problems:
            return f"{self.source}: no images found"
        lines = [f"{self.source}: {len(self.problems)} problem(s)"]
        lines += [f"  {p}" for p in self.problems]
        return "\n".join(lines)

    def require_valid(self) -> "DatasetManifest":
        if not self.valid:
            raise ConfigError(self.report())
        return self

    def load(self, split: str) -> list[LabeledImage]:
        if split not in self.splits:
            raise ConfigError(f"split {split!r} not in dataset (have {sorted(self.splits)})")
        out = []
        for e in self.splits[split]:
            out.append(LabeledImage(
                read_image(e.image),
                [read_binary_mask(a) for a in e.annotations],
                None if e.roi is None else read_binary_mask(e.roi),
                e.name,
            ))
        return out


def _images_in(directory: Path, exclude=()) -> list[Path]:
    if not directory.is_dir():
        return []
    files = [p for p in sorted(directory.iterdir())
             if p.suffix in IMAGE_SUFFIXES and not any(p.name.endswith(x) for x in exclude)]
    return files


def _bsds_entries(root: Path, split: str, problems: list) -> list[Entry]:
    entries = []
    gt_dir, roi_dir = root / "groundTruth" / split, root / "roi" / split
    for img in _images_in(root / "images" / split):
        pattern = re.compile(re.escape(img.stem) + r"(_\d+)?\.(png|n4im)$")
        gts = [p for p in sorted(gt_dir.iterdir()) if pattern.fullmatch(p.name)] if gt_dir.is_dir() else []
        if not gts:
            problems.append(f"{img}: no annotation in {gt_dir}")
            continue
        roi = next((roi_dir / (img.stem + s) for s in IMAGE_SUFFIXES
                    if (roi_dir / (img.stem + s)).exists()), None)
        entries.append(Entry(img, tuple(gts), roi))
    return entries


def _flat_entries(directory: Path, problems: list) -> list[Entry]:
    entries = []
    for img in _images_in(directory, exclude=(".gt.png", ".roi.png")):
        gt = directory / f"{img.stem}.gt.png"
        if not gt.exists():
            problems.append(f"{img}: missing {gt.name}")
            continue
        roi = directory / f"{img.stem}.roi.png"
        entries.append(Entry(img, (gt,), roi if roi.exists() else None))
    return entries


def _validate(manifest: DatasetManifest) -> None:
    """Parse every file; check shapes and per-split channel agreement."""
    counts = {}
    for split, entries in manifest.splits.items():
        channels = {}
        for e in entries:
            try:
                img = read_image(e.image)
                shape = img.shape[1:]
                for p in list(e.annotations) + ([e.roi] if e.roi else []):
                    mask = read_binary_mask(p)
                    if mask.shape != shape:
                        manifest.problems.append(
                            f"{p}: shape {mask.shape} differs from image {shape}")
            except (OSError, FormatError, ValueError) as exc:
                manifest.problems.append(f"{e.image}: unreadable ({exc})")
                continue
            channels[e.image] = img.shape[0]
        if channels:
            values = list(channels.values())
            common = max(set(values), key=values.count)
            for path, c in channels.items():
                if c != common:
                    manifest.problems.append(
                        f"{path}: {c} channels, split {split!r} uses {common}")
            counts[split] = common
    if len(set(counts.values())) > 1:
        manifest.problems.append(f"channel counts differ between splits: {counts}")
    manifest.channels = next(iter(counts.values()), None)


def ingest_dataset(root, layout: str = "bsds") -> DatasetManifest:
    """Scan ``root`` and return a manifest; problems are collected, not raised."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    manifest = DatasetManifest(source=f"{layout}:{root}")
    if layout == "bsds":
        for split in SPLITS:
            if (root / "images" / split).is_dir():
                manifest.splits[split] = _bsds_entries(root, split, manifest.problems)
    elif layout == "flat":
        subdirs = [s for s in SPLITS if (root / s).is_dir()]
        if subdirs:
            for split in subdirs:
                manifest.splits[split] = _flat_entries(root / split, manifest.problems)
        else:
            manifest.splits["all"] = _flat_entries(root, manifest.problems)
    else:
        raise ConfigError(f"unknown layout {layout!r} (expected bsds or flat)")
    _validate(manifest)
    if not any(manifest.splits.values()) and not manifest.problems:
        manifest.problems.append(f"{root}: no images found")
    return manifest


# -- synthetic corpora -------------------------------------------------------

def label_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from the east or south neighbour."""
    gt = np.zeros(labels.shape, dtype=bool)
    gt[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    gt[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return gt


def polygon_scene(rng, size: int, n_polygons=(3, 6), noise: float = 0.05):
    """Overlapping convex polygons; returns ``(image, labels, gt)``."""
    k = int(rng.integers(n_polygons[0], n_polygons[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1)
    labels = np.zeros(size * size, dtype=np.int32)
    for lab in range(1, k + 1):
        centre = rng.uniform(0.15, 0.85, 2) * size
        radius = rng.uniform(0.15, 0.4) * size
        ang = rng.uniform(0, 2 * np.pi, 8)
        rad = radius * np.sqrt(rng.uniform(0.3, 1.0, 8))
        hull = ConvexHull(centre + np.stack([rad * np.sin(ang), rad * np.cos(ang)], axis=1))
        eq = hull.equations
        inside = np.all(pts @ eq[:, :2].T + eq[:, 2] <= 0, axis=1)
        labels[inside] = lab
    labels = labels.reshape(size, size)
    levels = rng.permutation(np.linspace(0.1, 0.9, k + 1))
    clean = levels[labels]
    image = clean[None].repeat(3, axis=0) + rng.normal(0.0, noise, (3, size, size))
    return np.clip(image, 0.0, 1.0), labels, label_boundaries(labels)


def _stroke(rng, size, centre, radius):
    """Points of a smooth random curve starting inside the disk."""
    r0 = radius * np.sqrt(rng.uniform(0, 1))
    a0 = rng.uniform(0, 2 * np.pi)
    p = centre + r0 * np.array([np.sin(a0), np.cos(a0)])
    heading = rng.uniform(0, 2 * np.pi)
    turn = 0.0
    steps = int(rng.integers(size // 2, 2 * size))
    out = []
    for _ in range(steps):
        turn = 0.9 * turn + rng.normal(0, 0.04)
        heading += turn
        p = p + 0.5 * np.array([np.sin(heading), np.cos(heading)])
        if not (0 <= p[0] < size and 0 <= p[1] < size):
            break
        out.append(p.copy())
    return np.array(out).reshape(-1, 2)


def vessel_scene(rng, size: int, density=(0.01, 0.05)):
    """Dark curvilinear strokes on a textured disk; returns ``(image, gt, roi)``."""
    yy, xx = np.mgrid[0:size, 0:size]
    centre = np.array([size / 2 - 0.5, size / 2 - 0.5])
    radius = 0.47 * size
    roi = (yy - centre[0]) ** 2 + (xx - centre[1]) ** 2 <= radius ** 2
    lo, hi = density
    target = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    area = roi.sum()
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(200):
        if mask[roi].sum() >= target * area:
            break
        pts = _stroke(rng, size, centre, radius)
        if len(pts) < 4:
            continue
        line = np.zeros_like(mask)
        ij = np.rint(pts).astype(int).clip(0, size - 1)
        line[ij[:, 0], ij[:, 1]] = True
        width = int(rng.integers(1, 4))
        if width > 1:
            line = ndimage.binary_dilation(line, ndimage.generate_binary_structure(2, 1),
                                           iterations=width - 1)
        trial = (mask | line) & roi
        if trial.sum() <= hi * area:
            mask = trial
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 3.0)
    texture /= texture.std() + 1e-12
    shade = 0.55 + 0.05 * texture + 0.1 * np.cos((xx - yy) / size)
    vessel = ndimage.gaussian_filter(mask.astype(np.float64), 0.5)
    base = shade - 0.25 * vessel
    tint = np.array([1.0, 0.6, 0.35])[:, None, None]
    image = base[None] * tint + rng.normal(0, 0.02, (3, size, size))
    image = np.where(roi[None], image, 0.0)
    return np.clip(image, 0.0, 1.0), mask, roi


def generate_synthetic(kind: str, counts: dict, size: int, seed: int, out_dir,
                       min_size: int = 34) -> DatasetManifest:
    """Write a synthetic corpus in ``bsds`` layout and return its manifest.

    ``counts`` maps split name to number of images.  Every image draws from
    its own generator seeded by ``(seed, split, index)``, so the corpus is
    reproducible file by file.
    """
    if kind not in ("polygons", "vessels"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if size < min_size:
        raise ConfigError(f"image size {size} is smaller than the patch size {min_size}")
    out = Path(out_dir)
    for s_idx, (split, count) in enumerate(sorted(counts.items())):
        for sub in ("images", "groundTruth") + (("roi",) if kind == "vessels" else ()):
            (out / sub / split).mkdir(parents=True, exist_ok=True)
        tag = SPLITS.index(split) if split in SPLITS else 10 + s_idx
        for i in range(count):
            rng = np.random.default_rng([seed, tag, i])
            stem = f"{kind[:4]}_{split}_{i:04d}"
            if kind == "polygons":
                image, _, gt = polygon_scene(rng, size)
                roi = None
            else:
                image, gt, roi = vessel_scene(rng, size)
            write_png(out / "images" / split / f"{stem}.png", image)
            write_png(out / "groundTruth" / split / f"{stem}.png", gt.astype(np.float64))
            if roi is not None:
                write_png(out / "roi" / split / f"{stem}.png", roi.astype(np.float64))
    return ingest_dataset(out, "bsds")
