"""Boundary and segmentation benchmark scoring.

Boundary maps are thinned by non-maximum suppression, binarised over a
threshold grid and matched to ground truth within a distance tolerance
given as a fraction of the image diagonal.  Matching is greedy: candidate
(pred, gt) pairs within the radius are consumed nearest-first, each pixel
used at most once.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError


def default_thresholds(count: int = 99) -> np.ndarray:
    return np.arange(1, count + 1) / (count + 1)


@dataclass(frozen=True)
class MatchConfig:
    tolerance: float = 0.75e-2
    thresholds: tuple = tuple(default_thresholds())

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ConfigError("thresholds must be strictly increasing inside (0, 1)")


# -- thinning -------------------------------------------------------------------

_DIRECTIONS = np.array([[0, 1], [1, 1], [1, 0], [1, -1]])  # (drow, dcol) per bin


def ridge_normal_bins(response: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Quantised ridge-normal direction per pixel (0: horizontal, 1: diagonal,
    2: vertical, 3: anti-diagonal).

    The normal is the eigenvector of the most negative eigenvalue of the
    Hessian, estimated by applying Sobel gradients twice to the
    Gaussian-smoothed response.
    """
    s = ndimage.gaussian_filter(response.astype(np.float64), sigma, mode="nearest")
    gr = ndimage.sobel(s, axis=0, mode="nearest")
    gc = ndimage.sobel(s, axis=1, mode="nearest")
    hrr = ndimage.sobel(gr, axis=0, mode="nearest")
    hcc = ndimage.sobel(gc, axis=1, mode="nearest")
    hrc = ndimage.sobel(gr, axis=1, mode="nearest")
    # angle of the minor-eigenvalue eigenvector in (col, row) coordinates
    theta = 0.5 * np.arctan2(2.0 * hrc, hcc - hrr) + np.pi / 2.0
    theta = np.mod(theta, np.pi)
    return np.rint(theta / (np.pi / 4.0)).astype(np.int64) % 4


def non_max_suppress(response: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Keep pixels that are maxima along their ridge normal; zero the rest.

    A pixel must strictly exceed its forward neighbour along the normal and
    be no smaller than the backward one, so a flat plateau keeps exactly one
    pixel across its width.
    """
    e = np.asarray(response, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError("non-maximum suppression expects a single-channel map")
    h, w = e.shape
    bins = ridge_normal_bins(e, sigma)
    padded = np.pad(e, 1, mode="constant")
    rows, cols = np.indices(e.shape)
    d = _DIRECTIONS[bins]
    fwd = padded[rows + 1 + d[..., 0], cols + 1 + d[..., 1]]
    bwd = padded[rows + 1 - d[..., 0], cols + 1 - d[..., 1]]
    keep = (e > fwd) & (e >= bwd) & (e > 0)
    return np.where(keep, e, 0.0)


# -- matching -------------------------------------------------------------------

@numba.njit(cache=True)
def _greedy_consume(pi, gi, n_pred, n_gt):
    used_p = np.zeros(n_pred, dtype=np.bool_)
    used_g = np.zeros(n_gt, dtype=np.bool_)
    for k in range(pi.shape[0]):
        a, b = pi[k], gi[k]
        if not used_p[a] and not used_g[b]:
            used_p[a] = True
            used_g[b] = True
    return used_p, used_g


def match_radius(shape, tolerance: float) -> float:
    return float(tolerance * np.hypot(shape[0], shape[1]))


def match_masks(pred: np.ndarray, gt: np.ndarray, radius: float):
    """Greedy one-to-one matching; returns boolean ``matched`` flags for the
    predicted and ground-truth pixels (in ``np.nonzero`` order) plus their
    coordinates."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    pp = np.argwhere(pred)
    gp = np.argwhere(gt)
    if len(pp) == 0 or len(gp) == 0:
        return np.zeros(len(pp), bool), np.zeros(len(gp), bool), pp, gp
    pairs = cKDTree(pp).sparse_distance_matrix(cKDTree(gp), radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(len(pp), bool), np.zeros(len(gp), bool), pp, gp
    pi = pairs["i"].astype(np.int64)
    gi = pairs["j"].astype(np.int64)
    dist = pairs["v"]
    # ties broken by the unordered pixel pair, so swapping pred and gt
    # replays the same consumption order
    w = pred.shape[1]
    lin_p = pp[pi, 0] * w + pp[pi, 1]
    lin_g = gp[gi, 0] * w + gp[gi, 1]
    order = np.lexsort((np.maximum(lin_p, lin_g), np.minimum(lin_p, lin_g), dist))
    used_p, used_g = _greedy_consume(pi[order], gi[order], len(pp), len(gp))
    return used_p, used_g, pp, gp


@dataclass
class MatchCounts:
    matched_pred: int
    total_pred: int
    matched_gt: int
    total_gt: int

    @property
    def precision(self) -> float:
        return self.matched_pred / self.total_pred if self.total_pred else 1.0

    @property
    def recall(self) -> float:
        return self.matched_gt / self.total_gt if self.total_gt else 1.0


def match_boundaries(pred, gt, tolerance: float = 0.75e-2) -> MatchCounts:
    """Count matched pixels within ``tolerance * diagonal``."""
    used_p, used_g, pp, gp = match_masks(pred, gt, match_radius(np.shape(pred), tolerance))
    return MatchCounts(int(used_p.sum()), len(pp), int(used_g.sum()), len(gp))


# -- dataset scores -------------------------------------------------------------

def f_measure(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def average_precision(recall, precision) -> float:
    """Area under the interpolated PR curve.

    Points are sorted by recall, precision replaced by its running maximum
    from the high-recall end, the curve anchored at recall 0 with the best
    precision, and integrated with the trapezoidal rule.
    """
    r = np.asarray(recall, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    order = np.lexsort((-p, r))
    r, p = r[order], p[order]
    p_interp = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    p_interp = np.concatenate([[p_interp[0]], p_interp])
    return float(trapezoid(p_interp, r))


@dataclass
class ScoreReport:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    per_image_best_f: np.ndarray = field(default_factory=lambda: np.zeros(0))
    counts: np.ndarray | None = None  # (n_images, n_thresholds, 4)

    def summary(self) -> dict:
        return {"ODS": self.ods, "ODS_threshold": self.ods_threshold,
                "OIS": self.ois, "AP": self.ap}


def counts_per_threshold(response: np.ndarray, gts: Sequence[np.ndarray],
                         cfg: MatchConfig, thin: bool = True) -> np.ndarray:
    """``(n_thresholds, 4)`` array of matchedPred, totalPred, matchedGt, totalGt.

    With several annotators, recall counts are summed over annotators and a
    predicted pixel counts as matched if it matches any of them.
    """
    e = non_max_suppress(response) if thin else np.asarray(response, dtype=np.float64)
    radius = match_radius(e.shape, cfg.tolerance)
    gts = [np.asarray(g, dtype=bool) for g in gts]
    for g in gts:
        if g.shape != e.shape:
            raise ShapeError(f"ground truth {g.shape} does not match prediction {e.shape}")
    out = np.zeros((len(cfg.thresholds), 4), dtype=np.int64)
    for k, t in enumerate(cfg.thresholds):
        pred = e >= t
        n_pred = int(pred.sum())
        any_match = np.zeros(n_pred, dtype=bool)
        mg = tg = 0
        for g in gts:
            used_p, used_g, _, gp = match_masks(pred, g, radius)
            if n_pred:
                any_match |= used_p
            mg += int(used_g.sum())
            tg += len(gp)
        out[k] = (int(any_match.sum()), n_pred, mg, tg)
    return out


def score_counts(counts: np.ndarray, thresholds) -> ScoreReport:
    """Aggregate ``(n_images, n_thresholds, 4)`` match counts into a report."""
    counts = np.asarray(counts, dtype=np.int64)
    pooled = counts.sum(axis=0)
    precision = _ratio(pooled[:, 0], pooled[:, 1])
    recall = _ratio(pooled[:, 2], pooled[:, 3])
    f = f_measure(precision, recall)
    best = int(np.argmax(f))
    img_p = _ratio(counts[:, :, 0], counts[:, :, 1])
    img_r = _ratio(counts[:, :, 2], counts[:, :, 3])
    per_image = f_measure(img_p, img_r).max(axis=1)
    keep = (pooled[:, 1] > 0)
    ap = average_precision(recall[keep], precision[keep]) if keep.any() else 0.0
    return ScoreReport(
        thresholds=np.asarray(thresholds, dtype=np.float64),
        precision=precision, recall=recall, f=f,
        ods=float(f[best]), ods_threshold=float(thresholds[best]),
        ois=float(per_image.mean()), ap=ap,
        per_image_best_f=per_image, counts=counts,
    )


def score_dataset(predictions, ground_truths, cfg: MatchConfig = MatchConfig(),
                  thin: bool = True) -> ScoreReport:
    """ODS / OIS / AP for response maps against boundary ground truth.

    ``ground_truths[k]`` is one binary map or a list of maps (one per
    annotator).  Responses are thinned with :func:`non_max_suppress` first.
    """
    predictions = list(predictions)
    ground_truths = list(ground_truths)
    if not predictions:
        raise ValueError("empty dataset")
    if len(predictions) != len(ground_truths):
        raise ShapeError("predictions and ground truths differ in count")
    counts = []
    for pred, gt in zip(predictions, ground_truths):
        gts = [gt] if np.ndim(gt) == 2 else list(gt)
        counts.append(counts_per_threshold(pred, gts, cfg, thin))
    return score_counts(np.stack(counts), cfg.thresholds)


def sweep_tolerance(predictions, ground_truths, tolerances, thresholds=None):
    thresholds = default_thresholds() if thresholds is None else thresholds
    return {tol: score_dataset(predictions, ground_truths,
                               MatchConfig(tol, tuple(thresholds)))
            for tol in tolerances}


# -- pixelwise segmentation scores ----------------------------------------------

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def f(self):
        return f_measure(self.precision, self.recall)

    @property
    def ap(self) -> float:
        return average_precision(self.recall, self.precision)


def pixel_precision_recall(response, gt, roi=None, thresholds=None) -> PRCurve:
    """Plain pixelwise precision/recall at each threshold inside ``roi``.

    Precision is 1 at thresholds where nothing is predicted positive;
    recall is 1 when the ROI holds no positive pixel.
    """
    e = np.asarray(response, dtype=np.float64)
    g = np.asarray(gt, dtype=bool)
    if e.shape != g.shape:
        raise ShapeError(f"response {e.shape} and ground truth {g.shape} differ")
    if roi is None:
        mask = np.ones(e.shape, dtype=bool)
    else:
        mask = np.asarray(roi, dtype=bool)
        if mask.shape != e.shape:
            raise ShapeError("ROI mask shape differs from response")
        if not mask.any():
            raise ValueError("empty ROI mask")
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds)
    ev, gv = e[mask], g[mask]
    tp = np.array([np.sum((ev >= t) & gv) for t in thresholds], dtype=np.float64)
    pp = np.array([np.sum(ev >= t) for t in thresholds], dtype=np.float64)
    pos = float(gv.sum())
    precision = np.divide(tp, pp, out=np.ones_like(tp), where=pp > 0)
    recall = tp / pos if pos > 0 else np.ones_like(tp)
    return PRCurve(np.asarray(thresholds, dtype=np.float64), precision, recall)


def pixel_precision_recall_dataset(responses, gts, rois=None, thresholds=None) -> PRCurve:
    """Pixel counts pooled over a dataset."""
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds)
    rois = [None] * len(responses) if rois is None else rois
    tp = np.zeros(len(thresholds))
    pp = np.zeros(len(thresholds))
    pos = 0.0
    for e, g, roi in zip(responses, gts, rois):
        e = np.asarray(e, dtype=np.float64)
        g = np.asarray(g, dtype=bool)
        mask = np.ones(e.shape, bool) if roi is None else np.asarray(roi, bool)
        ev, gv = e[mask], g[mask]
        tp += [np.sum((ev >= t) & gv) for t in thresholds]
        pp += [np.sum(ev >= t) for t in thresholds]
        pos += float(gv.sum())
    precision = np.divide(tp, pp, out=np.ones_like(tp), where=pp > 0)
    recall = tp / pos if pos > 0 else np.ones_like(tp)
    return PRCurve(np.asarray(thresholds, dtype=np.float64), precision, recall)


# -- report files ---------------------------------------------------------------

def write_report_csv(report: ScoreReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f"])
        for t, p, r, f in zip(report.thresholds, report.precision, report.recall, report.f):
            w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
        w.writerow(["summary", f"ODS={report.ods:.6f}", f"OIS={report.ois:.6f}",
                    f"AP={report.ap:.6f}"])


def write_curve_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f"])
        for t, p, r, f in zip(curve.thresholds, curve.precision, curve.recall, curve.f):
            w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
        w.writerow(["summary", f"AP={curve.ap:.6f}", f"maxF={curve.f.max():.6f}", ""])


def write_summary(values: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("version = 1\n")
        for k, v in values.items():
            fh.write(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n")
