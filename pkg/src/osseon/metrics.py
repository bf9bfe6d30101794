"""Surface extraction and localization/detection/classification metrics.

A bone surface is one point per image column (scanline): the probability
map is thresholded, and per column the run of above-threshold pixels with
the largest summed probability contributes its center row. Surfaces are
compared by the symmetric average Euclidean distance in millimeters (AED)
and by recall/precision/F-score with a fixed physical true-positive
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, MetricUndefinedError
from .image import Image2D, from_array


@dataclass(frozen=True)
class EvalConfig:
    prob_threshold: float = 0.5
    tp_tolerance_mm: float = 0.9
    gt_dilation_mm: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError(f"prob_threshold must lie in (0,1), got {self.prob_threshold}")
        if self.tp_tolerance_mm <= 0:
            raise ConfigError(f"tp_tolerance_mm must be > 0, got {self.tp_tolerance_mm}")
        if self.gt_dilation_mm <= 0:
            raise ConfigError(f"gt_dilation_mm must be > 0, got {self.gt_dilation_mm}")


@dataclass(frozen=True)
class SurfacePolyline:
    """Extracted bone surface: at most one (row, col) point per column.

    Rows may be half-integers (centers of even-length runs); columns are
    strictly increasing integers.
    """

    points: np.ndarray
    spacing_mm: tuple[float, float]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] > 1 and not np.all(np.diff(pts[:, 1]) > 0):
            raise ContractError("surface columns must be strictly increasing")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def points_mm(self) -> np.ndarray:
        """Points scaled to millimeters using the anisotropic spacing."""
        return self.points * np.asarray(self.spacing_mm)[None, :]


@dataclass(frozen=True)
class MetricsReport:
    """Summary row matching the reported evaluation columns."""

    aed_mean_mm: float
    aed_std_mm: float
    cl95_mm: float
    recall: float
    precision: float
    f_score: float
    n_images: int
    classification_error: float  # NaN when class labels are unavailable


def extract_surface(probmap: Image2D, cfg: EvalConfig) -> SurfacePolyline:
    """Threshold a probability map and keep one center pixel per scanline.

    Per column, maximal runs of pixels at or above the threshold compete by
    summed probability; ties go to the deeper run. The winning run emits its
    center row (first + last) / 2. Columns with no run emit nothing.
    """
    data = probmap.data
    above = data >= cfg.prob_threshold
    points = []
    for col in range(probmap.cols):
        mask = above[:, col]
        if not mask.any():
            continue
        # run boundaries of the True segments
        padded = np.concatenate(([False], mask, [False]))
        starts = np.flatnonzero(padded[1:] & ~padded[:-1])
        ends = np.flatnonzero(~padded[1:] & padded[:-1])  # exclusive
        best_sum = -np.inf
        best_center = None
        for s, e in zip(starts, ends):
            run_sum = float(data[s:e, col].sum())
            if run_sum >= best_sum:  # >= keeps the deeper run on ties
                best_sum = run_sum
                best_center = (s + (e - 1)) / 2.0
        points.append((best_center, float(col)))
    return SurfacePolyline(points=np.asarray(points, dtype=np.float64).reshape(-1, 2),
                           spacing_mm=probmap.spacing_mm)


def dilate_contour(points: np.ndarray, dilation_mm: float,
                   spacing_mm: tuple[float, float], dims: tuple[int, int]) -> Image2D:
    """Binary mask of pixels within ``dilation_mm / 2`` of any contour point.

    Distances are Euclidean in millimeters with anisotropic spacing.
    """
    rows, cols = dims
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((rows, cols), dtype=np.float64)
    if pts.shape[0] == 0:
        return from_array(mask, spacing_mm)
    radius = dilation_mm / 2.0
    sr, sc = spacing_mm
    rr = np.arange(rows, dtype=np.float64)[:, None]
    cc = np.arange(cols, dtype=np.float64)[None, :]
    # bounding box in pixels around each point, checked exactly inside
    pad_r = int(np.ceil(radius / sr)) + 1
    pad_c = int(np.ceil(radius / sc)) + 1
    for pr, pc in pts:
        r0 = max(0, int(np.floor(pr)) - pad_r)
        r1 = min(rows, int(np.ceil(pr)) + pad_r + 1)
        c0 = max(0, int(np.floor(pc)) - pad_c)
        c1 = min(cols, int(np.ceil(pc)) + pad_c + 1)
        d = np.hypot((rr[r0:r1] - pr) * sr, (cc[:, c0:c1] - pc) * sc)
        mask[r0:r1, c0:c1] = np.maximum(mask[r0:r1, c0:c1], (d <= radius).astype(np.float64))
    return from_array(mask, spacing_mm)


def _nearest_distances_mm(a: SurfacePolyline, b: SurfacePolyline) -> np.ndarray:
    """Distance in mm from each point of a to its nearest point of b."""
    pa = a.points_mm()
    pb = b.points_mm()
    d = np.hypot(pa[:, 0:1] - pb[None, :, 0], pa[:, 1:2] - pb[None, :, 1])
    return d.min(axis=1)


def aed(a: SurfacePolyline, b: SurfacePolyline) -> float:
    """Symmetric average Euclidean distance between two surfaces, in mm."""
    if len(a) == 0 or len(b) == 0:
        raise MetricUndefinedError("AED is undefined for an empty surface")
    if a.spacing_mm != b.spacing_mm:
        raise ContractError(f"surfaces disagree on spacing: {a.spacing_mm} vs {b.spacing_mm}")
    fwd = float(np.mean(_nearest_distances_mm(a, b)))
    bwd = float(np.mean(_nearest_distances_mm(b, a)))
    return 0.5 * (fwd + bwd)


def f_score(recall: float, precision: float) -> float:
    """Harmonic mean of recall and precision; 0 when both vanish."""
    if recall + precision == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


class PrfResult(NamedTuple):
    recall: float
    precision: float
    f_score: float
    empty_detection: bool = False


def detection_prf(detected: SurfacePolyline, gt: SurfacePolyline, cfg: EvalConfig) -> PrfResult:
    """Recall, precision, and F-score at the physical tolerance.

    A detected point is a true positive when it lies within
    ``tp_tolerance_mm`` of some ground-truth point; recall mirrors that from
    the ground-truth side. An empty detection yields precision 0 with the
    ``empty_detection`` flag set rather than an error.
    """
    if len(gt) == 0:
        raise MetricUndefinedError("detection metrics need a nonempty ground-truth surface")
    if len(detected) == 0:
        return PrfResult(recall=0.0, precision=0.0, f_score=0.0, empty_detection=True)
    tol = cfg.tp_tolerance_mm
    precision = float(np.mean(_nearest_distances_mm(detected, gt) <= tol))
    recall = float(np.mean(_nearest_distances_mm(gt, detected) <= tol))
    return PrfResult(recall=recall, precision=precision, f_score=f_score(recall, precision))


def ci95_upper(mean: float, std: float, n: int) -> float:
    """Upper bound of the normal-approximation 95% confidence interval."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if std < 0:
        raise ContractError(f"std must be >= 0, got {std}")
    return mean + 1.96 * std / np.sqrt(n)


def classification_error(predictions, labels) -> float:
    """Fraction of mismatched class predictions."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ContractError("classification_error needs at least one sample")
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    return float(np.mean(predictions != labels))


def summarize(aeds_mm: list[float], prfs: list[PrfResult],
              classification_err: float = float("nan")) -> MetricsReport:
    """Aggregate per-image metrics into the summary report.

    AED spread uses the sample standard deviation; recall/precision are
    averaged per image and the summary F-score is their harmonic mean.
    """
    aeds = np.asarray([a for a in aeds_mm if np.isfinite(a)], dtype=np.float64)
    if aeds.size == 0:
        mean = std = cl = float("nan")
    else:
        mean = float(aeds.mean())
        std = float(aeds.std(ddof=1)) if aeds.size > 1 else 0.0
        cl = ci95_upper(mean, std, aeds.size)
    recall = float(np.mean([p.recall for p in prfs])) if prfs else float("nan")
    precision = float(np.mean([p.precision for p in prfs])) if prfs else float("nan")
    return MetricsReport(
        aed_mean_mm=mean,
        aed_std_mm=std,
        cl95_mm=cl,
        recall=recall,
        precision=precision,
        f_score=f_score(recall, precision) if prfs else float("nan"),
        n_images=len(prfs),
        classification_error=classification_err,
    )
