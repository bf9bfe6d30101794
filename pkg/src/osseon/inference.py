"""Model-driven prediction and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError
from .features import compute_feature_stack
from .image import Image2D, LabeledSample, from_array
from .metrics import (
    EvalConfig,
    MetricsReport,
    PrfResult,
    aed,
    classification_error,
    detection_prf,
    extract_surface,
    summarize,
)
from .nn.model import CUNet, PENet
from .shadow import ShadowConfig
from .spectral import FilterConfig


@dataclass(frozen=True)
class Prediction:
    probmap: Image2D
    class_probs: np.ndarray       # length 4, sums to 1
    enhanced: Image2D | None      # pre-enhancing output, None on the fast path

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))


def predict_bmode(cunet: CUNet, us: Image2D) -> Prediction:
    """Fast path: raw B-mode straight into the U-net (no phase features)."""
    x = us.data.astype(np.float32)[None, None]
    seg, cls_probs = cunet.forward(x, training=False)
    return Prediction(
        probmap=from_array(seg[0, 0].astype(np.float64), us.spacing_mm),
        class_probs=cls_probs[0].astype(np.float64),
        enhanced=None,
    )


def predict_enhanced(pe: PENet, cunet: CUNet, us: Image2D, stack: np.ndarray) -> Prediction:
    """Off-line path: 4-channel stack through the pre-enhancing net, then the U-net."""
    x = stack.astype(np.float32)[None]
    enhanced = pe.forward(x, training=False)
    seg, cls_probs = cunet.forward(enhanced, training=False)
    return Prediction(
        probmap=from_array(seg[0, 0].astype(np.float64), us.spacing_mm),
        class_probs=cls_probs[0].astype(np.float64),
        enhanced=from_array(enhanced[0, 0].astype(np.float64), us.spacing_mm),
    )


@dataclass(frozen=True)
class ImageEval:
    """Per-image evaluation row."""

    name: str
    aed_mm: float          # NaN when either surface is empty
    prf: PrfResult
    predicted_class: int
    true_class: int


def evaluate_predictions(names: list[str], probmaps: list[Image2D],
                         gt_masks: list[Image2D], eval_cfg: EvalConfig,
                         predicted_classes: list[int] | None = None,
                         true_classes: list[int] | None = None,
                         ) -> tuple[list[ImageEval], MetricsReport]:
    """Surface metrics (and optional classification error) over a set of images."""
    rows: list[ImageEval] = []
    aeds: list[float] = []
    prfs: list[PrfResult] = []
    for i, (name, prob, gt_mask) in enumerate(zip(names, probmaps, gt_masks)):
        detected = extract_surface(prob, eval_cfg)
        gt_surface = extract_surface(gt_mask, eval_cfg)
        prf = detection_prf(detected, gt_surface, eval_cfg)
        try:
            dist = aed(detected, gt_surface)
        except MetricUndefinedError:
            dist = float("nan")
        rows.append(ImageEval(
            name=name,
            aed_mm=dist,
            prf=prf,
            predicted_class=-1 if predicted_classes is None else predicted_classes[i],
            true_class=-1 if true_classes is None else true_classes[i],
        ))
        aeds.append(dist)
        prfs.append(prf)
    cls_err = float("nan")
    if predicted_classes is not None and true_classes is not None:
        cls_err = classification_error(predicted_classes, true_classes)
    return rows, summarize(aeds, prfs, cls_err)


def evaluate_model(samples: list[LabeledSample], cunet: CUNet,
                   eval_cfg: EvalConfig, pe: PENet | None = None,
                   filter_cfg: FilterConfig | None = None,
                   shadow_cfg: ShadowConfig | None = None,
                   stacks: np.ndarray | None = None,
                   names: list[str] | None = None,
                   ) -> tuple[list[ImageEval], MetricsReport]:
    """Run inference over labeled samples and score surfaces plus classes.

    With a pre-enhancing net, per-sample stacks are taken from ``stacks`` or
    computed on the fly from the provided configurations.
    """
    probmaps: list[Image2D] = []
    pred_classes: list[int] = []
    for i, sample in enumerate(samples):
        if pe is None:
            pred = predict_bmode(cunet, sample.image)
        else:
            if stacks is not None:
                stack = stacks[i]
            else:
                stack = compute_feature_stack(
                    sample.image, filter_cfg or FilterConfig(),
                    shadow_cfg or ShadowConfig()).stack
            pred = predict_enhanced(pe, cunet, sample.image, stack)
        probmaps.append(pred.probmap)
        pred_classes.append(pred.class_id)
    if names is None:
        names = [f"{i:04d}" for i in range(len(samples))]
    return evaluate_predictions(
        names, probmaps, [s.gt_mask for s in samples], eval_cfg,
        predicted_classes=pred_classes,
        true_classes=[s.class_id for s in samples],
    )
