"""Detection quality protocol: greedy IoU matching, FPPI sweep, log-average miss rate.

A ground truth is *reasonable* when it is tall enough and at most partially
occluded; everything else is an ignore region: detections landing on it count
neither as hits nor as false positives. Matching is greedy in descending
score order (ties: lower input index first), so the outcome of a high-scoring
detection never depends on lower-scoring ones -- which is what makes the
threshold sweep a simple prefix count.

The curve samples the lowest achievable miss rate at ``n_points``
log-spaced false-positives-per-image values, and the scalar summary is the
geometric mean of those miss rates (clamped at 1e-10 before the log).
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import BoundingBox, Detection, GroundTruth, iou

__all__ = [
    "EvalConfig",
    "MatchResult",
    "EvalImage",
    "SubsetCurve",
    "EvalResult",
    "is_reasonable",
    "match",
    "mr_fppi_curve",
    "subset_eval",
    "write_detections",
    "read_detections",
    "eval_result_to_csv",
]

MISS_FLOOR = 1e-10

SUBSET_ORDER = ("all", "day", "night", "near", "medium", "far")


@dataclasses.dataclass
class EvalConfig:
    """Matching threshold, FPPI sampling grid, and the reasonable filter."""

    iou_threshold: float = 0.5
    fppi_range: tuple[float, float] = (1e-2, 1.0)
    n_points: int = 9
    reasonable_min_height: float = 14.0
    allowed_occlusion: tuple[str, ...] = ("none", "partial")

    def __post_init__(self):
        lo, hi = self.fppi_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError(f"fppi_range must be positive and ordered, got {self.fppi_range}")
        if self.n_points < 2:
            raise ValueError(f"n_points must be >= 2, got {self.n_points}")

    def fppi_points(self) -> np.ndarray:
        lo, hi = self.fppi_range
        return np.logspace(math.log10(lo), math.log10(hi), self.n_points)


def is_reasonable(gt: GroundTruth, cfg: EvalConfig) -> bool:
    return gt.box.h >= cfg.reasonable_min_height and gt.occlusion in cfg.allowed_occlusion


@dataclasses.dataclass
class MatchResult:
    """Per-image greedy matching of all detections at once.

    ``outcomes`` holds (score, kind) per detection with kind in
    {"tp", "fp", "ignored"}; counts summarize the full (unthresholded) set.
    """

    tp: int
    fp: int
    missed: int
    n_reasonable: int
    outcomes: list[tuple[float, str]]


def match(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    cfg: EvalConfig,
    keep_gt: Callable[[GroundTruth], bool] | None = None,
) -> MatchResult:
    """Greedily assign detections to ground truths for one image.

    Each detection (descending score, lower index first on ties) takes the
    unmatched reasonable truth of highest IoU at or above the threshold;
    failing that, any overlap with an ignore region (which may absorb any
    number of detections) parks it as "ignored"; otherwise it is a false
    positive. ``keep_gt`` optionally narrows the reasonable set further (used
    for subset evaluation).
    """
    reasonable = [
        is_reasonable(gt, cfg) and (keep_gt is None or keep_gt(gt)) for gt in ground_truths
    ]
    taken = [False] * len(ground_truths)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    outcomes: list[tuple[float, str]] = []
    for i in order:
        det = detections[i]
        best_j, best_iou = -1, -1.0
        for j, gt in enumerate(ground_truths):
            if not reasonable[j] or taken[j]:
                continue
            v = iou(det.box, gt.box)
            if v >= cfg.iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            outcomes.append((det.score, "tp"))
            continue
        hits_ignore = any(
            not reasonable[j] and iou(det.box, gt.box) >= cfg.iou_threshold
            for j, gt in enumerate(ground_truths)
        )
        outcomes.append((det.score, "ignored" if hits_ignore else "fp"))
    n_reasonable = sum(reasonable)
    tp = sum(1 for _, kind in outcomes if kind == "tp")
    fp = sum(1 for _, kind in outcomes if kind == "fp")
    return MatchResult(tp=tp, fp=fp, missed=n_reasonable - tp, n_reasonable=n_reasonable, outcomes=outcomes)


@dataclasses.dataclass
class SubsetCurve:
    """Sampled (fppi, miss rate) points and their log-average."""

    points: list[tuple[float, float]]
    mr2: float
    n_images: int
    n_gt: int


def mr_fppi_curve(matches: Sequence[MatchResult], cfg: EvalConfig) -> SubsetCurve:
    """Sweep score thresholds over all images and sample the miss-rate curve.

    Greedy matching is prefix-stable in score, so the sweep only counts how
    many tp/fp outcomes sit at or above each distinct detection score. At each
    sampled FPPI value the curve takes the lowest miss rate among sweep points
    with fppi at or below it (a step-function reading); the no-detections
    point (fppi 0, miss 1) always exists.
    """
    n_images = len(matches)
    total_gt = sum(m.n_reasonable for m in matches)
    if n_images == 0 or total_gt == 0:
        raise ValueError("mr_fppi_curve requires at least one image with ground truth")
    tp_scores = np.sort(np.array([s for m in matches for s, k in m.outcomes if k == "tp"]))
    fp_scores = np.sort(np.array([s for m in matches for s, k in m.outcomes if k == "fp"]))

    sweep: list[tuple[float, float]] = [(0.0, 1.0)]
    thresholds = np.unique(np.concatenate([tp_scores, fp_scores]))[::-1]
    for t in thresholds:
        tp = tp_scores.size - np.searchsorted(tp_scores, t, side="left")
        fp = fp_scores.size - np.searchsorted(fp_scores, t, side="left")
        sweep.append((fp / n_images, (total_gt - tp) / total_gt))

    points = []
    for f in cfg.fppi_points():
        miss = min(m for fppi, m in sweep if fppi <= f)
        points.append((float(f), float(miss)))
    mr2 = float(np.exp(np.mean([np.log(max(m, MISS_FLOOR)) for _, m in points])))
    return SubsetCurve(points=points, mr2=mr2, n_images=n_images, n_gt=total_gt)


@dataclasses.dataclass
class EvalImage:
    """Everything the evaluator needs to know about one image."""

    image_id: str
    illumination: str
    ground_truths: list[GroundTruth]
    detections: list[Detection]


@dataclasses.dataclass
class EvalResult:
    """Curves keyed by subset name; empty subsets are simply absent."""

    subsets: dict[str, SubsetCurve]


def _curve_for(images: Sequence[EvalImage], cfg: EvalConfig, keep_gt=None) -> SubsetCurve | None:
    if not images:
        return None
    matches = [match(img.detections, img.ground_truths, cfg, keep_gt) for img in images]
    if sum(m.n_reasonable for m in matches) == 0:
        return None
    return mr_fppi_curve(matches, cfg)


def subset_eval(images: Sequence[EvalImage], cfg: EvalConfig) -> EvalResult:
    """Evaluate overall, per illumination regime, and per height tercile.

    Day/night filter whole images; the scale subsets instead narrow the
    reasonable set to one tercile band of the reasonable heights (computed
    over the full image set), turning the other truths into ignore regions.
    The three bands partition the reasonable truths exactly.
    """
    subsets: dict[str, SubsetCurve] = {}

    def put(name, curve):
        if curve is not None:
            subsets[name] = curve

    put("all", _curve_for(images, cfg))
    put("day", _curve_for([im for im in images if im.illumination == "day"], cfg))
    put("night", _curve_for([im for im in images if im.illumination == "night"], cfg))

    heights = [gt.box.h for im in images for gt in im.ground_truths if is_reasonable(gt, cfg)]
    if heights:
        q1, q2 = np.quantile(heights, [1 / 3, 2 / 3])
        bands = {
            "far": lambda gt: gt.box.h < q1,
            "medium": lambda gt: q1 <= gt.box.h < q2,
            "near": lambda gt: gt.box.h >= q2,
        }
        for name, keep in bands.items():
            put(name, _curve_for(images, cfg, keep))
    return EvalResult(subsets=subsets)


# ---------------------------------------------------------------------------
# File interfaces


def write_detections(path, detections_by_image: dict[str, list[Detection]]) -> None:
    """One CSV record per detection: image id, center box, score."""
    lines = ["image_id,cx,cy,w,h,score"]
    for image_id in detections_by_image:
        for d in detections_by_image[image_id]:
            b = d.box
            lines.append(f"{image_id},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r},{d.score!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "image_id,cx,cy,w,h,score":
        raise ValueError(f"detections file {path}: missing 'image_id,cx,cy,w,h,score' header")
    out: dict[str, list[Detection]] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        image_id, cx, cy, w, h, score = line.split(",")
        out.setdefault(image_id, []).append(
            Detection(BoundingBox(float(cx), float(cy), float(w), float(h)), float(score))
        )
    return out


def eval_result_to_csv(result: EvalResult) -> str:
    """Curve rows ``subset,fppi,miss_rate`` followed by ``summary,<subset>,<mr2>`` rows."""
    names = [s for s in SUBSET_ORDER if s in result.subsets]
    names += [s for s in result.subsets if s not in names]
    lines = ["subset,fppi,miss_rate"]
    for name in names:
        for fppi, miss in result.subsets[name].points:
            lines.append(f"{name},{fppi!r},{miss!r}")
    for name in names:
        lines.append(f"summary,{name},{result.subsets[name].mr2!r}")
    return "\n".join(lines) + "\n"
