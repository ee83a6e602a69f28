"""Anchor geometry, matching, NMS, and the gated two-branch backbone.

Boxes are center-parameterized (cx, cy, w, h) in image pixels. Anchor labels
follow the shared integer convention: matched ground-truth index for
positives, -1 for negatives, -2 for ignored anchors.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import gate as G
from . import tensor as T
from .illumination import IlluminationWeights
from .losses import LABEL_IGNORE, LABEL_NEGATIVE
from .tensor import Tensor

__all__ = [
    "BoundingBox",
    "Anchor",
    "Detection",
    "GroundTruth",
    "ModelConfig",
    "iou",
    "iou_matrix",
    "make_anchors",
    "anchors_array",
    "encode_boxes",
    "decode_boxes",
    "match_anchors",
    "nms",
    "BackboneParams",
    "BackboneFeatures",
    "backbone_forward",
]

OCCLUSION_TAGS = ("none", "partial", "heavy")

# log-size offsets are clamped here when decoding; exp(6) ~ 400x never occurs
# for sane boxes, so encode(decode(.)) round-trips over the useful range
LOG_SIZE_CLAMP = 6.0


@dataclasses.dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclasses.dataclass(frozen=True)
class Anchor:
    """A prior box tied to one backbone grid cell and one scale slot."""

    box: BoundingBox
    cell: tuple[int, int]
    scale_index: int


@dataclasses.dataclass
class Detection:
    """A scored box; the cascade's stage scores ride along for diagnostics."""

    box: BoundingBox
    score: float
    c1: float = 0.0
    c_r: float = 0.0
    c_t: float = 0.0


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    occlusion: str = "none"

    def __post_init__(self):
        if self.occlusion not in OCCLUSION_TAGS:
            raise ValueError(f"occlusion must be one of {OCCLUSION_TAGS}, got {self.occlusion!r}")

    @property
    def height(self) -> float:
        return self.box.h


@dataclasses.dataclass
class ModelConfig:
    """Backbone widths, anchor layout, cascade thresholds, and NMS settings."""

    stage_channels: tuple[int, ...] = (8, 16, 32)
    anchor_heights: tuple[float, ...] = (12.0, 20.0, 32.0)
    anchor_ratio: float = 0.41
    stage1_iou: tuple[float, float] = (0.3, 0.5)
    stage2_iou: tuple[float, float] = (0.5, 0.7)
    nms_iou: float = 0.5
    score_floor: float = 0.01
    gate_reduction: int = 4

    def __post_init__(self):
        for name, (neg, pos) in (("stage1_iou", self.stage1_iou), ("stage2_iou", self.stage2_iou)):
            if neg > pos:
                raise ValueError(f"{name}: negative threshold {neg} must not exceed positive {pos}")
        if not self.stage_channels:
            raise ValueError("at least one backbone stage is required")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def stride(self) -> int:
        return 2**self.n_stages


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (cx, cy, w, h) box arrays: [M, 4] x [G, 4] -> [M, G]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]))
    ih = np.maximum(0.0, np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def make_anchors(cfg: ModelConfig, image_h: int, image_w: int) -> list[Anchor]:
    """Anchor grid over the final feature map, ordered (cell_y, cell_x, scale).

    Every anchor has aspect ratio w/h equal to ``cfg.anchor_ratio`` and sits at
    its cell center in image coordinates.
    """
    stride = cfg.stride
    cells_y, cells_x = image_h // stride, image_w // stride
    anchors = []
    for gy in range(cells_y):
        for gx in range(cells_x):
            cx = (gx + 0.5) * stride
            cy = (gy + 0.5) * stride
            for si, ah in enumerate(cfg.anchor_heights):
                anchors.append(Anchor(BoundingBox(cx, cy, cfg.anchor_ratio * ah, ah), (gy, gx), si))
    return anchors


def anchors_array(anchors: Sequence[Anchor]) -> np.ndarray:
    return np.array([[a.box.cx, a.box.cy, a.box.w, a.box.h] for a in anchors])


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center/log-size offsets of ``boxes`` relative to ``anchors`` (both [., 4])."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(boxes[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(boxes[..., 3] / anchors[..., 3])
    return out


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; log-size offsets clamped to +-6."""
    anchors = np.asarray(anchors, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    out = np.empty_like(offsets)
    out[..., 0] = anchors[..., 0] + offsets[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + offsets[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(np.clip(offsets[..., 2], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
    out[..., 3] = anchors[..., 3] * np.exp(np.clip(offsets[..., 3], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
    return out


def match_anchors(anchors, ground_truths, thresholds: tuple[float, float]) -> np.ndarray:
    """Assign every anchor exactly one label against the ground-truth boxes.

    IoU at or above the positive threshold matches the best-overlapping truth;
    IoU below the negative threshold is background; the band between is
    ignored. Each ground truth additionally claims its single best anchor
    (provided they overlap at all), so no truth inside the anchor grid goes
    unmatched. Ties break toward the lower index on both sides.
    """
    neg, pos = thresholds
    if neg > pos:
        raise ValueError(f"thresholds: negative {neg} must not exceed positive {pos}")
    boxes_a = anchors if isinstance(anchors, np.ndarray) else anchors_array(anchors)
    if len(ground_truths) == 0:
        return np.full(len(boxes_a), LABEL_NEGATIVE, dtype=np.int64)
    if isinstance(ground_truths, np.ndarray):
        boxes_g = ground_truths
    else:
        boxes_g = np.array(
            [gt.box.as_array() if isinstance(gt, GroundTruth) else gt.as_array() for gt in ground_truths]
        )
    ious = iou_matrix(boxes_a, boxes_g)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(boxes_a)), best_gt]
    labels = np.full(len(boxes_a), LABEL_NEGATIVE, dtype=np.int64)
    labels[(best_iou >= neg) & (best_iou < pos)] = LABEL_IGNORE
    labels[best_iou >= pos] = best_gt[best_iou >= pos]
    for g in range(boxes_g.shape[0]):
        best = int(ious[:, g].argmax())
        if ious[best, g] > 0.0:
            labels[best] = g
    return labels


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression; survivors come out in descending score.

    Equal scores keep input order. Applying the function to its own output is
    a no-op.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[Detection] = []
    for i in order:
        cand = detections[i]
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# Backbone


@dataclasses.dataclass
class BackboneParams:
    """Per-modality conv stacks plus one attention gate per stage (baseline: none)."""

    cfg: ModelConfig
    rgb_convs: list[tuple[Tensor, Tensor]]
    tir_convs: list[tuple[Tensor, Tensor]]
    gates: list[G.GateParams] | None

    @classmethod
    def create(
        cls,
        store: T.ParameterStore,
        cfg: ModelConfig,
        rng: np.random.Generator,
        with_gates: bool = True,
        rgb_channels: int = 3,
        tir_channels: int = 1,
        prefix: str = "bb",
    ) -> "BackboneParams":
        def conv(name, cout, cin):
            w = store.add(f"{prefix}.{name}.w", T.xavier_uniform(rng, cin * 9, cout * 9, (cout, cin, 3, 3)))
            b = store.add(f"{prefix}.{name}.b", np.zeros(cout))
            return w, b

        rgb_convs, tir_convs, gates = [], [], []
        c_in_r, c_in_t = rgb_channels, tir_channels
        for i, c_out in enumerate(cfg.stage_channels):
            rgb_convs.append(conv(f"rgb.s{i + 1}", c_out, c_in_r))
            tir_convs.append(conv(f"tir.s{i + 1}", c_out, c_in_t))
            if with_gates:
                gates.append(G.GateParams.create(store, f"{prefix}.gate.s{i + 1}", c_out, cfg.gate_reduction, rng))
            c_in_r = c_in_t = c_out
        return cls(cfg, rgb_convs, tir_convs, gates if with_gates else None)


@dataclasses.dataclass
class BackboneFeatures:
    """Final fused map plus the per-modality maps the cascade's modal heads read."""

    fused: Tensor
    r_final: Tensor
    t_final: Tensor
    gate_outputs: list[G.GateOutput]


def _weight_pair(weights) -> tuple[np.ndarray | float, np.ndarray | float]:
    if isinstance(weights, IlluminationWeights):
        return weights.w_r, weights.w_t
    if isinstance(weights, (tuple, list)) and weights and isinstance(weights[0], IlluminationWeights):
        return np.array([w.w_r for w in weights]), np.array([w.w_t for w in weights])
    w_r, w_t = weights
    return w_r, w_t


def backbone_forward(
    rgb: Tensor,
    tir: Tensor,
    params: BackboneParams,
    illum,
    fusion=None,
) -> BackboneFeatures:
    """Run both modality branches with a gate after every stage, then fuse.

    Each stage is conv(3x3)-relu followed by a 2x2 mean-pool, so the spatial
    size halves per stage. ``illum`` supplies the gates' interaction weights
    (an :class:`IlluminationWeights`, a list of them, or a raw ``(w_r, w_t)``
    pair); the same weights fuse the final maps as ``w_r*R + w_t*T`` unless
    ``fusion`` overrides them. Without gates (concatenation baseline) the
    fusion is channel concatenation instead.
    """
    w_r, w_t = _weight_pair(illum)
    fuse_r, fuse_t = _weight_pair(fusion) if fusion is not None else (w_r, w_t)
    r, t = rgb, tir
    gate_outputs: list[G.GateOutput] = []
    for i in range(params.cfg.n_stages):
        rw, rb = params.rgb_convs[i]
        tw, tb = params.tir_convs[i]
        r = T.avg_pool2x2(T.relu(T.conv2d(r, rw, rb, stride=1, pad=1)))
        t = T.avg_pool2x2(T.relu(T.conv2d(t, tw, tb, stride=1, pad=1)))
        if params.gates is not None:
            out = G.gate_forward(r, t, params.gates[i], w_r, w_t)
            gate_outputs.append(out)
            r, t = out.r_out, out.t_out
    if params.gates is None:
        fused = T.concat_channels(r, t)
    else:
        fused = T.add(T.scale(r, fuse_r), T.scale(t, fuse_t))
    return BackboneFeatures(fused=fused, r_final=r, t_final=t, gate_outputs=gate_outputs)
