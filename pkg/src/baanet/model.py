"""Full detector assembly: prediction heads, cascade decoding, training losses.

Three fusion modes cover the ablation grid:

* ``baa_gate`` -- gates between stages driven by the illumination network's
  per-pair modality weights, which also mix the stage-2 modal confidences;
* ``baa_gate_no_illum`` -- same gates at full fixed interaction strength (the
  plain unweighted recalibration/aggregation) with an even confidence mix;
* ``concat_baseline`` -- no gates at all; the branches are concatenated.

Both gated modes feed the heads the even mean of the two final streams, so
the heads always read one fixed feature composition; the adaptive weights act
inside the gates and on the cascade confidences where the modalities stay
separable.

The cascade scores an anchor as ``c_final = c1 * (w_r * c_r + w_t * c_t)``
and regresses it as the anchor decoded with the summed stage offsets
``b1 + b2``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import detector as D
from . import illumination as IL
from . import losses as L
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "FUSION_MODES",
    "HeadParams",
    "BAANet",
    "build_model",
    "ModelOutputs",
    "model_forward",
    "decode_and_cascade",
    "predict",
    "compute_losses",
    "frozen_loss_fn",
]

FUSION_MODES = ("baa_gate", "baa_gate_no_illum", "concat_baseline")


@dataclasses.dataclass
class HeadParams:
    """Five 3x3 conv heads: stage-1 score/box, stage-2 box, and per-modality scores."""

    n_anchors: int
    s1_score_w: Tensor
    s1_score_b: Tensor
    s1_box_w: Tensor
    s1_box_b: Tensor
    b2_w: Tensor
    b2_b: Tensor
    cr_w: Tensor
    cr_b: Tensor
    ct_w: Tensor
    ct_b: Tensor

    @classmethod
    def create(
        cls,
        store: T.ParameterStore,
        fused_channels: int,
        modal_channels: int,
        n_anchors: int,
        rng: np.random.Generator,
        prefix: str = "head",
    ) -> "HeadParams":
        def conv(name, cout, cin):
            w = store.add(f"{prefix}.{name}.w", T.xavier_uniform(rng, cin * 9, cout * 9, (cout, cin, 3, 3)))
            b = store.add(f"{prefix}.{name}.b", np.zeros(cout))
            return w, b

        a = n_anchors
        return cls(
            a,
            *conv("s1_score", a, fused_channels),
            *conv("s1_box", 4 * a, fused_channels),
            *conv("b2", 4 * a, fused_channels),
            *conv("cr", a, modal_channels),
            *conv("ct", a, modal_channels),
        )


@dataclasses.dataclass
class BAANet:
    """Everything needed to run or train one detector instance."""

    mode: str
    cfg: D.ModelConfig
    illum_cfg: IL.IllumConfig
    loss_cfg: L.LossConfig
    image_hw: tuple[int, int]
    store: T.ParameterStore
    backbone: D.BackboneParams
    heads: HeadParams
    illum: IL.IllumNetParams | None
    anchors: list[D.Anchor]
    anchors_arr: np.ndarray


def build_model(
    mode: str,
    cfg: D.ModelConfig,
    illum_cfg: IL.IllumConfig,
    loss_cfg: L.LossConfig,
    image_hw: tuple[int, int],
    seed: int = 0,
) -> BAANet:
    """Seeded construction; parameter registration order is fixed, so identical
    seeds give bit-identical initial parameters."""
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    h, w = image_hw
    stride = cfg.stride
    if h % stride or w % stride:
        raise T.ShapeError(f"image size ({h}, {w}) must be divisible by the backbone stride {stride}")
    rng = np.random.default_rng(seed)
    store = T.ParameterStore()
    backbone = D.BackboneParams.create(store, cfg, rng, with_gates=mode != "concat_baseline")
    c_last = cfg.stage_channels[-1]
    fused_channels = 2 * c_last if mode == "concat_baseline" else c_last
    heads = HeadParams.create(store, fused_channels, c_last, len(cfg.anchor_heights), rng)
    illum = IL.IllumNetParams.create(store, illum_cfg, rng) if mode == "baa_gate" else None
    anchors = D.make_anchors(cfg, h, w)
    return BAANet(mode, cfg, illum_cfg, loss_cfg, (h, w), store, backbone, heads, illum, anchors, D.anchors_array(anchors))


@dataclasses.dataclass
class ModelOutputs:
    """Per-anchor raw head outputs plus the per-pair modality weights used."""

    feats: D.BackboneFeatures
    c1_logits: Tensor  # [N, M]
    b1: Tensor  # [N, M, 4]
    cr_logits: Tensor  # [N, M]
    ct_logits: Tensor  # [N, M]
    b2: Tensor  # [N, M, 4]
    weights: list[IL.IlluminationWeights] | None
    w_d: Tensor | None
    w_n: Tensor | None

    def mix_weights(self) -> tuple[np.ndarray | float, np.ndarray | float]:
        if self.weights is None:
            return 0.5, 0.5
        return (
            np.array([wt.w_r for wt in self.weights]),
            np.array([wt.w_t for wt in self.weights]),
        )


def _flatten_scores(x: Tensor) -> Tensor:
    n, a, hc, wc = x.dims
    return T.reshape(T.permute(x, (0, 2, 3, 1)), (n, hc * wc * a))


def _flatten_boxes(x: Tensor) -> Tensor:
    n, a4, hc, wc = x.dims
    return T.reshape(T.permute(x, (0, 2, 3, 1)), (n, hc * wc * (a4 // 4), 4))


def model_forward(
    net: BAANet,
    rgb: Tensor,
    tir: Tensor,
    weights_override: list[IL.IlluminationWeights] | None = None,
) -> ModelOutputs:
    """Run illumination weighting, backbone, and all heads on a batch pair.

    ``weights_override`` substitutes frozen per-pair modality weights for the
    ones the illumination network would produce (the classifier still runs so
    its own loss term stays live); used by the finite-difference oracle.
    """
    weights = w_d = w_n = None
    if net.mode == "baa_gate":
        w_d, w_n = IL.illum_forward(rgb, tir, net.illum, net.illum_cfg)
        # gates and fusion consume the weights as per-pair constants
        weights = (
            weights_override
            if weights_override is not None
            else IL.weights_from_probs(w_d.array, w_n.array, net.illum_cfg)
        )
        # the heads read a fixed even mean of the streams: regime-stable
        # feature statistics; the adaptive weights act in the gates and on
        # the confidences
        interaction, fusion = (np.array([x.w_r for x in weights]), np.array([x.w_t for x in weights])), (0.5, 0.5)
    elif net.mode == "baa_gate_no_illum":
        interaction, fusion = (1.0, 1.0), (0.5, 0.5)
    else:
        interaction, fusion = (1.0, 1.0), (1.0, 1.0)  # fusion unused: concat path
    feats = D.backbone_forward(rgb, tir, net.backbone, interaction, fusion)
    head_in = feats.fused
    hp = net.heads
    c1 = _flatten_scores(T.conv2d(head_in, hp.s1_score_w, hp.s1_score_b, 1, 1))
    b1 = _flatten_boxes(T.conv2d(head_in, hp.s1_box_w, hp.s1_box_b, 1, 1))
    b2 = _flatten_boxes(T.conv2d(head_in, hp.b2_w, hp.b2_b, 1, 1))
    cr = _flatten_scores(T.conv2d(feats.r_final, hp.cr_w, hp.cr_b, 1, 1))
    ct = _flatten_scores(T.conv2d(feats.t_final, hp.ct_w, hp.ct_b, 1, 1))
    return ModelOutputs(feats, c1, b1, cr, ct, b2, weights, w_d, w_n)


def decode_and_cascade(outputs: ModelOutputs, anchors_arr: np.ndarray, cfg: D.ModelConfig) -> list[list[D.Detection]]:
    """Turn head outputs into final per-image detections.

    Confidence: ``c_final = c1 * (w_r * c_r + w_t * c_t)``. Box: the anchor
    decoded with ``b1 + b2``. Detections below the score floor are dropped,
    the rest pass through greedy NMS.
    """
    c1 = T.sigmoid(outputs.c1_logits).array
    c_r = T.sigmoid(outputs.cr_logits).array
    c_t = T.sigmoid(outputs.ct_logits).array
    w_r, w_t = outputs.mix_weights()
    if isinstance(w_r, np.ndarray):
        w_r, w_t = w_r[:, None], w_t[:, None]
    c_final = c1 * (w_r * c_r + w_t * c_t)
    boxes = D.decode_boxes(anchors_arr, outputs.b1.array + outputs.b2.array)
    results = []
    for i in range(c1.shape[0]):
        dets = [
            D.Detection(
                D.BoundingBox(*boxes[i, m]),
                float(c_final[i, m]),
                c1=float(c1[i, m]),
                c_r=float(c_r[i, m]),
                c_t=float(c_t[i, m]),
            )
            for m in np.nonzero(c_final[i] >= cfg.score_floor)[0]
        ]
        results.append(D.nms(dets, cfg.nms_iou))
    return results


def predict(net: BAANet, rgb: Tensor, tir: Tensor) -> list[list[D.Detection]]:
    return decode_and_cascade(model_forward(net, rgb, tir), net.anchors_arr, net.cfg)


def _stage_targets(
    anchors_arr: np.ndarray, gts_per_item: list[list[D.GroundTruth]], labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Encoded offsets (zero off-positives) and the positive mask, per batch item."""
    n, m = labels.shape
    targets = np.zeros((n, m, 4))
    pos_mask = labels >= 0
    for i in range(n):
        idx = np.nonzero(pos_mask[i])[0]
        if idx.size == 0:
            continue
        gt_boxes = np.array([gts_per_item[i][g].box.as_array() for g in labels[i, idx]])
        targets[i, idx] = D.encode_boxes(gt_boxes, anchors_arr[idx])
    return targets, pos_mask


def compute_losses(
    net: BAANet,
    rgb: Tensor,
    tir: Tensor,
    gts_per_item: list[list[D.GroundTruth]],
    illum_labels: list[str],
) -> dict[str, Tensor]:
    """All five objective terms plus their weighted total for one batch.

    Stage-1 anchors match the raw grid at the loose thresholds; stage-2
    re-matches the stage-1-refined boxes at the strict thresholds, and its
    regression target is the residual left after the (detached) stage-1
    offsets.
    """
    outputs = model_forward(net, rgb, tir)
    n = rgb.dims[0]
    anchors_arr = net.anchors_arr

    labels1 = np.stack([D.match_anchors(anchors_arr, gts_per_item[i], net.cfg.stage1_iou) for i in range(n)])
    targets1, pos1 = _stage_targets(anchors_arr, gts_per_item, labels1)

    c1 = T.sigmoid(outputs.c1_logits)
    l_cls1 = L.focal_loss(c1, labels1, net.loss_cfg)
    l_reg1 = L.smooth_l1(outputs.b1, targets1, pos1)

    b1_detached = outputs.b1.array
    refined = D.decode_boxes(anchors_arr[None], b1_detached)
    labels2 = np.stack([D.match_anchors(refined[i], gts_per_item[i], net.cfg.stage2_iou) for i in range(n)])
    # residual targets: offsets still owed w.r.t. the original anchors
    targets2_full, pos2 = _stage_targets(anchors_arr, gts_per_item, labels2)
    targets2 = np.where(pos2[..., None], targets2_full - b1_detached, 0.0)

    w_r, w_t = outputs.mix_weights()
    c2 = T.add(T.scale(T.sigmoid(outputs.cr_logits), w_r), T.scale(T.sigmoid(outputs.ct_logits), w_t))
    l_cls2 = L.focal_loss(c2, labels2, net.loss_cfg)
    l_reg2 = L.smooth_l1(outputs.b2, targets2, pos2)

    l_illum = None
    if net.mode == "baa_gate":
        l_illum = IL.illum_loss_batch(outputs.w_d, outputs.w_n, illum_labels)

    total = L.total_loss(l_illum, l_cls1, l_cls2, l_reg1, l_reg2, net.loss_cfg)
    return {
        "illumination": l_illum,
        "cls_stage1": l_cls1,
        "cls_stage2": l_cls2,
        "reg_stage1": l_reg1,
        "reg_stage2": l_reg2,
        "total": total,
    }


def frozen_loss_fn(
    net: BAANet,
    rgb: Tensor,
    tir: Tensor,
    gts_per_item: list[list[D.GroundTruth]],
    illum_labels: list[str],
):
    """Total-loss closure with every stop-gradient input pinned at its base value.

    The live objective deliberately treats three things as constants: the
    per-pair modality weights, the stage-2 anchor labels (a discrete function
    of the stage-1 boxes), and the stage-2 residual targets. A central
    difference that let those move would measure a derivative the analytic
    gradient rightly excludes, so this closure snapshots them from one base
    pass and reuses them on every evaluation. At the base point its value and
    gradient equal the live objective's.
    """
    base = model_forward(net, rgb, tir)
    n = rgb.dims[0]
    anchors_arr = net.anchors_arr
    frozen_weights = base.weights
    mix_r, mix_t = base.mix_weights()

    labels1 = np.stack([D.match_anchors(anchors_arr, gts_per_item[i], net.cfg.stage1_iou) for i in range(n)])
    targets1, pos1 = _stage_targets(anchors_arr, gts_per_item, labels1)

    b1_base = base.b1.array.copy()
    refined = D.decode_boxes(anchors_arr[None], b1_base)
    labels2 = np.stack([D.match_anchors(refined[i], gts_per_item[i], net.cfg.stage2_iou) for i in range(n)])
    targets2_full, pos2 = _stage_targets(anchors_arr, gts_per_item, labels2)
    targets2 = np.where(pos2[..., None], targets2_full - b1_base, 0.0)

    def loss_fn() -> Tensor:
        out = model_forward(net, rgb, tir, weights_override=frozen_weights)
        l_cls1 = L.focal_loss(T.sigmoid(out.c1_logits), labels1, net.loss_cfg)
        l_reg1 = L.smooth_l1(out.b1, targets1, pos1)
        c2 = T.add(T.scale(T.sigmoid(out.cr_logits), mix_r), T.scale(T.sigmoid(out.ct_logits), mix_t))
        l_cls2 = L.focal_loss(c2, labels2, net.loss_cfg)
        l_reg2 = L.smooth_l1(out.b2, targets2, pos2)
        l_illum = IL.illum_loss_batch(out.w_d, out.w_n, illum_labels) if net.mode == "baa_gate" else None
        return L.total_loss(l_illum, l_cls1, l_cls2, l_reg1, l_reg2, net.loss_cfg)

    return loss_fn
