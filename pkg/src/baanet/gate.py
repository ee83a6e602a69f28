"""Bi-directional adaptive attention gate between an RGB and a thermal feature map.

One gate runs two mirrored processes over same-shaped inputs ``r_in`` and
``t_in`` ([N, C, H, W]):

* channel distilling -- a squeeze-style attention vector pooled from the
  concatenated pair drives two sigmoid channel gates, one per direction, that
  suppress uninformative channels of each modality before any mixing;
* recalibration -- each modality is additively corrected by the other's
  distilled features, scaled by that modality's confidence weight;
* spatial aggregation -- 1x1 convolutions over the concatenated recalibrated
  pair produce per-pixel sigmoid gates that reweight the cross-modality
  contribution position by position.

The confidence weights ``w_r`` and ``w_t`` (scalars, or one value per batch
item) are consumed as constants: no gradient flows into their producer. With
both weights zero the gate degenerates to the exact identity on both streams.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["GateParams", "GateOutput", "channel_distill", "recalibrate", "spatial_aggregate", "gate_forward"]


@dataclasses.dataclass
class GateParams:
    """Learnable state of one gate: shared-reduction MLP, two gate heads, two 1x1 convs.

    The shared reduction maps the pooled 2C-vector to ``max(1, 2C // reduction)``
    hidden units (relu); each head expands back to C (sigmoid) for its own
    direction. The spatial convolutions map the 2C concatenated recalibrated
    features to a single-channel gate plane each.
    """

    channels: int
    reduction: int
    mlp_shared_w1: Tensor
    mlp_shared_b1: Tensor
    mlp_head_t_w2: Tensor
    mlp_head_t_b2: Tensor
    mlp_head_r_w2: Tensor
    mlp_head_r_b2: Tensor
    spatial_conv_t_w: Tensor
    spatial_conv_t_b: Tensor
    spatial_conv_r_w: Tensor
    spatial_conv_r_b: Tensor

    @staticmethod
    def hidden_width(channels: int, reduction: int) -> int:
        return max(1, (2 * channels) // reduction)

    @classmethod
    def create(
        cls,
        store: T.ParameterStore,
        prefix: str,
        channels: int,
        reduction: int = 4,
        rng: np.random.Generator | None = None,
    ) -> "GateParams":
        """Register one gate's parameters (Xavier for weights, zero biases)."""
        if channels < 1 or reduction < 1:
            raise ValueError(f"channels and reduction must be positive, got ({channels}, {reduction})")
        rng = rng if rng is not None else np.random.default_rng(0)
        c2 = 2 * channels
        hidden = cls.hidden_width(channels, reduction)

        def fc(name, dout, din):
            w = store.add(f"{prefix}.{name}.w", T.xavier_uniform(rng, din, dout, (dout, din)))
            b = store.add(f"{prefix}.{name}.b", np.zeros(dout))
            return w, b

        w1, b1 = fc("mlp.shared", hidden, c2)
        wt, bt = fc("mlp.head_t", channels, hidden)
        wr, br = fc("mlp.head_r", channels, hidden)
        sw_t = store.add(f"{prefix}.spatial_t.w", T.xavier_uniform(rng, c2, 1, (1, c2, 1, 1)))
        sb_t = store.add(f"{prefix}.spatial_t.b", np.zeros(1))
        sw_r = store.add(f"{prefix}.spatial_r.w", T.xavier_uniform(rng, c2, 1, (1, c2, 1, 1)))
        sb_r = store.add(f"{prefix}.spatial_r.b", np.zeros(1))
        return cls(channels, reduction, w1, b1, wt, bt, wr, br, sw_t, sb_t, sw_r, sb_r)


@dataclasses.dataclass
class GateOutput:
    """Gate results plus every intermediate needed for diagnostics and tests.

    The channel-distill fields are None when :func:`spatial_aggregate` is run
    standalone on externally recalibrated features.
    """

    r_out: Tensor
    t_out: Tensor
    w_ts: Tensor
    w_rs: Tensor
    r_rec: Tensor
    t_rec: Tensor
    w_tc: Tensor | None = None
    w_rc: Tensor | None = None
    t_dis: Tensor | None = None
    r_dis: Tensor | None = None


def _check_pair(r_in: Tensor, t_in: Tensor, params: GateParams) -> None:
    if r_in.dims != t_in.dims:
        raise T.ShapeError(f"gate: modality dims differ: rgb {r_in.dims} vs tir {t_in.dims}")
    if len(r_in.dims) != 4:
        raise T.ShapeError(f"gate: inputs must be [N, C, H, W], got {r_in.dims}")
    if r_in.dims[1] != params.channels:
        raise T.ShapeError(f"gate: input channels ({r_in.dims[1]}) != gate channels ({params.channels})")


def channel_distill(
    r_in: Tensor, t_in: Tensor, params: GateParams
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Compute both channel gates from one shared pooled descriptor and apply them.

    Pools the concatenated pair to a 2C attention vector, pushes it through the
    shared reduction and the two per-direction heads, and multiplies each
    modality channel-wise by its sigmoid gate. Both gates read the same
    pre-update inputs, so the two directions are order-independent.

    Returns ``(t_dis, r_dis, w_tc, w_rc)``.
    """
    _check_pair(r_in, t_in, params)
    n, c = r_in.dims[0], params.channels
    v_c = T.global_avg_pool(T.concat_channels(r_in, t_in))
    v_flat = T.reshape(v_c, (n, 2 * c))
    hidden = T.relu(T.fully_connected(v_flat, params.mlp_shared_w1, params.mlp_shared_b1))
    w_tc = T.sigmoid(T.fully_connected(hidden, params.mlp_head_t_w2, params.mlp_head_t_b2))
    w_rc = T.sigmoid(T.fully_connected(hidden, params.mlp_head_r_w2, params.mlp_head_r_b2))
    w_tc = T.reshape(w_tc, (n, c, 1, 1))
    w_rc = T.reshape(w_rc, (n, c, 1, 1))
    t_dis = T.mul_channelwise(w_tc, t_in)
    r_dis = T.mul_channelwise(w_rc, r_in)
    return t_dis, r_dis, w_tc, w_rc


def recalibrate(
    r_in: Tensor, t_in: Tensor, t_dis: Tensor, r_dis: Tensor, w_r, w_t
) -> tuple[Tensor, Tensor]:
    """Additively correct each modality by the other's distilled features.

    ``r_rec = r_in + w_t * t_dis`` and ``t_rec = t_in + w_r * r_dis``: each
    direction is scaled by the confidence of the modality being injected.
    """
    r_rec = T.add(r_in, T.scale(t_dis, w_t))
    t_rec = T.add(t_in, T.scale(r_dis, w_r))
    return r_rec, t_rec


def spatial_aggregate(
    r_rec: Tensor,
    t_rec: Tensor,
    params: GateParams,
    w_r,
    w_t,
    t_dis: Tensor | None = None,
    r_dis: Tensor | None = None,
    w_tc: Tensor | None = None,
    w_rc: Tensor | None = None,
) -> GateOutput:
    """Per-pixel cross-modality aggregation over the recalibrated pair.

    Each direction gets its own 1x1 convolution over ``r_rec (+) t_rec``,
    squashed by a sigmoid into a bounded soft mask:
    ``r_out = r_rec + w_t * (w_ts (*) t_rec)`` and mirrored for ``t_out``.
    The optional distill intermediates are just carried into the output record.
    """
    cat = T.concat_channels(r_rec, t_rec)
    w_ts = T.sigmoid(T.conv2d(cat, params.spatial_conv_t_w, params.spatial_conv_t_b))
    w_rs = T.sigmoid(T.conv2d(cat, params.spatial_conv_r_w, params.spatial_conv_r_b))
    r_out = T.add(r_rec, T.scale(T.mul_spatialwise(w_ts, t_rec), w_t))
    t_out = T.add(t_rec, T.scale(T.mul_spatialwise(w_rs, r_rec), w_r))
    return GateOutput(r_out, t_out, w_ts, w_rs, r_rec, t_rec, w_tc, w_rc, t_dis, r_dis)


def gate_forward(r_in: Tensor, t_in: Tensor, params: GateParams, w_r, w_t) -> GateOutput:
    """Full gate: channel distilling, recalibration, then spatial aggregation."""
    t_dis, r_dis, w_tc, w_rc = channel_distill(r_in, t_in, params)
    r_rec, t_rec = recalibrate(r_in, t_in, t_dis, r_dis, w_r, w_t)
    return spatial_aggregate(r_rec, t_rec, params, w_r, w_t, t_dis, r_dis, w_tc, w_rc)
