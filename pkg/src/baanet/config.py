"""Run configuration: one flat-key record binding every component's settings.

The canonical on-disk form is the ``key = value`` text format from
:mod:`baanet.fileio` with dotted keys (``run.epochs``, ``model.anchor_ratio``,
``illum.k1``, ...). Checkpoints embed this text so a trained model can be
rebuilt without the original command line.
"""

from __future__ import annotations

import dataclasses

from .detector import ModelConfig
from .evaluator import EvalConfig
from .fileio import FormatError, config_to_text, parse_config_text
from .illumination import IllumConfig
from .losses import LossConfig
from .model import FUSION_MODES

__all__ = ["RunConfig"]


@dataclasses.dataclass
class RunConfig:
    """Training recipe plus the component configs it drives."""

    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    fusion_mode: str = "baa_gate"
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    illum: IllumConfig = dataclasses.field(default_factory=IllumConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")

    # -- flat-key serialization ------------------------------------------------

    def to_flat(self) -> dict[str, str]:
        def seq(values):
            return ",".join(repr(float(v)) for v in values)

        m, il, lo, ev = self.model, self.illum, self.loss, self.eval
        return {
            "run.epochs": str(self.epochs),
            "run.batch_size": str(self.batch_size),
            "run.learning_rate": repr(self.learning_rate),
            "run.seed": str(self.seed),
            "run.fusion_mode": self.fusion_mode,
            "model.stage_channels": ",".join(str(c) for c in m.stage_channels),
            "model.anchor_heights": seq(m.anchor_heights),
            "model.anchor_ratio": repr(m.anchor_ratio),
            "model.stage1_iou": seq(m.stage1_iou),
            "model.stage2_iou": seq(m.stage2_iou),
            "model.nms_iou": repr(m.nms_iou),
            "model.score_floor": repr(m.score_floor),
            "model.gate_reduction": str(m.gate_reduction),
            "illum.k1": repr(il.k1),
            "illum.k2": repr(il.k2),
            "illum.resize_hw": str(il.resize_hw),
            "loss.alpha": repr(lo.alpha),
            "loss.gamma": repr(lo.gamma),
            "loss.weight_illum": repr(lo.weight_illum),
            "loss.weight_cls1": repr(lo.weight_cls1),
            "loss.weight_cls2": repr(lo.weight_cls2),
            "loss.weight_reg1": repr(lo.weight_reg1),
            "loss.weight_reg2": repr(lo.weight_reg2),
            "eval.iou_threshold": repr(ev.iou_threshold),
            "eval.fppi_range": seq(ev.fppi_range),
            "eval.n_points": str(ev.n_points),
            "eval.reasonable_min_height": repr(ev.reasonable_min_height),
            "eval.allowed_occlusion": ",".join(ev.allowed_occlusion),
        }

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "RunConfig":
        base = cls().to_flat()
        unknown = [k for k in flat if k not in base]
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        merged = {**base, **flat}

        def floats(key):
            return tuple(float(x) for x in merged[key].split(","))

        def ints(key):
            return tuple(int(x) for x in merged[key].split(","))

        f1, f2 = floats("model.stage1_iou"), floats("model.stage2_iou")
        return cls(
            epochs=int(merged["run.epochs"]),
            batch_size=int(merged["run.batch_size"]),
            learning_rate=float(merged["run.learning_rate"]),
            seed=int(merged["run.seed"]),
            fusion_mode=merged["run.fusion_mode"],
            model=ModelConfig(
                stage_channels=ints("model.stage_channels"),
                anchor_heights=floats("model.anchor_heights"),
                anchor_ratio=float(merged["model.anchor_ratio"]),
                stage1_iou=(f1[0], f1[1]),
                stage2_iou=(f2[0], f2[1]),
                nms_iou=float(merged["model.nms_iou"]),
                score_floor=float(merged["model.score_floor"]),
                gate_reduction=int(merged["model.gate_reduction"]),
            ),
            illum=IllumConfig(
                k1=float(merged["illum.k1"]),
                k2=float(merged["illum.k2"]),
                resize_hw=int(merged["illum.resize_hw"]),
            ),
            loss=LossConfig(
                alpha=float(merged["loss.alpha"]),
                gamma=float(merged["loss.gamma"]),
                weight_illum=float(merged["loss.weight_illum"]),
                weight_cls1=float(merged["loss.weight_cls1"]),
                weight_cls2=float(merged["loss.weight_cls2"]),
                weight_reg1=float(merged["loss.weight_reg1"]),
                weight_reg2=float(merged["loss.weight_reg2"]),
            ),
            eval=EvalConfig(
                iou_threshold=float(merged["eval.iou_threshold"]),
                fppi_range=(floats("eval.fppi_range")[0], floats("eval.fppi_range")[1]),
                n_points=int(merged["eval.n_points"]),
                reasonable_min_height=float(merged["eval.reasonable_min_height"]),
                allowed_occlusion=tuple(merged["eval.allowed_occlusion"].split(",")),
            ),
        )

    def to_text(self) -> str:
        return config_to_text(self.to_flat())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_flat(parse_config_text(text))
