"""Illumination sub-network and the day/night-driven modality weighting.

A small two-branch conv net looks at heavily downscaled RGB and thermal images
and predicts the probability that the scene was captured in daytime versus
nighttime. Those probabilities feed a two-slope squashing function that turns
them into the per-pair modality confidences ``(w_r, w_t)``: when night wins,
the RGB weight drops sharply (steep slope ``k2``), while when day wins the
thermal weight stays substantial (gentle slope ``k1``), because thermal
features remain useful around the clock.

The classifier trains only through its own cross-entropy loss; the modality
weights are consumed downstream as constants per image pair.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "IllumConfig",
    "IlluminationWeights",
    "IllumNetParams",
    "resize_bilinear",
    "illum_forward",
    "modified_sigmoid",
    "weights_from_probs",
    "illum_loss",
    "illum_loss_batch",
]

LABELS = ("day", "night")
PROB_FLOOR = 1e-12  # clamp probabilities before any logarithm


@dataclasses.dataclass
class IllumConfig:
    """Steepness of the two weighting branches and the classifier input side."""

    k1: float = 0.5
    k2: float = 3.0
    resize_hw: int = 56

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError(f"k1 and k2 must be positive, got ({self.k1}, {self.k2})")
        if self.resize_hw < 8:
            raise ValueError(f"resize_hw must be >= 8, got {self.resize_hw}")


@dataclasses.dataclass(frozen=True)
class IlluminationWeights:
    """Day/night probabilities and the derived modality confidences for one pair."""

    w_d: float
    w_n: float
    w_r: float
    w_t: float


@dataclasses.dataclass
class IllumNetParams:
    """Two conv layers per modality, then two fully connected layers into a softmax.

    Channel widths are 8 and 16; each conv is 3x3 followed by relu and a 2x2
    mean-pool, so a ``resize_hw`` input shrinks by 4x before the head.
    """

    cfg: IllumConfig
    rgb_c1_w: Tensor
    rgb_c1_b: Tensor
    rgb_c2_w: Tensor
    rgb_c2_b: Tensor
    tir_c1_w: Tensor
    tir_c1_b: Tensor
    tir_c2_w: Tensor
    tir_c2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @staticmethod
    def head_input_width(cfg: IllumConfig) -> int:
        side = cfg.resize_hw // 4
        return 2 * 16 * side * side

    @classmethod
    def create(
        cls, store: T.ParameterStore, cfg: IllumConfig, rng: np.random.Generator | None = None, prefix: str = "illum"
    ) -> "IllumNetParams":
        if cfg.resize_hw % 4 != 0:
            raise ValueError(f"resize_hw must be divisible by 4 (two pooling stages), got {cfg.resize_hw}")
        rng = rng if rng is not None else np.random.default_rng(0)

        def conv(name, cout, cin, k=3):
            fan_in, fan_out = cin * k * k, cout * k * k
            w = store.add(f"{prefix}.{name}.w", T.xavier_uniform(rng, fan_in, fan_out, (cout, cin, k, k)))
            b = store.add(f"{prefix}.{name}.b", np.zeros(cout))
            return w, b

        rc1 = conv("rgb.c1", 8, 3)
        rc2 = conv("rgb.c2", 16, 8)
        tc1 = conv("tir.c1", 8, 1)
        tc2 = conv("tir.c2", 16, 8)
        din = cls.head_input_width(cfg)
        fc1_w = store.add(f"{prefix}.fc1.w", T.xavier_uniform(rng, din, 32, (32, din)))
        fc1_b = store.add(f"{prefix}.fc1.b", np.zeros(32))
        fc2_w = store.add(f"{prefix}.fc2.w", T.xavier_uniform(rng, 32, 2, (2, 32)))
        fc2_b = store.add(f"{prefix}.fc2.b", np.zeros(2))
        return cls(cfg, *rc1, *rc2, *tc1, *tc2, fc1_w, fc1_b, fc2_w, fc2_b)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned sample positions: 0 and n_in-1 map to the output corners
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: Tensor, side: int) -> Tensor:
    """Separable corner-aligned bilinear resize of [N, C, H, W] to [N, C, side, side].

    Resizing to the input size is the exact identity. Differentiable (the map
    is linear); the backward pass scatter-adds the interpolation weights.
    """
    if side < 1:
        raise T.ShapeError(f"resize_bilinear: target side must be >= 1, got {side}")
    if len(img.dims) != 4:
        raise T.ShapeError(f"resize_bilinear: input must be [N, C, H, W], got {img.dims}")
    n, c, h, w = img.dims
    if h < 2 or w < 2:
        raise T.ShapeError(f"resize_bilinear: input spatial dims must be >= 2, got ({h}, {w})")

    ylo, yhi, fy = _axis_weights(h, side)
    xlo, xhi, fx = _axis_weights(w, side)
    a = img.array
    rows_lo = a[:, :, ylo, :] * (1 - fy)[None, None, :, None] + a[:, :, yhi, :] * fy[None, None, :, None]
    out = rows_lo[:, :, :, xlo] * (1 - fx)[None, None, None, :] + rows_lo[:, :, :, xhi] * fx[None, None, None, :]

    def backward(g: np.ndarray) -> None:
        g_rows = np.zeros((n, c, side, w))
        np.add.at(g_rows, (slice(None), slice(None), slice(None), xlo), g * (1 - fx)[None, None, None, :])
        np.add.at(g_rows, (slice(None), slice(None), slice(None), xhi), g * fx[None, None, None, :])
        gx = np.zeros((n, c, h, w))
        np.add.at(gx, (slice(None), slice(None), ylo, slice(None)), g_rows * (1 - fy)[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), yhi, slice(None)), g_rows * fy[None, None, :, None])
        T.accumulate_grad(img, gx)

    return T.custom_op(out, (img,), backward, "resize_bilinear")


def illum_forward(rgb: Tensor, tir: Tensor, params: IllumNetParams, cfg: IllumConfig) -> tuple[Tensor, Tensor]:
    """Predict per-pair day/night probabilities from a full-resolution pair.

    Returns rank-1 tensors ``(w_d, w_n)`` of length N; the two always sum to 1
    because they are the rows of a softmax over two logits.
    """
    n = rgb.dims[0]
    side = cfg.resize_hw

    def branch(x, c1w, c1b, c2w, c2b):
        y = resize_bilinear(x, side)
        y = T.avg_pool2x2(T.relu(T.conv2d(y, c1w, c1b, stride=1, pad=1)))
        y = T.avg_pool2x2(T.relu(T.conv2d(y, c2w, c2b, stride=1, pad=1)))
        return y

    r = branch(rgb, params.rgb_c1_w, params.rgb_c1_b, params.rgb_c2_w, params.rgb_c2_b)
    t = branch(tir, params.tir_c1_w, params.tir_c1_b, params.tir_c2_w, params.tir_c2_b)
    cat = T.concat_channels(r, t)
    flat = T.reshape(cat, (n, IllumNetParams.head_input_width(cfg)))
    hidden = T.relu(T.fully_connected(flat, params.fc1_w, params.fc1_b))
    probs = T.softmax_lastdim(T.fully_connected(hidden, params.fc2_w, params.fc2_b))
    return T.take_column(probs, 0), T.take_column(probs, 1)


def modified_sigmoid(w_d: float, w_n: float, cfg: IllumConfig) -> tuple[float, float]:
    """Turn day/night probabilities into modality weights with two slopes.

    ``w_r = sigmoid(k1 * (w_d - w_n))`` on the day side and
    ``sigmoid(k2 * (w_d - w_n))`` on the night side; both branches meet at 0.5
    when the probabilities tie. ``w_t`` is exactly ``1 - w_r``. Not
    differentiated: consumers treat the result as a constant per pair.
    """
    d = float(w_d) - float(w_n)
    k = cfg.k1 if d > 0 else cfg.k2
    w_r = 1.0 / (1.0 + np.exp(-k * d))
    return float(w_r), float(1.0 - w_r)


def weights_from_probs(w_d: np.ndarray, w_n: np.ndarray, cfg: IllumConfig) -> list[IlluminationWeights]:
    """Per-pair weight records from probability vectors (detached values)."""
    out = []
    for d, n in zip(np.atleast_1d(w_d), np.atleast_1d(w_n)):
        w_r, w_t = modified_sigmoid(float(d), float(n), cfg)
        out.append(IlluminationWeights(float(d), float(n), w_r, w_t))
    return out


def illum_loss(w_d, w_n, label: str) -> Tensor:
    """Cross-entropy of the day/night prediction against a one-hot label.

    Accepts floats or rank-1 single-element graph tensors; probabilities are
    clamped at 1e-12 before the logarithm. Returns a scalar tensor (a plain
    constant when the inputs are floats).
    """
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")
    w_d = w_d if isinstance(w_d, Tensor) else T.Tensor([float(w_d)])
    w_n = w_n if isinstance(w_n, Tensor) else T.Tensor([float(w_n)])
    picked = w_d if label == "day" else w_n
    return T.scale(T.log(T.clamp_min(picked, PROB_FLOOR)), -1.0)


def illum_loss_batch(w_d: Tensor, w_n: Tensor, labels: list[str]) -> Tensor:
    """Mean per-pair cross-entropy over a batch, differentiable through softmax."""
    n = w_d.dims[0]
    if len(labels) != n:
        raise T.ShapeError(f"illum_loss_batch: {len(labels)} labels for batch of {n}")
    onehot_day = np.array([1.0 if lb == "day" else 0.0 for lb in labels])
    for lb in labels:
        if lb not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {lb!r}")
    log_d = T.log(T.clamp_min(w_d, PROB_FLOOR))
    log_n = T.log(T.clamp_min(w_n, PROB_FLOOR))
    picked = T.add(T.scale(log_d, onehot_day), T.scale(log_n, 1.0 - onehot_day))
    return T.scale(T.mean_all(picked), -1.0)
