"""Loss fixtures evaluated by hand, plus reduction and smoothness properties."""

import numpy as np
import numpy.testing as npt
import pytest

from baanet import losses as L
from baanet import tensor as T


def bce_reference(scores, labels, weight_pos, weight_neg):
    """Independent binary cross-entropy used to pin the gamma=0 reduction."""
    total, n_pos = 0.0, 0
    for c, lb in zip(scores, labels):
        if lb >= 0:
            total -= weight_pos * np.log(c)
            n_pos += 1
        elif lb == L.LABEL_NEGATIVE:
            total -= weight_neg * np.log(1.0 - c)
    return total / max(1, n_pos)


class TestFocalLoss:
    def test_perfect_positive_contributes_nothing(self):
        cfg = L.LossConfig()
        v = L.focal_loss(T.Tensor([1.0 - 1e-12]), np.array([0]), cfg).item()
        assert v < 1e-9

    def test_single_positive_at_half(self):
        # 0.25 * 0.5^2 * ln 2
        cfg = L.LossConfig(alpha=0.25, gamma=2.0)
        v = L.focal_loss(T.Tensor([0.5]), np.array([0]), cfg).item()
        assert abs(v - 0.043322) < 1e-6
        assert abs(v - 0.25 * 0.25 * np.log(2.0)) < 1e-15

    def test_single_negative_at_half(self):
        # 0.75 * 0.5^2 * ln 2
        cfg = L.LossConfig(alpha=0.25, gamma=2.0)
        v = L.focal_loss(T.Tensor([0.5]), np.array([L.LABEL_NEGATIVE]), cfg).item()
        assert abs(v - 0.129966) < 1e-6

    def test_gamma_zero_reduces_to_weighted_cross_entropy(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(0.05, 0.95, 13)
        labels = rng.integers(-2, 2, 13)
        cfg = L.LossConfig(alpha=0.5, gamma=0.0)
        got = L.focal_loss(T.Tensor(scores), labels, cfg).item()
        want = bce_reference(scores, labels, 0.5, 0.5)
        assert abs(got - want) < 1e-12

    def test_ignored_anchors_do_not_contribute(self):
        cfg = L.LossConfig()
        base = L.focal_loss(T.Tensor([0.3, 0.8]), np.array([0, L.LABEL_NEGATIVE]), cfg).item()
        padded = L.focal_loss(
            T.Tensor([0.3, 0.8, 0.999, 0.001]),
            np.array([0, L.LABEL_NEGATIVE, L.LABEL_IGNORE, L.LABEL_IGNORE]),
            cfg,
        ).item()
        assert abs(base - padded) < 1e-15

    def test_nonnegative_and_monotone(self):
        cfg = L.LossConfig()
        grid = np.linspace(0.01, 0.99, 99)
        pos_vals = [L.focal_loss(T.Tensor([c]), np.array([0]), cfg).item() for c in grid]
        neg_vals = [L.focal_loss(T.Tensor([c]), np.array([-1]), cfg).item() for c in grid]
        assert min(pos_vals + neg_vals) >= 0.0
        assert np.all(np.diff(pos_vals) < 0)  # strictly decreasing for positives
        assert np.all(np.diff(neg_vals) > 0)  # strictly increasing for negatives

    def test_normalized_by_positive_count(self):
        cfg = L.LossConfig()
        one = L.focal_loss(T.Tensor([0.5]), np.array([0]), cfg).item()
        three = L.focal_loss(T.Tensor([0.5, 0.5, 0.5]), np.array([0, 1, 2]), cfg).item()
        assert abs(one - three) < 1e-15

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_gradient_matches_finite_differences(self, gamma):
        rng = np.random.default_rng(1)
        cfg = L.LossConfig(alpha=0.25, gamma=gamma)
        logits = T.Tensor(rng.uniform(-2, 2, 11), requires_grad=True)
        labels = rng.integers(-2, 3, 11)

        def loss_fn():
            return L.focal_loss(T.sigmoid(logits), labels, cfg)

        report = T.grad_check(loss_fn, {"logits": logits}, tolerance=1e-4)
        assert report.passed, "\n".join(report.format_lines())


class TestSmoothL1:
    def _single(self, x):
        pred = T.Tensor(np.array([[x, 0.0, 0.0, 0.0]]))
        return L.smooth_l1(pred, np.zeros((1, 4)), np.array([True])).item()

    def test_exact_match_is_zero(self):
        assert self._single(0.0) == 0.0

    def test_quadratic_zone(self):
        assert abs(self._single(0.5) - 0.125) < 1e-15

    def test_linear_zone(self):
        assert abs(self._single(2.0) - 1.5) < 1e-15

    def test_continuous_value_and_slope_at_kink(self):
        eps = 1e-9
        below, above = self._single(1.0 - eps), self._single(1.0 + eps)
        assert abs(below - above) < 1e-8
        slope_below = (self._single(1.0 - eps) - self._single(1.0 - 2 * eps)) / eps
        slope_above = (self._single(1.0 + 2 * eps) - self._single(1.0 + eps)) / eps
        assert abs(slope_below - 1.0) < 1e-5 and abs(slope_above - 1.0) < 1e-5

    def test_only_positive_anchors_contribute(self):
        rng = np.random.default_rng(2)
        pred = T.Tensor(rng.uniform(-2, 2, (5, 4)))
        target = rng.uniform(-2, 2, (5, 4))
        mask = np.array([True, False, True, False, False])
        dense = L.smooth_l1(pred, target, mask).item()
        sub = L.smooth_l1(
            T.Tensor(pred.array[mask]), target[mask], np.array([True, True])
        ).item()
        assert abs(dense - sub) < 1e-15

    def test_gradient(self):
        rng = np.random.default_rng(3)
        pred = T.Tensor(rng.uniform(-2, 2, (6, 4)), requires_grad=True)
        target = rng.uniform(-2, 2, (6, 4))
        mask = rng.uniform(size=6) < 0.5

        def loss_fn():
            return L.smooth_l1(pred, target, mask)

        report = T.grad_check(loss_fn, {"pred": pred}, tolerance=1e-4)
        assert report.passed, "\n".join(report.format_lines())


class TestTotalLoss:
    def test_all_zero(self):
        z = lambda: T.Tensor([0.0])
        assert L.total_loss(z(), z(), z(), z(), z(), L.LossConfig()).item() == 0.0

    def test_plain_summation(self):
        vals = [0.1, 0.2, 0.3, 0.4, 0.5]
        terms = [T.Tensor([v]) for v in vals]
        got = L.total_loss(*terms, L.LossConfig()).item()
        assert abs(got - 1.5) < 1e-15

    def test_none_illumination_term_allowed(self):
        t = lambda v: T.Tensor([v])
        got = L.total_loss(None, t(1.0), t(2.0), t(3.0), t(4.0), L.LossConfig()).item()
        assert got == 10.0

    def test_nonfinite_term_named(self):
        t = lambda v: T.Tensor([v])
        bad = T.custom_op(np.array([np.nan]), (), lambda g: None, "nan")
        with pytest.raises(T.NumericError, match="cls_stage2"):
            L.total_loss(t(0.0), t(0.0), bad, t(0.0), t(0.0), L.LossConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            L.LossConfig(alpha=0.0)
        with pytest.raises(ValueError):
            L.LossConfig(gamma=-1.0)
