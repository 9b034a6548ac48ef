import math

import numpy as np
import pytest
import torch

from gravitynet.anchors import HookingAssignment
from gravitynet.errors import InvalidInputError
from gravitynet.losses import (
    LossConfig,
    channel_classification_loss,
    classification_loss,
    gravity_loss,
    regression_loss,
    smooth_l1,
)


def assignment(labels, targets):
    labels = np.asarray(labels, dtype=bool)
    matched = np.where(labels, 0, -1)
    return HookingAssignment(labels, matched, np.asarray(targets, dtype=np.float64))


class TestSmoothL1:
    def test_zero(self):
        assert float(smooth_l1(0.0)) == 0.0

    def test_breakpoint(self):
        assert float(smooth_l1(1.0)) == pytest.approx(0.5, abs=1e-12)
        assert float(smooth_l1(-1.0)) == pytest.approx(0.5, abs=1e-12)

    def test_linear_branch(self):
        assert float(smooth_l1(2.0)) == pytest.approx(1.5, abs=1e-12)

    def test_continuity_at_breakpoint(self):
        eps = 1e-8
        below = float(smooth_l1(1.0 - eps))
        above = float(smooth_l1(1.0 + eps))
        assert abs(below - above) < 1e-7

    def test_even_and_nonnegative(self):
        ts = torch.linspace(-5, 5, 101, dtype=torch.float64)
        vals = smooth_l1(ts)
        assert torch.all(vals >= 0)
        assert torch.allclose(vals, smooth_l1(-ts))


class TestClassificationLoss:
    def test_collapses_to_weighted_cross_entropy(self):
        config = LossConfig(alpha=0.5, phi=0.0)
        loss = classification_loss(
            torch.tensor([0.5], dtype=torch.float64), torch.tensor([True]), config
        )
        assert float(loss) == pytest.approx(0.5 * math.log(2.0), abs=1e-12)

    def test_perfect_prediction_is_near_zero(self):
        loss = classification_loss(
            torch.tensor([1.0], dtype=torch.float64), torch.tensor([True]), LossConfig()
        )
        assert 0.0 <= float(loss) < 1e-12

    def test_hand_derived_focal_value(self):
        config = LossConfig(alpha=0.25, phi=2.0)
        loss = classification_loss(
            torch.tensor([0.9], dtype=torch.float64), torch.tensor([True]), config
        )
        expected = 0.25 * 0.1**2 * -math.log(0.9)
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_negative_uses_complement(self):
        config = LossConfig(alpha=0.25, phi=2.0)
        loss = classification_loss(
            torch.tensor([0.1], dtype=torch.float64), torch.tensor([False]), config
        )
        # p_t = 1 - 0.1, alpha_t = 0.75; normalization hits max(1, 0 positives) = 1
        expected = 0.75 * 0.1**2 * -math.log(0.9)
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_normalized_by_positive_count(self):
        config = LossConfig(alpha=0.25, phi=2.0)
        scores = torch.tensor([0.9, 0.9, 0.9], dtype=torch.float64)
        labels = torch.tensor([True, True, True])
        one = classification_loss(scores[:1], labels[:1], config)
        three = classification_loss(scores, labels, config)
        assert float(three) == pytest.approx(float(one), abs=1e-12)

    def test_focal_reduction_to_bce(self):
        # phi=0, alpha=0.5 must equal half the positives-normalized cross-entropy
        rng = np.random.default_rng(3)
        scores = torch.tensor(rng.uniform(0.05, 0.95, size=64))
        labels = torch.tensor(rng.random(64) < 0.2)
        config = LossConfig(alpha=0.5, phi=0.0)
        loss = classification_loss(scores, labels, config)
        p_t = torch.where(labels, scores, 1 - scores)
        bce = -torch.log(p_t).sum() / max(1, int(labels.sum()))
        assert float(loss) == pytest.approx(0.5 * float(bce), rel=1e-12)

    def test_monotone_in_positive_score(self):
        config = LossConfig()
        values = [
            float(classification_loss(torch.tensor([s]), torch.tensor([True]), config))
            for s in np.linspace(0.05, 0.95, 30)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            classification_loss(torch.tensor([0.5, 0.5]), torch.tensor([True]))


class TestChannelClassificationLoss:
    def test_matches_sum_of_per_channel_focal_terms(self):
        rng = np.random.default_rng(4)
        probs = torch.tensor(rng.uniform(0.05, 0.95, size=(32, 2)))
        labels = torch.tensor(rng.random(32) < 0.25)
        config = LossConfig(alpha=0.25, phi=2.0)
        loss = channel_classification_loss(probs, labels, config)
        total = 0.0
        for i in range(32):
            for channel, target in ((0, not labels[i]), (1, bool(labels[i]))):
                p = float(probs[i, channel])
                p_t = p if target else 1 - p
                a_t = 0.25 if target else 0.75
                total += -a_t * (1 - p_t) ** 2 * math.log(p_t)
        total /= max(1, int(labels.sum()))
        assert float(loss) == pytest.approx(total, rel=1e-9)

    def test_shape_validation(self):
        with pytest.raises(InvalidInputError):
            channel_classification_loss(torch.rand(4, 3), torch.zeros(4, dtype=torch.bool))


class TestRegressionLoss:
    def test_zero_when_offsets_match_targets(self):
        offsets = torch.tensor([[1.0, -2.0], [0.5, 3.0]])
        labels = torch.tensor([True, True])
        assert float(regression_loss(offsets, offsets.clone(), labels)) == 0.0

    def test_hand_derived_value(self):
        loss = regression_loss(
            torch.tensor([[0.0, 0.0]]), torch.tensor([[2.0, 0.0]]), torch.tensor([True])
        )
        assert float(loss) == pytest.approx(1.5, abs=1e-12)

    def test_zero_when_nothing_hooked(self):
        loss = regression_loss(
            torch.tensor([[5.0, 5.0]]), torch.tensor([[0.0, 0.0]]), torch.tensor([False])
        )
        assert float(loss) == 0.0

    def test_non_hooked_offsets_do_not_matter(self):
        labels = torch.tensor([True, False])
        targets = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        a = regression_loss(torch.tensor([[0.0, 0.0], [0.0, 0.0]]), targets, labels)
        b = regression_loss(torch.tensor([[0.0, 0.0], [99.0, -7.0]]), targets, labels)
        assert float(a) == float(b)

    def test_normalized_by_hooked_count(self):
        labels = torch.tensor([True, True])
        targets = torch.tensor([[2.0, 0.0], [2.0, 0.0]])
        loss = regression_loss(torch.zeros(2, 2), targets, labels)
        assert float(loss) == pytest.approx(1.5, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            regression_loss(torch.zeros(3, 2), torch.zeros(2, 2), torch.zeros(3, dtype=torch.bool))


class TestGravityLoss:
    def test_combination_arithmetic(self):
        rng = np.random.default_rng(5)
        scores = torch.tensor(rng.uniform(0.1, 0.9, size=20))
        offsets = torch.tensor(rng.normal(0, 2, size=(20, 2)))
        a = assignment(rng.random(20) < 0.3, rng.normal(0, 2, size=(20, 2)))
        total, cls, reg = gravity_loss(scores, offsets, a, LossConfig(lam=10.0))
        assert float(total) == pytest.approx(float(cls) + 10.0 * float(reg), rel=1e-12)

    def test_zero_lambda_reduces_to_classification(self):
        rng = np.random.default_rng(6)
        scores = torch.tensor(rng.uniform(0.1, 0.9, size=10))
        offsets = torch.tensor(rng.normal(0, 2, size=(10, 2)))
        a = assignment(rng.random(10) < 0.5, rng.normal(0, 2, size=(10, 2)))
        total, cls, _ = gravity_loss(scores, offsets, a, LossConfig(lam=0.0))
        assert float(total) == float(cls)

    def test_all_components_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = rng.integers(1, 50)
            scores = torch.tensor(rng.uniform(0.01, 0.99, size=n))
            offsets = torch.tensor(rng.normal(0, 3, size=(n, 2)))
            a = assignment(rng.random(n) < 0.4, rng.normal(0, 3, size=(n, 2)))
            total, cls, reg = gravity_loss(scores, offsets, a, LossConfig())
            assert float(total) >= 0 and float(cls) >= 0 and float(reg) >= 0

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            LossConfig(alpha=0.0)
        with pytest.raises(InvalidInputError):
            LossConfig(lam=-1.0)
        with pytest.raises(InvalidInputError):
            LossConfig(phi=-0.1)


def random_instance(rng):
    """Random small instance away from clamp bounds and smooth-L1 breakpoints."""
    n = int(rng.integers(1, 65))
    scores = rng.uniform(0.05, 0.95, size=n)
    labels = rng.random(n) < 0.4
    targets = rng.uniform(-3.0, 3.0, size=(n, 2))
    offsets = rng.uniform(-3.0, 3.0, size=(n, 2))
    residual = np.abs(np.abs(targets - offsets) - 1.0)
    offsets[residual < 1e-3] += 0.01
    return scores, labels, targets, offsets


def finite_difference(f, x, h=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * h)
    return grad


class TestGradients:
    def test_analytic_gradient_matches_central_differences(self):
        rng = np.random.default_rng(20240501)
        config = LossConfig(lam=10.0, alpha=0.25, phi=2.0)
        for _ in range(100):
            scores_np, labels, targets, offsets_np = random_instance(rng)
            a = assignment(labels, targets)

            scores = torch.tensor(scores_np, dtype=torch.float64, requires_grad=True)
            offsets = torch.tensor(offsets_np, dtype=torch.float64, requires_grad=True)
            total, _, _ = gravity_loss(scores, offsets, a, config)
            total.backward()

            def value():
                s = torch.tensor(scores_np, dtype=torch.float64)
                o = torch.tensor(offsets_np, dtype=torch.float64)
                return float(gravity_loss(s, o, a, config)[0])

            for analytic, numeric in (
                (scores.grad.numpy(), finite_difference(value, scores_np)),
                (offsets.grad.numpy(), finite_difference(value, offsets_np)),
            ):
                scale = np.maximum(np.abs(numeric), 1e-8)
                rel = np.abs(analytic - numeric) / scale
                mask = np.abs(numeric) > 1e-7
                assert rel[mask].max(initial=0.0) < 1e-4
