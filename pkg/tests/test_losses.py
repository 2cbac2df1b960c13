import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax as scipy_softmax

from distill_story.distillation import (
    batch_order,
    binary_distillation_loss,
    caption_distillation_loss,
    caption_loss,
    classification_loss,
    combined_loss,
    dice_loss,
    distillation_loss,
    sgd_step,
    temperature_softmax,
    zero_grads,
)
from distill_story.errors import DomainError, ShapeError, TrainingDivergence
from distill_story.synthetic import PAD_ID

finite_logits = st.lists(st.floats(-30, 30), min_size=2, max_size=6)


class TestTemperatureSoftmax:
    def test_unit_temperature_is_plain_softmax(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.normal(0, 5, size=rng.integers(2, 8))
            np.testing.assert_allclose(
                temperature_softmax(z, 1.0), scipy_softmax(z), atol=1e-12
            )

    def test_two_logit_golden_at_t2(self):
        out = temperature_softmax(np.array([2.0, 0.0]), 2.0)
        np.testing.assert_allclose(out, [0.73105857863, 0.26894142137], atol=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            z = rng.normal(0, 3, size=5)
            t = rng.uniform(0.2, 10)
            c = rng.uniform(-100, 100)
            np.testing.assert_allclose(
                temperature_softmax(z + c, t), temperature_softmax(z, t), atol=1e-12
            )

    def test_argmax_is_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            z = rng.normal(0, 4, size=rng.integers(2, 9))
            t = rng.uniform(0.1, 50)
            assert int(np.argmax(temperature_softmax(z, t))) == int(np.argmax(z))

    def test_high_temperature_approaches_uniform(self):
        z = np.array([3.0, -1.0, 0.5, 2.0])
        p = temperature_softmax(z, 1e4)
        assert np.abs(p - 0.25).max() <= 1e-3

    def test_softening_lowers_the_peak(self):
        z = np.array([4.0, 0.0, -2.0])
        assert temperature_softmax(z, 4.0).max() < temperature_softmax(z, 1.0).max()
        assert temperature_softmax(z, 0.25).max() > temperature_softmax(z, 1.0).max()

    def test_batched_last_axis(self):
        z = np.random.default_rng(3).normal(size=(4, 5, 3))
        p = temperature_softmax(z, 2.0)
        assert p.shape == z.shape
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("bad_t", [0.0, -1.0, float("nan"), float("inf")])
    def test_invalid_temperature_rejected(self, bad_t):
        with pytest.raises(DomainError):
            temperature_softmax(np.array([1.0, 2.0]), bad_t)

    def test_nonfinite_logits_rejected(self):
        with pytest.raises(DomainError):
            temperature_softmax(np.array([1.0, float("inf")]), 1.0)

    def test_extreme_logits_stay_finite(self):
        p = temperature_softmax(np.array([1000.0, 0.0, -1000.0]), 1.0)
        assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12

    @given(finite_logits, st.floats(0.05, 100))
    @settings(max_examples=80)
    def test_output_is_a_distribution(self, z, t):
        p = temperature_softmax(np.array(z), t)
        assert (p >= 0).all()
        assert abs(p.sum() - 1.0) <= 1e-9


class TestDistillationLoss:
    def test_frozen_two_class_value(self):
        loss = distillation_loss(np.array([math.log(2.0), 0.0]), np.array([0.0, 0.0]), 1.0)
        assert abs(float(loss) - 0.056633) <= 1e-5
        # independent route: direct KL((2/3,1/3) || (1/2,1/2))
        expected = (2 / 3) * math.log((2 / 3) / 0.5) + (1 / 3) * math.log((1 / 3) / 0.5)
        assert abs(float(loss) - expected) <= 1e-12

    def test_zero_when_logits_match(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            z = rng.normal(0, 5, size=(3, 4))
            t = rng.uniform(0.2, 10)
            assert float(distillation_loss(z, z.copy(), t)) <= 1e-9

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            a = rng.normal(0, 5, size=6)
            b = rng.normal(0, 5, size=6)
            assert float(distillation_loss(a, b, rng.uniform(0.2, 10))) >= -1e-12

    def test_shift_invariance_of_both_sides(self):
        a = np.array([1.0, 2.0, -1.0])
        b = np.array([0.5, 0.0, 0.3])
        base = float(distillation_loss(a, b, 3.0))
        assert abs(float(distillation_loss(a + 7, b - 2, 3.0)) - base) <= 1e-12

    def test_temperature_squared_scaling_matches_numpy_route(self):
        rng = np.random.default_rng(6)
        for t in (1.0, 2.0, 4.0, 8.0):
            a = rng.normal(0, 3, size=(2, 5))
            b = rng.normal(0, 3, size=(2, 5))
            p = temperature_softmax(a, t)
            q = temperature_softmax(b, t)
            manual = t * t * np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=-1))
            assert abs(float(distillation_loss(a, b, t)) - manual) <= 1e-9

    def test_asymmetric(self):
        a = np.array([2.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0])
        assert float(distillation_loss(a, b, 1.0)) != pytest.approx(
            float(distillation_loss(b, a, 1.0)), abs=1e-6
        )

    def test_means_over_leading_dims(self):
        a = np.array([[2.0, 0.0], [2.0, 0.0]])
        b = np.array([[0.0, 0.0], [0.0, 0.0]])
        single = float(distillation_loss(a[0], b[0], 2.0))
        assert float(distillation_loss(a, b, 2.0)) == pytest.approx(single, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            distillation_loss(np.zeros(3), np.zeros(4), 1.0)

    @pytest.mark.parametrize("bad_t", [0.0, -2.0, float("nan")])
    def test_invalid_temperature_rejected(self, bad_t):
        with pytest.raises(DomainError):
            distillation_loss(np.zeros(2), np.zeros(2), bad_t)


class TestBinaryDistillationLoss:
    def test_matches_two_class_categorical_route(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
            t_log = rng.normal(0, 4, size=shape)
            s_log = rng.normal(0, 4, size=shape)
            temp = rng.uniform(0.3, 8)
            stacked_t = np.stack([t_log, np.zeros_like(t_log)], axis=-1)
            stacked_s = np.stack([s_log, np.zeros_like(s_log)], axis=-1)
            a = float(binary_distillation_loss(t_log, s_log, temp))
            b = float(distillation_loss(stacked_t, stacked_s, temp))
            assert abs(a - b) <= 1e-9

    def test_zero_at_equality_and_nonnegative(self):
        rng = np.random.default_rng(8)
        z = rng.normal(0, 5, size=(4, 6))
        assert float(binary_distillation_loss(z, z.copy(), 3.0)) <= 1e-12
        for _ in range(100):
            a, b = rng.normal(0, 5, size=(2, 8))
            assert float(binary_distillation_loss(a, b, rng.uniform(0.2, 9))) >= -1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            binary_distillation_loss(np.zeros((2, 3)), np.zeros((3, 2)), 1.0)


class TestCaptionDistillationLoss:
    def test_pad_positions_are_ignored(self):
        rng = np.random.default_rng(9)
        t_log = torch.from_numpy(rng.normal(0, 3, size=(2, 4, 6)))
        s_log = torch.from_numpy(rng.normal(0, 3, size=(2, 4, 6)))
        targets = torch.tensor([[5, 4, PAD_ID, PAD_ID], [3, 2, 1, PAD_ID]])
        loss = caption_distillation_loss(t_log, s_log, targets, 2.0)
        keep = targets != PAD_ID
        manual = distillation_loss(t_log[keep], s_log[keep], 2.0)
        assert float(loss) == pytest.approx(float(manual), abs=1e-12)

    def test_all_pad_targets_warn_and_zero(self):
        t_log = torch.zeros(1, 3, 5)
        s_log = torch.zeros(1, 3, 5)
        targets = torch.full((1, 3), PAD_ID)
        with pytest.warns(UserWarning, match="padding"):
            loss = caption_distillation_loss(t_log, s_log, targets, 1.0)
        assert float(loss) == 0.0


class TestTaskLosses:
    def test_bce_golden_at_zero_logits(self):
        loss = classification_loss(torch.zeros(2, 3), torch.ones(2, 3))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-7)

    def test_bce_matches_manual_formula(self):
        rng = np.random.default_rng(10)
        z = torch.from_numpy(rng.normal(0, 3, size=(4, 5)))
        y = torch.from_numpy((rng.uniform(size=(4, 5)) < 0.4).astype(np.float64))
        manual = -(y * torch.log(torch.sigmoid(z)) + (1 - y) * torch.log(1 - torch.sigmoid(z)))
        assert float(classification_loss(z, y)) == pytest.approx(float(manual.mean()), abs=1e-9)

    def test_bce_shape_mismatch(self):
        with pytest.raises(ShapeError):
            classification_loss(torch.zeros(2, 3), torch.zeros(3, 2))

    def test_dice_perfect_prediction_is_near_zero(self):
        target = torch.zeros(1, 8, 8)
        target[0, 2:6, 2:6] = 1.0
        logits = torch.where(target > 0, 30.0, -30.0)
        assert float(dice_loss(logits, target)) <= 1e-6

    def test_dice_empty_empty_is_near_zero(self):
        assert float(dice_loss(torch.full((1, 6, 6), -30.0), torch.zeros(1, 6, 6))) <= 1e-6

    def test_dice_half_overlap_golden(self):
        # |P| = 4, |G| = 2, |P.G| = 2 -> 1 - (2*2+1)/(4+2+1) = 2/7
        target = torch.zeros(1, 1, 4)
        target[0, 0, :2] = 1.0
        logits = torch.full((1, 1, 4), 30.0)
        assert float(dice_loss(logits, target)) == pytest.approx(2.0 / 7.0, abs=1e-6)

    def test_dice_is_batch_mean(self):
        t1 = torch.zeros(1, 4, 4)
        t2 = torch.ones(1, 4, 4)
        logits = torch.zeros(1, 4, 4)
        both = dice_loss(torch.cat([logits, logits]), torch.cat([t1, t2]))
        single = 0.5 * (float(dice_loss(logits, t1)) + float(dice_loss(logits, t2)))
        assert float(both) == pytest.approx(single, abs=1e-9)

    def test_dice_totally_wrong_approaches_one(self):
        target = torch.ones(1, 16, 16)
        logits = torch.full((1, 16, 16), -30.0)
        assert float(dice_loss(logits, target)) >= 0.99

    def test_caption_loss_uniform_logits_golden(self):
        logits = torch.zeros(1, 1, 4)
        targets = torch.tensor([[2]])
        assert float(caption_loss(logits, targets)) == pytest.approx(math.log(4.0), abs=1e-6)

    def test_caption_loss_ignores_pad(self):
        rng = np.random.default_rng(11)
        logits = torch.from_numpy(rng.normal(0, 2, size=(2, 3, 5))).float()
        targets = torch.tensor([[4, PAD_ID, PAD_ID], [3, 1, PAD_ID]])
        keep = targets != PAD_ID
        manual = torch.nn.functional.cross_entropy(logits[keep], targets[keep])
        assert float(caption_loss(logits, targets)) == pytest.approx(float(manual), abs=1e-7)

    def test_caption_loss_all_pad_warns_and_zero(self):
        with pytest.warns(UserWarning, match="padding"):
            loss = caption_loss(torch.zeros(1, 2, 5), torch.full((1, 2), PAD_ID))
        assert float(loss) == 0.0

    def test_caption_loss_shape_mismatch(self):
        with pytest.raises(ShapeError):
            caption_loss(torch.zeros(1, 2, 5), torch.zeros(1, 3, dtype=torch.long))


class TestCombinedLoss:
    def test_endpoints_and_mixture(self):
        t = torch.tensor(2.0, dtype=torch.float64)
        d = torch.tensor(6.0, dtype=torch.float64)
        assert float(combined_loss(t, d, 0.0)) == 2.0
        assert float(combined_loss(t, d, 1.0)) == 6.0
        assert float(combined_loss(t, d, 0.7)) == pytest.approx(0.3 * 2 + 0.7 * 6, abs=1e-9)

    @pytest.mark.parametrize("alpha", [-0.1, 1.1, float("nan")])
    def test_invalid_alpha_rejected(self, alpha):
        with pytest.raises(DomainError):
            combined_loss(torch.tensor(1.0), torch.tensor(1.0), alpha)


class TestSgdStep:
    def test_moves_against_gradient(self):
        model = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.0)
        loss = (model.weight - 3.0).pow(2).sum()
        zero_grads(model)
        loss.backward()
        sgd_step(model, 0.1)
        assert float(model.weight) == pytest.approx(0.6, abs=1e-7)

    def test_frozen_parameters_do_not_move(self):
        model = torch.nn.Linear(2, 2)
        model.bias.requires_grad = False
        before = model.bias.detach().clone()
        loss = model(torch.ones(1, 2)).sum()
        zero_grads(model)
        loss.backward()
        sgd_step(model, 0.5)
        np.testing.assert_array_equal(model.bias.detach().numpy(), before.numpy())

    def test_nonfinite_gradient_raises_with_name(self):
        model = torch.nn.Linear(1, 1, bias=False)
        model.weight.grad = torch.tensor([[float("nan")]])
        with pytest.raises(TrainingDivergence, match="weight"):
            sgd_step(model, 0.1)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(DomainError):
            sgd_step(torch.nn.Linear(1, 1), 0.0)


class TestBatchOrder:
    def test_partitions_all_indices(self):
        batches = batch_order(10, 3, seed=1, epoch=0)
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
        assert [len(b) for b in batches] == [3, 3, 3, 1]

    def test_deterministic_and_epoch_dependent(self):
        a = np.concatenate(batch_order(20, 4, seed=2, epoch=1))
        b = np.concatenate(batch_order(20, 4, seed=2, epoch=1))
        c = np.concatenate(batch_order(20, 4, seed=2, epoch=2))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_batch_size_rejected(self):
        with pytest.raises(DomainError):
            batch_order(10, 0, seed=0, epoch=0)
