"""Unit tests of the `objectives` module."""

import unittest

import numpy as np
import torch

from emib._base import ConfigError, DomainError
from emib.config import LossConfig, ModelConfig
from emib.geometry import eye_patch_windows
from emib.masking import make_random_mask, make_reconstruction_mask
from emib.model import build_model
from emib.objectives import (
    _passes,
    contrastive_forward,
    contrastive_loss,
    distill_weight,
    distillation_loss,
    reconstruction_loss,
    total_loss,
)

DESK_CORNERS = [(16.0, 24.0), (24.0, 24.0), (40.0, 24.0), (48.0, 24.0)]


class TestReconstructionLoss(unittest.TestCase):
    """Class with unit tests of `reconstruction_loss`."""

    def test_exact_and_shifted_predictions(self):
        """Test that exact predictions cost 0 and predictions off by 1 cost 1 in squared mode."""
        gt = torch.rand(64, 192, generator=torch.Generator().manual_seed(0))
        eye = np.array([3, 4, 11, 12])
        self.assertEqual(0.0, float(reconstruction_loss(gt, gt, eye)))
        self.assertAlmostEqual(1.0, float(reconstruction_loss(gt + 1.0, gt, eye)), places=6)
        self.assertAlmostEqual(1.0, float(reconstruction_loss(gt + 1.0, gt, eye, error_mode="absolute")), places=6)

    def test_only_eye_patches_count(self):
        """Test that errors outside the eye set contribute nothing."""
        gt = torch.zeros(64, 192)
        pred = torch.zeros(64, 192)
        pred[0] = 100.0
        self.assertEqual(0.0, float(reconstruction_loss(pred, gt, np.array([5, 6]))))

    def test_matches_loop_oracle(self):
        """Test that the loss matches an explicit double loop over eye-patch pixels on random instances."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred = rng.random((64, 192))
            gt = rng.random((64, 192))
            eye = np.sort(rng.choice(64, size=8, replace=False))
            total = 0.0
            for k in eye:
                for j in range(192):
                    total += (pred[k, j] - gt[k, j]) ** 2
            expected = total / (len(eye) * 192)
            actual = float(reconstruction_loss(torch.from_numpy(pred), torch.from_numpy(gt), eye))
            self.assertAlmostEqual(1.0, actual / expected, delta=1e-6)

    def test_batches_and_per_sample_reduction(self):
        """Test that a batch with per-sample eye sets averages per-sample losses."""
        rng = np.random.default_rng(2)
        pred = torch.from_numpy(rng.random((3, 64, 192)))
        gt = torch.from_numpy(rng.random((3, 64, 192)))
        eyes = [np.array([0, 1]), np.array([5, 9]), np.array([60, 63])]
        per_sample = reconstruction_loss(pred, gt, eyes, reduction="none")
        self.assertEqual((3,), tuple(per_sample.shape))
        for i in range(3):
            self.assertAlmostEqual(float(reconstruction_loss(pred[i], gt[i], eyes[i])), float(per_sample[i]))
        self.assertAlmostEqual(float(per_sample.mean()), float(reconstruction_loss(pred, gt, eyes)))

    def test_invalid_inputs_raise(self):
        """Test that shape mismatches, empty eye sets and unknown error modes raise."""
        x = torch.zeros(64, 192)
        self.assertRaises(DomainError, reconstruction_loss, x, torch.zeros(64, 191), np.array([1]))
        self.assertRaises(DomainError, reconstruction_loss, x, x, np.zeros(0, dtype=np.int64))
        self.assertRaises(DomainError, reconstruction_loss, x, x, np.array([1]), "cubic")


class TestContrastive(unittest.TestCase):
    """Class with unit tests of the contrastive pass and loss."""

    def setUp(self):
        """Set up a desk model, images and plans."""
        self.model = build_model(ModelConfig(), seed=0).eval()
        self.grid = self.model.grid
        self.eyes = eye_patch_windows(DESK_CORNERS, self.grid, 2, 2)
        self.images = torch.from_numpy(np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32))
        rng = np.random.default_rng(1)
        self.plans = [make_reconstruction_mask(self.eyes, 0.75, self.grid, rng) for _ in range(2)]

    def test_hinge_truth_table(self):
        """Test that the hinge is max(err_pos - err_neg, 0)."""
        self.assertAlmostEqual(0.0, float(contrastive_loss(0.2, 0.5)))
        self.assertAlmostEqual(0.3, float(contrastive_loss(0.5, 0.2)), places=6)
        self.assertAlmostEqual(0.0, float(contrastive_loss(0.4, 0.4)))
        self.assertAlmostEqual(0.15, float(contrastive_loss(torch.tensor([0.5, 0.1]), torch.tensor([0.2, 0.2]))))

    def test_errors_are_finite_and_positive(self):
        """Test that an untrained model gives finite positive errors for both passes."""
        with torch.no_grad():
            err_pos, err_neg = contrastive_forward(
                self.images, self.plans, [self.eyes] * 2, self.model, np.random.default_rng(0)
            )
        self.assertEqual((2,), tuple(err_pos.shape))
        self.assertTrue(torch.all(torch.isfinite(err_pos)) and torch.all(err_pos > 0))
        self.assertTrue(torch.all(torch.isfinite(err_neg)) and torch.all(err_neg > 0))

    def test_errors_are_deterministic(self):
        """Test that the same generator seed gives the same errors, also for a single image."""
        with torch.no_grad():
            a = contrastive_forward(self.images, self.plans, None, self.model, np.random.default_rng(3))
            b = contrastive_forward(self.images, self.plans, None, self.model, np.random.default_rng(3))
            single = contrastive_forward(self.images[0], self.plans[0], self.eyes, self.model, np.random.default_rng(3))
        self.assertTrue(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]))
        self.assertEqual((), tuple(single[0].shape))

    def test_plans_without_eyes_raise(self):
        """Test that plans without an eye set raise."""
        random_plans = [make_random_mask(0.75, self.grid, np.random.default_rng(0))] * 2
        self.assertRaises(
            DomainError, contrastive_forward, self.images, random_plans, None, self.model, np.random.default_rng(0)
        )

    def test_low_mask_ratio_draws_negatives_from_visible_patches(self):
        """Test that with only the eyes masked the negative pass reveals visible facial patches and masks the eyes."""
        n_eye = len(self.eyes.indices())
        tight = make_reconstruction_mask(self.eyes, n_eye / 64, self.grid, np.random.default_rng(0))
        np.testing.assert_array_equal(tight.eye, np.sort(tight.masked))
        (pos_visible, pos_masked), (neg_visible, neg_masked) = _passes(tight, np.random.default_rng(0))
        self.assertEqual(64, len(pos_visible))
        self.assertEqual(0, len(pos_masked))
        np.testing.assert_array_equal(tight.eye, neg_masked)
        self.assertEqual(64 - n_eye, len(neg_visible))

        plans = [make_reconstruction_mask(self.eyes, r, self.grid, np.random.default_rng(0)) for r in (0.15, 0.15)]
        with torch.no_grad():
            err_pos, err_neg = contrastive_forward(self.images, plans, None, self.model, np.random.default_rng(0))
        self.assertTrue(torch.all(torch.isfinite(err_pos)) and torch.all(torch.isfinite(err_neg)))


class TestTotalAndDistillation(unittest.TestCase):
    """Class with unit tests of the total loss, the distillation loss and its weight schedule."""

    def test_total_loss(self):
        """Test that the total loss is l_rec + lambda * l_contr."""
        self.assertAlmostEqual(1.02, float(total_loss(1.0, 2.0, LossConfig(lambda_contr=0.01))), places=6)
        self.assertAlmostEqual(1.5, float(total_loss(1.5, 7.0, LossConfig(lambda_contr=0.0))))
        self.assertGreaterEqual(float(total_loss(0.0, 0.3, LossConfig())), 0.0)
        self.assertRaises(ConfigError, LossConfig, lambda_contr=-1.0)

    def test_distillation_loss(self):
        """Test that equal batches cost 0 and a constant offset of 2 costs 4."""
        teacher = torch.randn(8, 16, generator=torch.Generator().manual_seed(0))
        self.assertEqual(0.0, float(distillation_loss(teacher, teacher)))
        self.assertAlmostEqual(4.0, float(distillation_loss(teacher, teacher + 2.0)), places=5)
        self.assertRaises(DomainError, distillation_loss, teacher, teacher[:, :8])

    def test_distillation_loss_matches_loop_oracle(self):
        """Test that the distillation loss matches an explicit loop on random batches."""
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = rng.normal(size=(2, 5, 16))
            expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(16)) / 80
            actual = float(distillation_loss(torch.from_numpy(a), torch.from_numpy(b)))
            self.assertAlmostEqual(1.0, actual / expected, delta=1e-6)

    def test_distill_weight_schedule(self):
        """Test that the weight falls linearly from 1.0 to 0.1 over 1000 steps and then stays."""
        cfg = LossConfig(distill_weight_schedule=(1.0, 0.1, 1000))
        self.assertAlmostEqual(1.0, distill_weight(0, cfg))
        self.assertAlmostEqual(0.55, distill_weight(500, cfg))
        self.assertAlmostEqual(0.1, distill_weight(1000, cfg))
        self.assertAlmostEqual(0.1, distill_weight(5000, cfg))
