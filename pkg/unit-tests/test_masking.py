"""Unit tests of the `masking` module."""

import math
import unittest

import numpy as np
import torch

from emib._base import ConfigError, DomainError
from emib.geometry import PatchGrid, eye_patch_windows
from emib.masking import (
    as_index_tensor,
    make_full_mask,
    make_full_view,
    make_injection_mask,
    make_random_mask,
    make_reconstruction_mask,
    make_single_eye_mask,
    mask_count,
    patchify,
    sincos_pos_embed,
    unpatchify,
)

FULL_GRID = PatchGrid(224, 16)
FULL_CORNERS = [(50.0, 56.0), (62.0, 56.0), (160.0, 56.0), (176.0, 56.0)]
DESK_GRID = PatchGrid(64, 8)
DESK_CORNERS = [(16.0, 24.0), (24.0, 24.0), (40.0, 24.0), (48.0, 24.0)]


class TestPatchify(unittest.TestCase):
    """Class with unit tests of `patchify` and `unpatchify`."""

    def test_patchify_shape_and_constant_image(self):
        """Test that a 224 px image gives 196 tokens of 768 values and a constant image constant tokens."""
        image = np.full((224, 224, 3), 0.25, dtype=np.float32)
        tokens = patchify(image, FULL_GRID)
        self.assertEqual((196, 768), tokens.shape)
        self.assertTrue(np.all(tokens == 0.25))

    def test_unpatchify_inverts_patchify(self):
        """Test that unpatchify(patchify(x)) is x exactly, for arrays, tensors and batches."""
        rng = np.random.default_rng(0)
        image = rng.random((64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(image, unpatchify(patchify(image, DESK_GRID), DESK_GRID))

        batch = torch.from_numpy(rng.random((3, 64, 64, 3)).astype(np.float32))
        tokens = patchify(batch, DESK_GRID)
        self.assertEqual((3, 64, 192), tuple(tokens.shape))
        self.assertTrue(torch.equal(batch, unpatchify(tokens, DESK_GRID)))

    def test_token_is_row_major_patch_block(self):
        """Test that token k holds the row-major flattening of patch k's pixel block."""
        rng = np.random.default_rng(1)
        image = rng.random((64, 64, 3))
        tokens = patchify(image, DESK_GRID)
        row, col = DESK_GRID.position(13)
        block = image[row * 8 : (row + 1) * 8, col * 8 : (col + 1) * 8]
        np.testing.assert_array_equal(block.reshape(-1), tokens[13])

    def test_unpatchify_locality(self):
        """Test that a single nonzero token only touches its own pixel block."""
        tokens = np.zeros((64, 192))
        self.assertTrue(np.all(unpatchify(tokens, DESK_GRID) == 0))
        tokens[10] = 1.0
        image = unpatchify(tokens, DESK_GRID)
        row, col = DESK_GRID.position(10)
        self.assertTrue(np.all(image[row * 8 : (row + 1) * 8, col * 8 : (col + 1) * 8] == 1.0))
        self.assertEqual(8 * 8 * 3, int(np.count_nonzero(image)))

    def test_shape_mismatch_raises(self):
        """Test that images and tokens of the wrong shape raise."""
        self.assertRaises(DomainError, patchify, np.zeros((32, 32, 3)), DESK_GRID)
        self.assertRaises(DomainError, unpatchify, np.zeros((64, 100)), DESK_GRID)


class TestSincosPosEmbed(unittest.TestCase):
    """Class with unit tests of `sincos_pos_embed`."""

    def test_origin_row_is_sines_then_cosines(self):
        """Test that position (0, 0) gives zeros for the sine halves and ones for the cosine halves."""
        table = sincos_pos_embed(DESK_GRID, 64)
        self.assertEqual((64, 64), table.shape)
        quarter = np.concatenate([np.zeros(16), np.ones(16)])
        np.testing.assert_array_equal(np.concatenate([quarter, quarter]), table[0])
        self.assertTrue(np.all(np.abs(table) <= 1.0))

    def test_entries_match_scalar_formula(self):
        """Test that random entries match an independently evaluated scalar formula."""
        dim = 64
        table = sincos_pos_embed(FULL_GRID, dim)
        rng = np.random.default_rng(2)
        for _ in range(20):
            index, channel = int(rng.integers(196)), int(rng.integers(dim))
            row, col = divmod(index, 14)
            position = row if channel < dim // 2 else col
            within = channel % (dim // 2)
            i = within % (dim // 4)
            angle = position / 10000 ** (i / (dim / 4))
            expected = math.sin(angle) if within < dim // 4 else math.cos(angle)
            self.assertAlmostEqual(expected, table[index, channel], delta=1e-7)

    def test_width_must_be_divisible_by_four(self):
        """Test that a width not divisible by 4 raises."""
        self.assertRaises(ConfigError, sincos_pos_embed, DESK_GRID, 30)


class TestMaskPlans(unittest.TestCase):
    """Class with unit tests of the mask plan builders."""

    def setUp(self):
        """Set up eye regions of both grids."""
        self.full_eyes = eye_patch_windows(FULL_CORNERS, FULL_GRID, 3, 4)
        self.desk_eyes = eye_patch_windows(DESK_CORNERS, DESK_GRID, 2, 2)

    def test_mask_count_rounds_half_up(self):
        """Test that mask counts round halves away from zero."""
        self.assertEqual(147, mask_count(0.75, 196))
        self.assertEqual(48, mask_count(0.75, 64))
        self.assertEqual(1, mask_count(0.5, 1))

    def test_reconstruction_mask_counts(self):
        """Test that ratio 0.75 masks 147 patches including all 24 eye patches, 123 of 172 facial ones."""
        eye = set(self.full_eyes.both)
        facial_masked = 0
        for seed in range(1000):
            plan = make_reconstruction_mask(self.full_eyes, 0.75, FULL_GRID, np.random.default_rng(seed))
            masked = set(plan.masked.tolist())
            self.assertEqual(147, len(masked))
            self.assertTrue(eye <= masked)
            self.assertEqual(196, len(masked) + len(plan.visible))
            self.assertFalse(masked & set(plan.visible.tolist()))
            facial_masked += len(masked - eye)
        self.assertAlmostEqual(123 / 172, facial_masked / (1000 * 172), delta=0.01)

    def test_reconstruction_mask_edge_ratios(self):
        """Test that the eye fraction masks only the eyes and ratio 1 masks everything."""
        plan = make_reconstruction_mask(self.full_eyes, 24 / 196, FULL_GRID, np.random.default_rng(0))
        np.testing.assert_array_equal(self.full_eyes.indices(), plan.masked)

        plan = make_reconstruction_mask(self.full_eyes, 1.0, FULL_GRID, np.random.default_rng(0))
        self.assertEqual(196, len(plan.masked))
        self.assertEqual(0, len(plan.visible))
        self.assertEqual(1.0, plan.total_ratio)

    def test_reconstruction_mask_rejects_infeasible_ratio(self):
        """Test that a ratio below the eye fraction raises and names the minimum."""
        with self.assertRaises(ConfigError) as cm:
            make_reconstruction_mask(self.full_eyes, 0.1, FULL_GRID, np.random.default_rng(0))
        self.assertIn("0.122449", str(cm.exception))
        rng = np.random.default_rng(0)
        self.assertRaises(ConfigError, make_reconstruction_mask, self.full_eyes, 1.5, FULL_GRID, rng)

    def test_reconstruction_mask_is_deterministic(self):
        """Test that the same seed gives the same plan."""
        a = make_reconstruction_mask(self.desk_eyes, 0.75, DESK_GRID, np.random.default_rng(7))
        b = make_reconstruction_mask(self.desk_eyes, 0.75, DESK_GRID, np.random.default_rng(7))
        self.assertEqual(a, b)
        np.testing.assert_array_equal(self.desk_eyes.indices(), a.targets)

    def test_single_eye_mask(self):
        """Test that the single-eye plan masks 147 patches including exactly one whole eye window."""
        for seed in range(50):
            plan = make_single_eye_mask(self.full_eyes, 0.75, FULL_GRID, np.random.default_rng(seed))
            self.assertEqual(147, len(plan.masked))
            eye = frozenset(plan.eye.tolist())
            self.assertIn(eye, (self.full_eyes.left, self.full_eyes.right))
            self.assertTrue(eye <= set(plan.masked.tolist()))

        plan = make_single_eye_mask(self.full_eyes, 12 / 196, FULL_GRID, np.random.default_rng(3))
        np.testing.assert_array_equal(plan.eye, plan.masked)

    def test_random_mask_has_no_eye_set(self):
        """Test that the random plan masks the requested count and scores every masked patch."""
        plan = make_random_mask(0.75, DESK_GRID, np.random.default_rng(0))
        self.assertEqual(48, len(plan.masked))
        self.assertEqual(0, len(plan.eye))
        np.testing.assert_array_equal(plan.masked, plan.targets)

    def test_injection_mask_branches(self):
        """Test that the injection plan masks both eyes or exactly one window, and both about half the time."""
        rng = np.random.default_rng(0)
        both = 0
        for _ in range(10000):
            plan = make_injection_mask(self.full_eyes, FULL_GRID, rng)
            masked = frozenset(plan.masked.tolist())
            self.assertIn(masked, (self.full_eyes.both, self.full_eyes.left, self.full_eyes.right))
            both += masked == self.full_eyes.both
        self.assertTrue(0.48 <= both / 10000 <= 0.52)

    def test_injection_mask_single_window_size(self):
        """Test that a one-eye injection plan masks 12 patches and keeps every facial patch visible."""
        for seed in range(20):
            plan = make_injection_mask(self.full_eyes, FULL_GRID, np.random.default_rng(seed))
            self.assertIn(len(plan.masked), (12, 24))
            self.assertEqual(196 - len(plan.masked), len(plan.visible))

    def test_full_view_and_full_mask(self):
        """Test the evaluation-time plan masks nothing and the autoencoder plan masks everything."""
        view = make_full_view(DESK_GRID)
        self.assertEqual(0, len(view.masked))
        self.assertEqual(64, len(view.visible))

        full = make_full_mask(self.desk_eyes, DESK_GRID)
        self.assertEqual(64, len(full.masked))
        np.testing.assert_array_equal(self.desk_eyes.indices(), full.eye)

    def test_as_index_tensor(self):
        """Test that equally sized index sets stack and unequal ones raise."""
        index = as_index_tensor([np.arange(3), np.arange(3) + 1])
        self.assertEqual((2, 3), tuple(index.shape))
        self.assertEqual(torch.long, index.dtype)
        self.assertRaises(DomainError, as_index_tensor, [np.arange(3), np.arange(2)])
