"""Unit tests of the `evaluation` module."""

import json
import tempfile
import unittest

from pathlib import Path

import numpy as np

from PIL import Image

from emib._base import ConfigError, ProbeError
from emib.config import ModelConfig, StudentConfig
from emib.evaluation import (
    EvalReport,
    ProbeWeights,
    evaluate_probe,
    extract_features,
    few_shot_protocol,
    fit_linear_probe,
    gray_fill,
    linear_protocol,
    reconstruct_eyes,
    redirect_gaze,
    shift_injection_vector,
)
from emib.geometry import angular_error
from emib.masking import make_reconstruction_mask, patchify
from emib.model import build_model
from emib.student import DistilledModel, build_student
from emib.synth import SynthParams, generate_dataset, load_dataset
from emib.training import dataset_eyes


class TestProbes(unittest.TestCase):
    """Class with unit tests of `fit_linear_probe` and `ProbeWeights`."""

    def test_recovers_exact_linear_map(self):
        """Test that exactly linear targets are recovered without ridge."""
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 16))
        a = rng.normal(size=(2, 16))
        c = np.array([0.1, -0.2])
        probe = fit_linear_probe(x, x @ a.T + c, ridge=0.0)
        np.testing.assert_allclose(a, probe.W, atol=1e-6)
        np.testing.assert_allclose(c, probe.b, atol=1e-6)

    def test_single_sample_with_ridge(self):
        """Test that one calibration sample gives a probe predicting that sample's label."""
        x = np.ones((1, 16))
        probe = fit_linear_probe(x, np.array([[0.2, -0.1]]), ridge=1e-3)
        np.testing.assert_allclose([[0.2, -0.1]], probe.predict(x), atol=1e-9)

    def test_parameter_counts(self):
        """Test that a 16-dim probe has 34 parameters, 38 with head pose."""
        rng = np.random.default_rng(1)
        x, y, h = rng.normal(size=(20, 16)), rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        self.assertEqual(34, fit_linear_probe(x, y).n_parameters)
        probe = fit_linear_probe(x, y, head_poses=h)
        self.assertEqual(18, probe.n_features)
        self.assertEqual(38, probe.n_parameters)
        self.assertRaises(ProbeError, probe.predict, x)

    def test_singular_and_invalid_systems_raise(self):
        """Test that degenerate features without ridge, a negative ridge and mismatched rows raise."""
        x = np.ones((10, 4))
        y = np.zeros((10, 2))
        self.assertRaises(ProbeError, fit_linear_probe, x, y, ridge=0.0)
        self.assertRaises(ProbeError, fit_linear_probe, x, y, ridge=-1.0)
        self.assertRaises(ProbeError, fit_linear_probe, x, y[:5])

    def test_dict_round_trip(self):
        """Test that probes survive `to_dict`, and malformed dictionaries raise."""
        probe = fit_linear_probe(np.random.default_rng(2).normal(size=(10, 3)), np.zeros((10, 2)))
        back = ProbeWeights.from_dict(json.loads(json.dumps(probe.to_dict())))
        np.testing.assert_array_equal(probe.W, back.W)
        self.assertEqual(probe.head_pose_used, back.head_pose_used)
        self.assertRaises(ProbeError, ProbeWeights.from_dict, {"W": [[1.0]]})

    def test_shift_injection_vector(self):
        """Test that the shifted vector moves the probe prediction by exactly delta."""
        rng = np.random.default_rng(3)
        probe = ProbeWeights(W=rng.normal(size=(2, 16)), b=rng.normal(size=2))
        z = rng.normal(size=16)
        np.testing.assert_array_equal(z, shift_injection_vector(z, probe, (0.0, 0.0)))
        shifted = shift_injection_vector(z, probe, (0.1, -0.2))
        np.testing.assert_allclose(probe.predict(z[None])[0] + [0.1, -0.2], probe.predict(shifted[None])[0], atol=1e-6)

        self.assertRaises(ProbeError, shift_injection_vector, z[:8], probe, (0.1, 0.0))
        head_probe = ProbeWeights(W=rng.normal(size=(2, 18)), b=np.zeros(2), head_pose_used=True)
        self.assertRaises(ProbeError, shift_injection_vector, z, head_probe, (0.1, 0.0))
        flat = ProbeWeights(W=np.zeros((2, 16)), b=np.zeros(2))
        self.assertRaises(ProbeError, shift_injection_vector, z, flat, (0.1, 0.0))


class TestEvalReport(unittest.TestCase):
    """Class with unit tests of `EvalReport`."""

    def test_from_repeats(self):
        """Test that the report holds mean, population std and per-repeat errors."""
        report = EvalReport.from_repeats([1.0, 2.0, 3.0], {"shots": 100})
        self.assertEqual(2.0, report.mean_error)
        self.assertAlmostEqual((2.0 / 3.0) ** 0.5, report.std)
        self.assertEqual([1.0, 2.0, 3.0], report.per_repeat)
        self.assertEqual(0.0, EvalReport.from_repeats([4.2]).std)

    def test_write(self):
        """Test that a report is written as sorted JSON."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "report.json"
            EvalReport.from_repeats([1.5], {"b": 1, "a": 2}).write(path)
            data = json.loads(path.read_text())
        self.assertEqual(1.5, data["mean_error"])
        self.assertEqual({"a": 2, "b": 1}, data["metadata"])


class TestProtocols(unittest.TestCase):
    """Class with unit tests of feature extraction, probing protocols, reconstruction and redirection."""

    @classmethod
    def setUpClass(cls):
        """Set up a small dataset and an untrained desk model."""
        cls.tmp = tempfile.TemporaryDirectory()
        generate_dataset(30, SynthParams(), 0, Path(cls.tmp.name) / "data", subjects=5)
        cls.dataset = load_dataset(Path(cls.tmp.name) / "data")
        cls.model = build_model(ModelConfig(), seed=0).eval()

    @classmethod
    def tearDownClass(cls):
        """Remove the temporary directory."""
        cls.tmp.cleanup()

    def test_feature_shapes(self):
        """Test that bottleneck features are n x 16 and pre-pool features n x 64."""
        images = self.dataset.images[:5]
        self.assertEqual((5, 16), extract_features(self.model, images, "bottleneck").shape)
        self.assertEqual((5, 64), extract_features(self.model, images, "prepool").shape)
        self.assertRaises(ConfigError, extract_features, self.model, images, "cls")

    def test_identical_images_give_identical_features(self):
        """Test that feature extraction is deterministic per image."""
        images = np.stack([self.dataset.images[3], self.dataset.images[3]])
        features = extract_features(self.model, images)
        np.testing.assert_array_equal(features[0], features[1])

    def test_student_features(self):
        """Test that a distilled model gives its student's head output and pooled last stage."""
        bundle = DistilledModel(self.model, build_student(StudentConfig(), seed=0)).eval()
        images = self.dataset.images[:3]
        self.assertEqual((3, 16), extract_features(bundle, images, "bottleneck").shape)
        self.assertEqual((3, 64), extract_features(bundle, images, "prepool").shape)

    def test_exact_probe_has_zero_error(self):
        """Test that a probe reproducing the labels scores 0 degrees."""
        test = self.dataset.test
        probe = ProbeWeights(W=np.eye(2), b=np.zeros(2))
        report = evaluate_probe(None, probe, test, features=np.asarray(test.gaze, dtype=np.float64))
        self.assertLess(report.mean_error, 1e-4)
        self.assertEqual(0.0, report.std)

    def test_zero_probe_matches_direct_average(self):
        """Test that a constant-zero probe scores the average angle between straight ahead and each label."""
        test = self.dataset.test
        probe = ProbeWeights(W=np.zeros((2, 16)), b=np.zeros(2))
        report = evaluate_probe(None, probe, test, features=np.zeros((len(test), 16)))
        expected = np.mean([angular_error((0.0, 0.0), tuple(g)) for g in test.gaze])
        self.assertAlmostEqual(expected, report.mean_error, places=6)

    def test_few_shot_repeats(self):
        """Test that repeats give one error each and K = train size reproduces whole-dataset probing."""
        report, probe = few_shot_protocol(self.model, self.dataset, 10, repeats=3)
        self.assertEqual(3, len(report.per_repeat))
        self.assertEqual(34, probe.n_parameters)
        self.assertEqual(list(range(3)), report.metadata["seeds"])

        full, _ = few_shot_protocol(self.model, self.dataset, len(self.dataset.train))
        whole, _ = linear_protocol(self.model, self.dataset)
        self.assertEqual(whole.mean_error, full.mean_error)
        self.assertEqual(0.0, whole.std)

    def test_few_shot_with_head_pose(self):
        """Test that head-pose probes have 38 parameters."""
        report, probe = few_shot_protocol(self.model, self.dataset, 10, with_head_pose=True)
        self.assertEqual(38, probe.n_parameters)
        self.assertTrue(report.metadata["head_pose"])

    def test_few_shot_rejects_bad_shots(self):
        """Test that shots beyond the train split or zero raise."""
        self.assertRaises(ConfigError, few_shot_protocol, self.model, self.dataset, 1000)
        self.assertRaises(ConfigError, few_shot_protocol, self.model, self.dataset, 0)
        self.assertRaises(ConfigError, few_shot_protocol, self.model, self.dataset, 5, 0)

    def test_reconstruct_eyes_changes_only_eye_patches(self):
        """Test that reconstruction replaces only eye patches, deterministically, and writes a three-image panel."""
        image = self.dataset.images[0]
        eyes = dataset_eyes(self.dataset.subset([0]), self.model.cfg)[0]
        with tempfile.TemporaryDirectory() as tmp:
            panel = Path(tmp) / "panel.png"
            out = reconstruct_eyes(self.model, image, eyes, seed=1, panel_path=panel)
            with Image.open(panel) as im:
                self.assertEqual((3 * 64 * 4, 64 * 4), im.size)

        grid = self.model.grid
        changed = np.any(patchify(out, grid) != patchify(image, grid), axis=1)
        self.assertTrue(set(np.flatnonzero(changed).tolist()) <= set(eyes.both))
        np.testing.assert_array_equal(out, reconstruct_eyes(self.model, image, eyes, seed=1))

    def test_gray_fill(self):
        """Test that gray fill paints exactly the masked patches."""
        image = self.dataset.images[1]
        eyes = dataset_eyes(self.dataset.subset([1]), self.model.cfg)[0]
        plan = make_reconstruction_mask(eyes, 0.75, self.model.grid, np.random.default_rng(0))
        tokens = patchify(gray_fill(image, plan, self.model), self.model.grid)
        self.assertTrue(np.all(tokens[plan.masked] == 0.5))
        np.testing.assert_array_equal(patchify(image, self.model.grid)[plan.visible], tokens[plan.visible])

    def test_redirect_with_zero_delta_is_full_mask_reconstruction(self):
        """Test that a zero redirection equals reconstruction with every patch masked."""
        image = self.dataset.images[2]
        eyes = dataset_eyes(self.dataset.subset([2]), self.model.cfg)[0]
        probe = fit_linear_probe(extract_features(self.model, self.dataset.images), self.dataset.gaze)
        redirected = redirect_gaze(self.model, probe, image, (0.0, 0.0), eyes)
        np.testing.assert_allclose(reconstruct_eyes(self.model, image, eyes, mask_ratio=1.0), redirected, atol=1e-5)

        moved = redirect_gaze(self.model, probe, image, (0.0, 0.3), eyes)
        self.assertFalse(np.array_equal(redirected, moved))

    def test_redirect_needs_bottleneck_probe(self):
        """Test that redirection with a pre-pool probe raises."""
        eyes = dataset_eyes(self.dataset.subset([0]), self.model.cfg)[0]
        probe = ProbeWeights(W=np.ones((2, 64)), b=np.zeros(2), feature_mode="prepool")
        self.assertRaises(ProbeError, redirect_gaze, self.model, probe, self.dataset.images[0], (0.1, 0.0), eyes)
