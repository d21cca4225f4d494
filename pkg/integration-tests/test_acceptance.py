"""Integration tests of pretraining, probing, distillation and redirection at desk scale.

The tests pretrain desk models on a synthetic dataset with the same budget for every mode and check the comparative
behavior: the eye-masked bottleneck beats the autoencoder and the masked autoencoder under linear probing, calibrates
better from few samples, survives distillation into a convolutional student and can redirect the gaze it encodes. The
checks are directional; absolute errors depend on the budget passed with `--emib-steps` and `--emib-count`.

Checkpoints are trained once per module, so the whole module takes tens of minutes on a CPU.
"""

import logging

from dataclasses import replace
from sys import stdout

import numpy as np
import pytest
import torch

from emib.config import StudentConfig
from emib.evaluation import (
    extract_features,
    few_shot_protocol,
    fit_linear_probe,
    gray_fill,
    reconstruct_eyes,
    redirect_gaze,
)
from emib.masking import make_reconstruction_mask, patchify
from emib.model import build_model
from emib.objectives import contrastive_forward
from emib.synth import SynthParams, generate_dataset, iris_centroids, load_dataset
from emib.training import (
    dataset_eyes,
    default_plans,
    distill_train,
    gradient_audit,
    load_any_checkpoint,
    make_batch,
    pretrain,
)


logging.basicConfig(stream=stdout, level=logging.INFO)

MODES = ("emib", "ae", "mae")


@pytest.fixture(scope="module")
def checkpoints(dataset, run_dir, run_cfg, seeds):
    """Return the checkpoints of every mode and seed, trained with the same budget."""
    result = dict()
    for mode in MODES:
        result[mode] = []
        for seed in seeds:
            train_cfg = run_cfg.train.replace(mode=mode, seed=seed)
            logging.info("Pretraining mode %s seed %s for %s steps", mode, seed, train_cfg.steps)
            result[mode].append(pretrain(dataset, run_cfg.model_config(), train_cfg, run_dir / mode / str(seed)))
    return result


def probe_error(model, dataset, shots=None, repeats=1, feature="bottleneck"):
    """Return the median over repeats of the probe error."""
    report, _ = few_shot_protocol(model, dataset, shots, repeats=repeats, feature=feature)
    return float(np.median(report.per_repeat))


def test_linear_probe_ordering(checkpoints, dataset, run_cfg, seeds):
    """Test that the bottleneck of the eye-masked model probes better than autoencoder, masked autoencoder and chance.

    The masked autoencoder has no bottleneck, so its pre-pool features are probed.
    """
    emib = np.mean([probe_error(c.model, dataset) for c in checkpoints["emib"]])
    ae = np.mean([probe_error(c.model, dataset) for c in checkpoints["ae"]])
    mae = np.mean([probe_error(c.model, dataset, feature="prepool") for c in checkpoints["mae"]])
    random = np.mean([probe_error(build_model(run_cfg.model_config(), seed).eval(), dataset) for seed in seeds])
    logging.info("Whole-dataset probe errors: emib %.2f, ae %.2f, mae %.2f, random %.2f", emib, ae, mae, random)

    assert emib < ae
    assert emib < mae
    assert emib <= 0.9 * random


def test_few_shot_beats_autoencoder(checkpoints, dataset):
    """Test that 100-shot calibration of the eye-masked model is at least 15% better than of the autoencoder."""
    emib = probe_error(checkpoints["emib"][0].model, dataset, shots=100, repeats=3)
    ae = probe_error(checkpoints["ae"][0].model, dataset, shots=100, repeats=3)
    logging.info("100-shot probe errors: emib %.2f, ae %.2f", emib, ae)
    assert emib <= 0.85 * ae


def test_more_calibration_samples_help(checkpoints, dataset):
    """Test that probe errors do not increase from 50 to 100 to 200 calibration samples."""
    model = checkpoints["emib"][0].model
    errors = [probe_error(model, dataset, shots=k, repeats=3) for k in (50, 100, 200)]
    logging.info("Probe errors at 50, 100, 200 shots: %s", errors)
    assert errors[2] <= errors[1] <= errors[0]


def test_gradient_audit_after_training(checkpoints, dataset):
    """Test that the encoder gradient still splits into the two branch contributions after training."""
    model = checkpoints["emib"][0].model
    train = dataset.train
    batch = make_batch(train, np.arange(16), dataset_eyes(train, model.cfg))
    report = gradient_audit(model, batch)
    logging.info("Gradient audit deviation %.3e", report.max_relative_deviation)
    assert report.max_relative_deviation <= 1e-4


def test_gradient_audit_midway(dataset, run_dir, run_cfg):
    """Test that the encoder gradient splits into the two branch contributions halfway through a run."""
    train_cfg = run_cfg.train.replace(seed=0)
    mid = pretrain(dataset, run_cfg.model_config(), train_cfg, run_dir / "mid", stop_after=train_cfg.steps // 2)
    train = dataset.train
    batch = make_batch(train, np.arange(16), dataset_eyes(train, mid.model.cfg))
    report = gradient_audit(mid.model, batch)
    logging.info("Gradient audit deviation at step %s: %.3e", mid.step, report.max_relative_deviation)
    assert report.max_relative_deviation <= 1e-4


def test_contrastive_term_does_not_hurt_probing(checkpoints, dataset, run_dir, run_cfg, seeds):
    """Test that the default contrastive weight probes at least as well as no contrastive term."""
    without = []
    for seed in seeds:
        train_cfg = run_cfg.train.replace(seed=seed, loss=replace(run_cfg.train.loss, lambda_contr=0.0))
        checkpoint = pretrain(dataset, run_cfg.model_config(), train_cfg, run_dir / "lambda-0" / str(seed))
        without.append(probe_error(checkpoint.model, dataset))
    with_term = np.mean([probe_error(c.model, dataset) for c in checkpoints["emib"]])
    logging.info(
        "Whole-dataset probe errors: lambda %s %.2f, lambda 0 %.2f",
        run_cfg.train.loss.lambda_contr,
        with_term,
        np.mean(without),
    )
    assert run_cfg.train.loss.lambda_contr > 0
    assert with_term <= np.mean(without)


def test_reconstruction_beats_gray_fill(checkpoints, dataset):
    """Test that spliced eye reconstructions are closer to the true eyes than gray patches."""
    model = checkpoints["emib"][0].model.eval()
    test = dataset.test
    eyes = dataset_eyes(test, model.cfg)
    model_errors, gray_errors = [], []
    for i in range(min(64, len(test))):
        image = test.images[i]
        truth = patchify(image, model.grid)[eyes[i].indices()]
        spliced = reconstruct_eyes(model, image, eyes[i], seed=i)
        plan = make_reconstruction_mask(eyes[i], 0.75, model.grid, np.random.default_rng(i))
        gray = gray_fill(image, plan, model)
        model_errors.append(np.mean((patchify(spliced, model.grid)[eyes[i].indices()] - truth) ** 2))
        gray_errors.append(np.mean((patchify(gray, model.grid)[eyes[i].indices()] - truth) ** 2))
    logging.info("Eye pixel errors: reconstruction %.4f, gray fill %.4f", np.mean(model_errors), np.mean(gray_errors))
    assert np.mean(model_errors) < np.mean(gray_errors)


def test_few_shot_on_other_subject_styles(checkpoints, dataset, run_dir, run_cfg):
    """Test that a model pretrained on one family of subject styles calibrates on another."""
    path = run_dir / "data-other-styles"
    generate_dataset(1000, SynthParams(subject_offset=1000), run_cfg.seed + 1, path)
    other = load_dataset(path)
    assert not set(other.subject.tolist()) & set(dataset.subject.tolist())

    report, probe = few_shot_protocol(checkpoints["emib"][0].model, other, 100, repeats=3)
    logging.info("100-shot probe error on other styles: %.2f +- %.2f", report.mean_error, report.std)
    assert len(report.per_repeat) == 3
    assert np.isfinite(report.mean_error)
    assert probe.n_parameters > 0


def test_eyes_help_reconstruct_eyes(checkpoints, dataset):
    """Test that on test images showing the true eyes reconstructs them better than showing other patches."""
    model = checkpoints["emib"][0].model.eval()
    test = dataset.test
    count = min(64, len(test))
    batch = make_batch(test, np.arange(count), dataset_eyes(test, model.cfg))
    recon_plans, _ = default_plans(model, batch, seed=1)
    with torch.no_grad():
        err_pos, err_neg = contrastive_forward(batch.images, recon_plans, batch.eyes, model, np.random.default_rng(1))
    assert float(torch.median(err_neg - err_pos)) > 0


def test_redirection_moves_the_iris(checkpoints, dataset):
    """Test that shifting the injection vector in yaw moves the rendered iris to the right, monotonically."""
    model = checkpoints["emib"][0].model.eval()
    probe = fit_linear_probe(extract_features(model, dataset.train.images), dataset.train.gaze)
    test = dataset.test
    eyes = dataset_eyes(test, model.cfg)
    frontal = int(np.argmin(np.abs(test.gaze).sum(axis=1)))
    sample = test[frontal]

    xs = []
    for yaw in (-0.3, 0.0, 0.3):
        image = redirect_gaze(model, probe, sample.image, (0.0, yaw), eyes[frontal])
        xs.append(float(iris_centroids(image, sample.corners)[:, 0].mean()))
    logging.info("Iris x offsets under yaw -0.3, 0, 0.3: %s", xs)
    assert xs[0] < xs[1] < xs[2]


def test_distilled_student_matches_teacher(checkpoints, dataset, run_cfg):
    """Test that the convolutional student probes within 15% of its teacher at 100 shots."""
    teachers, students = [], []
    for checkpoint in checkpoints["emib"]:
        out = checkpoint.path.parent / ("%s-student" % checkpoint.path.name)
        train_cfg = run_cfg.train.replace(seed=checkpoint.train_cfg.seed)
        distill_train(checkpoint.path, StudentConfig(), dataset, train_cfg, out)
        teachers.append(probe_error(checkpoint.model, dataset, shots=100, repeats=3))
        students.append(probe_error(load_any_checkpoint(out), dataset, shots=100, repeats=3))
    teacher, student = float(np.median(teachers)), float(np.median(students))
    logging.info("100-shot probe errors: teacher %.2f, student %.2f", teacher, student)
    assert student <= 1.15 * teacher


def test_pretraining_is_reproducible(checkpoints, dataset, run_dir, run_cfg):
    """Test that rerunning a pretraining run writes byte-identical checkpoint files and reports."""
    first = checkpoints["emib"][0]
    again = pretrain(dataset, run_cfg.model_config(), first.train_cfg, run_dir / "rerun")
    for path in sorted(first.path.glob("*.f32")) + [first.path / "manifest.json"]:
        assert path.read_bytes() == (again.path / path.name).read_bytes(), path.name

    a, _ = few_shot_protocol(first.model, dataset, 100, repeats=3)
    b, _ = few_shot_protocol(again.model, dataset, 100, repeats=3)
    assert a.to_dict() == b.to_dict()
