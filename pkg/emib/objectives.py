"""Reconstruction, eye/gaze contrastive, total and distillation losses."""

from logging import getLogger
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from emib._base import DomainError
from emib.config import LossConfig
from emib.geometry import EyeRegion
from emib.masking import MaskPlan, as_index_tensor, make_full_view, patchify
from emib.model import EMIBModel, gather_rows

log = getLogger(__name__)

Scalar = Union[float, torch.Tensor]


def _as_index(indices: Union[torch.Tensor, np.ndarray, Sequence[np.ndarray]], batch: int) -> torch.Tensor:
    if isinstance(indices, torch.Tensor):
        index = indices.long()
    elif isinstance(indices, np.ndarray):
        index = torch.from_numpy(indices.astype(np.int64))
    else:
        index = as_index_tensor(list(indices))
    if index.ndim == 1:
        index = index.unsqueeze(0).expand(batch, -1)
    return index


def reconstruction_loss(
    pred_pixels: torch.Tensor,
    gt_pixels: torch.Tensor,
    eye_indices: Union[torch.Tensor, np.ndarray, Sequence[np.ndarray]],
    error_mode: str = "squared",
    reduction: str = "mean",
) -> torch.Tensor:
    """Return the mean pixel error over the patches ``eye_indices``; other patches contribute nothing.

    Accepts ``n_patches x token_dim`` tensors with a 1-D index set, or batches ``B x n_patches x token_dim`` with a
    shared 1-D set or one equally sized set per sample. With ``reduction="none"`` a batch gives one error per sample.

    :raises: DomainError on mismatched shapes or an empty index set.
    """
    if pred_pixels.shape != gt_pixels.shape:
        raise DomainError(
            "Prediction %s and target %s shapes differ" % (tuple(pred_pixels.shape), tuple(gt_pixels.shape))
        )
    single = pred_pixels.ndim == 2
    pred = pred_pixels.unsqueeze(0) if single else pred_pixels
    gt = gt_pixels.unsqueeze(0) if single else gt_pixels

    index = _as_index(eye_indices, pred.shape[0])
    if index.shape[1] == 0:
        raise DomainError("Reconstruction loss needs a non-empty eye set")

    diff = gather_rows(pred, index) - gather_rows(gt, index)
    if error_mode == "squared":
        error = diff.pow(2)
    elif error_mode == "absolute":
        error = diff.abs()
    else:
        raise DomainError("Unknown error mode `%s`" % error_mode)

    per_sample = error.flatten(1).mean(dim=1)
    if reduction == "none":
        return per_sample[0] if single else per_sample
    return per_sample.mean()


def _passes(
    plan: MaskPlan, rng: np.random.Generator
) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """Return (visible, masked) of the positive and the negative pass for one reconstruction plan."""
    eye = plan.eye
    if not len(eye):
        raise DomainError("Contrastive passes need a plan with an eye set")
    candidates = np.setdiff1d(plan.masked, eye)
    if len(candidates) >= len(eye):
        negatives = np.sort(rng.choice(candidates, size=len(eye), replace=False))
    else:
        # Too few masked facial patches at low mask ratios: take all of them and top up from the visible face.
        visible = np.setdiff1d(plan.visible, eye)
        available = len(candidates) + len(visible)
        if available < len(eye):
            raise DomainError("Only %s non-eye patches to sample %s negatives from" % (available, len(eye)))
        extra = rng.choice(visible, size=len(eye) - len(candidates), replace=False)
        negatives = np.sort(np.concatenate([candidates, extra]))
        log.debug("Drew %s of %s negatives from visible patches", len(extra), len(eye))

    positive_visible = np.union1d(plan.visible, eye)
    negative_visible = np.union1d(plan.visible, negatives)
    return (
        (positive_visible, np.setdiff1d(plan.masked, eye)),
        (negative_visible, np.setdiff1d(plan.masked, negatives)),
    )


def contrastive_forward(
    images: torch.Tensor,
    recon_plans: Union[MaskPlan, Sequence[MaskPlan]],
    eyes: Union[EyeRegion, Sequence[EyeRegion], None],
    model: EMIBModel,
    rng: np.random.Generator,
    f0: Optional[torch.Tensor] = None,
    error_mode: str = "squared",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return the eye reconstruction errors ``(err_pos, err_neg)`` of the positive and the negative pass.

    Both passes decode with the same injection token ``f0``. The positive pass adds the true eye patches to the
    visible set; the negative pass instead adds as many randomly drawn masked non-eye patches, leaving the eyes masked.
    When fewer non-eye patches are masked than there are eye patches, all of them are drawn and the rest of the
    negatives come from visible non-eye patches.
    Each visible set is encoded once.

    :param images: ``B x S x S x 3`` batch, or one ``S x S x 3`` image with a single plan.
    :param eyes: Eye regions the plans were built from. Only used to check the plans.
    :param f0: Injection tokens (``B x decoder_dim``) from the training forward pass. When omitted, full-face models
        compute them from the unmasked face and other models decode without one.
    :returns: Per-sample errors, or scalars for a single image.
    :raises: DomainError when the face has fewer non-eye patches than eye patches.
    """
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    plans = [recon_plans] if isinstance(recon_plans, MaskPlan) else list(recon_plans)
    if eyes is not None:
        regions = [eyes] if isinstance(eyes, EyeRegion) else list(eyes)
        for plan, region in zip(plans, regions):
            if not set(region.both) >= set(plan.eye.tolist()):
                raise DomainError("Plan eye set is not part of the given eye region")
    if single and f0 is not None and f0.ndim == 1:
        f0 = f0.unsqueeze(0)

    tokens = patchify(images, model.grid)
    if f0 is None and model.cfg.injection == "full_face":
        _, f0 = model.full_face_injection(tokens, [make_full_view(model.grid)] * len(plans))

    passes = [_passes(plan, rng) for plan in plans]
    errors = []
    for which in (0, 1):
        visible = as_index_tensor([p[which][0] for p in passes])
        masked = as_index_tensor([p[which][1] for p in passes])
        latents = model.encode(gather_rows(tokens, visible), visible)
        pred = model.decode(latents, visible, masked, f0)
        errors.append(reconstruction_loss(pred, tokens, [plan.eye for plan in plans], error_mode, reduction="none"))

    err_pos, err_neg = errors
    return (err_pos[0], err_neg[0]) if single else (err_pos, err_neg)


def contrastive_loss(err_pos: Scalar, err_neg: Scalar) -> torch.Tensor:
    """Return ``max(err_pos - err_neg, 0)``, averaged over a batch."""
    hinge = torch.clamp(torch.as_tensor(err_pos) - torch.as_tensor(err_neg), min=0.0)
    return hinge.mean()


def total_loss(l_rec: Scalar, l_contr: Scalar, cfg: LossConfig) -> torch.Tensor:
    """Return ``l_rec + lambda_contr * l_contr``."""
    return torch.as_tensor(l_rec) + cfg.lambda_contr * torch.as_tensor(l_contr)


def distillation_loss(z_teacher: torch.Tensor, z_student: torch.Tensor) -> torch.Tensor:
    """Return the mean squared error between teacher and student injection vectors."""
    if z_teacher.shape != z_student.shape:
        raise DomainError("Teacher %s and student %s shapes differ" % (tuple(z_teacher.shape), tuple(z_student.shape)))
    return F.mse_loss(z_student, z_teacher)


def distill_weight(step: int, cfg: LossConfig) -> float:
    """Return the distillation weight at ``step``, linear from the schedule start to its end, then constant."""
    start, end, steps = cfg.distill_weight_schedule
    return start + (end - start) * min(step / steps, 1.0)
