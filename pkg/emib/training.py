"""Pretraining loop, checkpoints, gradient audit, distillation to a convolutional student, and fine-tuning.

All training randomness (batch draws, mask plans, contrastive negatives) comes from one ``numpy.random.Generator``
seeded by ``TrainConfig.seed``; its state is saved in every checkpoint so a resumed run continues the exact stream.
"""

import copy
import math

from dataclasses import dataclass, field
from datetime import datetime, tzinfo
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pytz
import torch
import tzlocal

from torch import nn

from emib._base import BlobStore, BlobStoreError, ConfigError, DivergenceError, dump_json
from emib._types import FloatArray, IndexArray, JsonDict
from emib.config import LossConfig, ModelConfig, StudentConfig, TrainConfig
from emib.evaluation import EvalReport, injection_vectors, linear_protocol
from emib.geometry import EyeRegion, angular_errors, eye_patch_windows
from emib.masking import (
    MaskPlan,
    make_injection_mask,
    make_random_mask,
    make_reconstruction_mask,
    make_single_eye_mask,
    patchify,
)
from emib.model import EMIBModel, build_model, clone_model
from emib.objectives import (
    contrastive_forward,
    contrastive_loss,
    distill_weight,
    distillation_loss,
    reconstruction_loss,
    total_loss,
)
from emib.student import DistilledModel, ResNetStudent, build_student
from emib.synth import FaceDataset

log = getLogger(__name__)

CHECKPOINT_KIND = "emib-checkpoint"
STUDENT_KIND = "emib-student"
LOG_NAME = "train_log.jsonl"

# Fields that may differ between an interrupted run and its resumption.
RESUMABLE_FIELDS = ("eval_every", "checkpoint_every", "tz_name")


@dataclass
class Batch:
    """Images of one step with their eye regions and labels."""

    images: torch.Tensor
    eyes: List[EyeRegion]
    gaze: FloatArray
    head: FloatArray
    indices: IndexArray


@dataclass
class Checkpoint:
    """A model with the training state it was saved with."""

    path: Path
    model: nn.Module
    model_cfg: ModelConfig
    step: int
    train_cfg: Optional[TrainConfig] = None
    rng_state: Optional[JsonDict] = None
    optimizer_state: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    meta: JsonDict = field(default_factory=dict)


@dataclass
class GradientAuditReport:
    """Deviation between the combined encoder gradient and the sum of the per-branch gradients."""

    max_relative_deviation: float
    groups: Dict[str, float]
    combined_norm: float
    injection_norm: float
    reconstruction_norm: float

    def to_dict(self) -> JsonDict:
        """Return a JSON-serializable dictionary."""
        return {
            "max_relative_deviation": self.max_relative_deviation,
            "groups": dict(sorted(self.groups.items())),
            "combined_norm": self.combined_norm,
            "injection_norm": self.injection_norm,
            "reconstruction_norm": self.reconstruction_norm,
        }


def resolve_timezone(tz_name: Optional[str] = None) -> tzinfo:
    """Return the named timezone, or the machine's local timezone when no name is given."""
    if tz_name:
        try:
            return pytz.timezone(tz_name)
        except pytz.UnknownTimeZoneError as e:
            raise ConfigError("Unknown timezone `%s`" % tz_name) from e
    return tzlocal.get_localzone()


class TrainingLog:
    """Line-delimited JSON training records, each stamped with a timezone-aware ``time``."""

    def __init__(self, path: Union[str, Path], tz_name: Optional[str] = None, append: bool = False) -> None:
        """Open ``path``; a fresh log truncates it, ``append`` continues it."""
        self.path = Path(path)
        self.timezone = resolve_timezone(tz_name)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("", encoding="utf-8")
        except OSError as e:
            log.error("Cannot open training log %s", self.path)
            raise BlobStoreError("Cannot open training log `%s`: %s" % (self.path, e)) from e

    def write(self, record: JsonDict) -> None:
        """Append ``record`` with the current time."""
        line = dict(record, time=datetime.now(self.timezone).isoformat())
        try:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(dump_json(line).replace("\n", " ").strip() + "\n")
        except OSError as e:
            log.error("Cannot append to training log %s", self.path)
            raise BlobStoreError("Cannot append to training log `%s`: %s" % (self.path, e)) from e


def dataset_eyes(dataset: FaceDataset, cfg: ModelConfig) -> List[EyeRegion]:
    """Return the eye windows of every sample under ``cfg``."""
    return [eye_patch_windows(corners, cfg.grid, cfg.eye_rows, cfg.eye_cols) for corners in dataset.corners]


def make_batch(dataset: FaceDataset, indices: IndexArray, eyes: Sequence[EyeRegion]) -> Batch:
    """Stack samples ``indices`` into a batch; ``eyes`` are the dataset-wide windows from :func:`dataset_eyes`."""
    return Batch(
        images=torch.from_numpy(np.ascontiguousarray(dataset.images[indices], dtype=np.float32)),
        eyes=[eyes[int(i)] for i in indices],
        gaze=dataset.gaze[indices],
        head=dataset.head[indices],
        indices=np.asarray(indices, dtype=np.int64),
    )


def make_plans(
    eyes: Sequence[EyeRegion], train_cfg: TrainConfig, cfg: ModelConfig, rng: np.random.Generator
) -> Tuple[List[MaskPlan], Optional[List[MaskPlan]]]:
    """Draw the reconstruction plan, and the injection plan when the mode has one, for every sample."""
    ratio = train_cfg.effective_mask_ratio
    grid = cfg.grid
    recon: List[MaskPlan] = []
    inj: List[MaskPlan] = []
    for region in eyes:
        if train_cfg.mode in ("emib", "ae"):
            recon.append(make_reconstruction_mask(region, ratio, grid, rng))
            inj.append(make_injection_mask(region, grid, rng))
        elif train_cfg.mode == "mae":
            recon.append(make_random_mask(ratio, grid, rng))
        else:
            recon.append(make_single_eye_mask(region, ratio, grid, rng))
    return recon, (inj if inj else None)


def step_losses(
    model: EMIBModel,
    batch: Batch,
    recon_plans: Sequence[MaskPlan],
    inj_plans: Optional[Sequence[MaskPlan]],
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(total, l_rec, l_contr)`` of one batch.

    The contrastive term is computed only when ``lambda_contr > 0`` and every plan has an eye set.
    """
    out = model.forward_emib(batch.images, recon_plans, inj_plans)
    tokens = patchify(batch.images, model.grid)
    l_rec = reconstruction_loss(out.pred_pixels, tokens, [p.targets for p in recon_plans], loss_cfg.error_mode)

    l_contr = torch.zeros(())
    if loss_cfg.lambda_contr > 0 and all(len(p.eye) for p in recon_plans):
        err_pos, err_neg = contrastive_forward(
            batch.images, recon_plans, batch.eyes, model, rng, f0=out.inj_token, error_mode=loss_cfg.error_mode
        )
        l_contr = contrastive_loss(err_pos, err_neg)
    return total_loss(l_rec, l_contr, loss_cfg), l_rec, l_contr


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Return the learning rate of ``step``: linear warmup over ``warmup_fraction`` of the run, then cosine decay."""
    warmup = int(math.floor(cfg.warmup_fraction * cfg.steps + 0.5))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, cfg.steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """Return AdamW with weight decay on matrices only; biases, norms and the mask token are not decayed."""
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim >= 2 and p.shape[:2] != (1, 1)]
    decay_ids = {id(p) for p in decay}
    no_decay = [p for p in model.parameters() if p.requires_grad and id(p) not in decay_ids]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}], lr=cfg.lr
    )


def _draw_indices(n: int, batch_size: int, rng: np.random.Generator) -> IndexArray:
    return np.sort(rng.choice(n, size=batch_size, replace=n < batch_size)).astype(np.int64)


def _optimizer_state(model: nn.Module, optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, FloatArray], JsonDict]:
    tensors = dict()
    steps = dict()
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors["optim/%s/exp_avg" % name] = state["exp_avg"].detach().numpy()
        tensors["optim/%s/exp_avg_sq" % name] = state["exp_avg_sq"].detach().numpy()
        steps[name] = float(state["step"])
    return tensors, steps


def _restore_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer, checkpoint: Checkpoint) -> None:
    params = dict(model.named_parameters())
    for name, state in checkpoint.optimizer_state.items():
        if name not in params:
            raise CheckpointError("Optimizer state for unknown parameter `%s`" % name)
        optimizer.state[params[name]] = {
            "step": torch.tensor(state["step"], dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(state["exp_avg"], dtype=np.float32)),
            "exp_avg_sq": torch.from_numpy(np.array(state["exp_avg_sq"], dtype=np.float32)),
        }


def save_checkpoint(
    model: nn.Module,
    path: Union[str, Path],
    model_cfg: Optional[ModelConfig] = None,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng: Optional[np.random.Generator] = None,
    train_cfg: Optional[TrainConfig] = None,
    kind: str = CHECKPOINT_KIND,
    meta: Optional[JsonDict] = None,
) -> Checkpoint:
    """Write ``model`` (and optionally its training state) as a checkpoint directory.

    Parameters are blobs ``param/<name>``; AdamW moments are blobs ``optim/<name>/exp_avg`` and ``.../exp_avg_sq``.
    The model config, step, optimizer step counts, generator state and train config go to the manifest metadata.

    :raises: BlobStoreError when the directory cannot be written.
    """
    path = Path(path)
    if model_cfg is None:
        model_cfg = model.cfg if isinstance(model, EMIBModel) else model.emib.cfg  # type: ignore[union-attr]
    tensors = {"param/" + name: value.detach().numpy() for name, value in model.state_dict().items()}
    optimizer_steps: JsonDict = dict()
    if optimizer is not None:
        moments, optimizer_steps = _optimizer_state(model, optimizer)
        tensors.update(moments)

    rng_state = rng.bit_generator.state if rng is not None else None
    full_meta = {
        "model_config": model_cfg.to_dict(),
        "step": step,
        "optimizer_steps": optimizer_steps,
        "rng_state": rng_state,
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
    }
    full_meta.update(meta or {})
    log.info("Save checkpoint at step %s to %s", step, path)
    BlobStore(path, kind).write(tensors, full_meta)
    return Checkpoint(
        path=path,
        model=model,
        model_cfg=model_cfg,
        step=step,
        train_cfg=train_cfg,
        rng_state=copy.deepcopy(rng_state),
        meta=full_meta,
    )


def _read(path: Union[str, Path], kind: str) -> Tuple[JsonDict, Dict[str, FloatArray]]:
    store = BlobStore(path, kind)
    try:
        manifest = store.read_manifest()
        return manifest, store.read()
    except BlobStoreError as e:
        raise CheckpointError(str(e)) from e


def _load_params(model: nn.Module, tensors: Dict[str, FloatArray], path: Path) -> None:
    expected = model.state_dict()
    params = {name[len("param/") :]: value for name, value in tensors.items() if name.startswith("param/")}
    missing, unexpected = sorted(set(expected) - set(params)), sorted(set(params) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            "Checkpoint %s does not match the model: missing=%s, unexpected=%s" % (path, missing, unexpected)
        )
    for name, value in params.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                "Parameter `%s` has shape %s in %s, model expects %s"
                % (name, tuple(value.shape), path, tuple(expected[name].shape))
            )
    model.load_state_dict({name: torch.from_numpy(np.array(value, dtype=np.float32)) for name, value in params.items()})


def read_checkpoint(path: Union[str, Path], expected_cfg: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a pretraining checkpoint with its training state.

    :raises: CheckpointError when the directory is unreadable, corrupt, or its model config differs from
        ``expected_cfg``.
    """
    path = Path(path)
    manifest, tensors = _read(path, CHECKPOINT_KIND)
    meta = manifest["meta"]
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    if expected_cfg is not None and expected_cfg != model_cfg:
        raise CheckpointError(
            "Checkpoint %s was saved with config %s, expected %s" % (path, model_cfg.to_dict(), expected_cfg.to_dict())
        )

    model = EMIBModel(model_cfg)
    _load_params(model, tensors, path)

    optimizer_state = dict()
    for name, step in meta.get("optimizer_steps", {}).items():
        optimizer_state[name] = {
            "step": step,
            "exp_avg": tensors["optim/%s/exp_avg" % name],
            "exp_avg_sq": tensors["optim/%s/exp_avg_sq" % name],
        }
    train_cfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    log.info("Read checkpoint %s at step %s", path, meta["step"])
    return Checkpoint(
        path=path,
        model=model,
        model_cfg=model_cfg,
        step=int(meta["step"]),
        train_cfg=train_cfg,
        rng_state=meta.get("rng_state"),
        optimizer_state=optimizer_state,
        meta=meta,
    )


def load_checkpoint(path: Union[str, Path], expected_cfg: Optional[ModelConfig] = None) -> EMIBModel:
    """Return the model stored in a pretraining checkpoint; see :func:`read_checkpoint`."""
    model = read_checkpoint(path, expected_cfg).model
    assert isinstance(model, EMIBModel)
    return model


def load_student_checkpoint(path: Union[str, Path]) -> DistilledModel:
    """Return the distilled model (student plus fine-tuned autoencoder) stored by :func:`distill_train`."""
    path = Path(path)
    manifest, tensors = _read(path, STUDENT_KIND)
    meta = manifest["meta"]
    bundle = DistilledModel(
        EMIBModel(ModelConfig.from_dict(meta["model_config"])),
        ResNetStudent(StudentConfig.from_dict(meta["student_config"])),
    )
    _load_params(bundle, tensors, path)
    return bundle


def load_any_checkpoint(path: Union[str, Path]) -> Union[EMIBModel, DistilledModel]:
    """Return the model of a pretraining or a student checkpoint, whichever ``path`` holds."""
    kind = None
    try:
        kind = BlobStore(path, CHECKPOINT_KIND).read_manifest()["kind"]
    except BlobStoreError:
        pass
    return load_checkpoint(path) if kind == CHECKPOINT_KIND else load_student_checkpoint(path)


def _snapshot(
    model: nn.Module, optimizer: torch.optim.Optimizer, rng: np.random.Generator
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any], Dict[str, Any]]:
    state = (model.state_dict(), optimizer.state_dict(), rng.bit_generator.state)
    return copy.deepcopy(state)


def _restore(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    snapshot: Tuple[Dict[str, torch.Tensor], Dict[str, Any], Dict[str, Any]],
) -> None:
    model.load_state_dict(snapshot[0])
    optimizer.load_state_dict(snapshot[1])
    rng.bit_generator.state = snapshot[2]


def _all_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def _check_resume(stored: Optional[TrainConfig], train_cfg: TrainConfig, path: Path) -> None:
    if stored is None:
        raise ConfigError("Checkpoint %s has no training state to resume from" % path)
    a = {k: v for k, v in stored.to_dict().items() if k not in RESUMABLE_FIELDS}
    b = {k: v for k, v in train_cfg.to_dict().items() if k not in RESUMABLE_FIELDS}
    if a != b:
        raise ConfigError("Cannot resume %s with a different training config: %s vs %s" % (path, a, b))


def pretrain(
    dataset: FaceDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    init_from: Optional[Union[str, Path]] = None,
    stop_after: Optional[int] = None,
) -> Checkpoint:
    """Pretrain a model on the train split of ``dataset`` and write the final checkpoint to ``out_dir``.

    Each step draws a batch, builds per-sample plans for the mode, runs the dual-branch forward pass and takes one
    AdamW step on the total loss. Records go to ``out_dir/train_log.jsonl``; with ``eval_every`` a whole-dataset probe
    error is added every that many steps, on bottleneck features or, for modes without injection, pre-pool features.
    With ``checkpoint_every`` intermediate checkpoints go to ``out_dir/step-NNNNNN``.

    :param resume: Checkpoint to continue from; the remaining steps reproduce an uninterrupted run bitwise.
    :param init_from: Checkpoint whose parameters initialize the model (optimizer and generator start fresh).
    :param stop_after: Save and return after this many steps in total, as if the run had been interrupted.
    :raises: ConfigError on a dataset that does not match the grid; DivergenceError on a non-finite loss or a step
        that leaves non-finite parameters, after saving the parameters and optimizer state from before that step to
        ``out_dir``.
    """
    out_dir = Path(out_dir)
    if model_cfg.injection != train_cfg.injection_source:
        log.info("Set injection source to `%s` for mode `%s`", train_cfg.injection_source, train_cfg.mode)
        model_cfg = model_cfg.replace(injection=train_cfg.injection_source)
    if dataset.image_size != model_cfg.image_size:
        raise ConfigError("Dataset images are %s px, model expects %s" % (dataset.image_size, model_cfg.image_size))

    train = dataset.train if dataset.manifest is not None else dataset
    eyes = dataset_eyes(train, model_cfg)

    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = build_optimizer(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    start = 0
    if init_from is not None:
        log.info("Initialize parameters from %s", init_from)
        model.load_state_dict(load_checkpoint(init_from, model_cfg).state_dict())
    if resume is not None:
        checkpoint = read_checkpoint(resume, model_cfg)
        _check_resume(checkpoint.train_cfg, train_cfg, Path(resume))
        model.load_state_dict(checkpoint.model.state_dict())
        _restore_optimizer(model, optimizer, checkpoint)
        rng.bit_generator.state = checkpoint.rng_state
        start = checkpoint.step
        log.info("Resume from %s at step %s", resume, start)

    training_log = TrainingLog(out_dir / LOG_NAME, train_cfg.tz_name, append=resume is not None)
    end = train_cfg.steps if stop_after is None else min(stop_after, train_cfg.steps)
    log.info("Pretrain mode=%s, steps %s..%s, batch=%s", train_cfg.mode, start, end, train_cfg.batch_size)

    model.train()
    for step in range(start, end):
        good = _snapshot(model, optimizer, rng)
        batch = make_batch(train, _draw_indices(len(train), train_cfg.batch_size, rng), eyes)
        recon_plans, inj_plans = make_plans(batch.eyes, train_cfg, model_cfg, rng)
        lr = learning_rate(step, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        loss, l_rec, l_contr = step_losses(model, batch, recon_plans, inj_plans, train_cfg.loss, rng)
        if torch.isfinite(loss):
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        if not torch.isfinite(loss) or not _all_finite(model):
            log.error("Diverged at step %s (loss %s); save the parameters before it and abort", step, loss.item())
            _restore(model, optimizer, rng, good)
            save_checkpoint(model, out_dir, model_cfg, step, optimizer, rng, train_cfg, meta={"diverged": True})
            raise DivergenceError("Non-finite loss or parameters at step %s" % step, last_good=out_dir)

        record: JsonDict = {
            "step": step + 1,
            "l_rec": float(l_rec.item()),
            "l_contr": float(l_contr.item()),
            "lr": lr,
            "ratio": float(np.mean([p.total_ratio for p in recon_plans])),
        }
        if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0 and dataset.manifest is not None:
            feature = "prepool" if train_cfg.injection_source == "none" else "bottleneck"
            report, _ = linear_protocol(model, dataset, feature=feature)
            record["probe_error"] = report.mean_error
            model.train()
        training_log.write(record)
        log.debug("Step %s: loss=%.6f, l_rec=%.6f", step + 1, loss.item(), record["l_rec"])

        if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0 and step + 1 < end:
            save_checkpoint(model, out_dir / ("step-%06d" % (step + 1)), model_cfg, step + 1, optimizer, rng, train_cfg)

    model.eval()
    return save_checkpoint(model, out_dir, model_cfg, end, optimizer, rng, train_cfg)


def _theta(model: EMIBModel) -> List[Tuple[str, nn.Parameter]]:
    return list(model.encoder_parameters())


def _group_name(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:3] if len(parts) > 2 and parts[1] == "blocks" else parts[:2])


def _grads(
    model: EMIBModel, loss_fn: Callable[[], torch.Tensor], params: Sequence[Tuple[str, nn.Parameter]]
) -> Dict[str, torch.Tensor]:
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for name, p in params}
    model.zero_grad(set_to_none=True)
    return grads


def default_plans(
    model: EMIBModel, batch: Batch, seed: int = 0, mask_ratio: float = 0.75
) -> Tuple[List[MaskPlan], Optional[List[MaskPlan]]]:
    """Return audit plans for ``batch``: eye reconstruction plans, and injection plans for full-face models."""
    rng = np.random.default_rng(seed)
    recon, inj = [], []
    for region in batch.eyes:
        recon.append(make_reconstruction_mask(region, mask_ratio, model.grid, rng))
        inj.append(make_injection_mask(region, model.grid, rng))
    return recon, (inj if model.cfg.injection == "full_face" else None)


def gradient_audit(
    model: EMIBModel,
    batch: Batch,
    recon_plans: Optional[Sequence[MaskPlan]] = None,
    inj_plans: Optional[Sequence[MaskPlan]] = None,
    loss_cfg: Optional[LossConfig] = None,
    loss_scale: float = 1.0,
) -> GradientAuditReport:
    """Check that the encoder gradient splits into the two branch contributions.

    Three backward passes on the eye reconstruction loss: the full graph, the graph with the injection branch's
    encoder output held constant (reconstruction contribution), and the graph with the reconstruction branch's
    encoder output held constant (injection contribution). Deviations are max-norm, relative to the combined
    gradient's max-norm, overall and per parameter group. The model's parameters are left unchanged.
    """
    loss_cfg = loss_cfg or LossConfig()
    if recon_plans is None:
        recon_plans, inj_plans = default_plans(model, batch)
    tokens = patchify(batch.images, model.grid)
    targets = [p.targets for p in recon_plans]

    def loss_fn(detach_injection: bool = False, detach_reconstruction: bool = False) -> torch.Tensor:
        out = model.forward_emib(batch.images, recon_plans, inj_plans, detach_injection, detach_reconstruction)
        return loss_scale * reconstruction_loss(out.pred_pixels, tokens, targets, loss_cfg.error_mode)

    params = _theta(model)
    combined = _grads(model, loss_fn, params)
    g_rec = _grads(model, lambda: loss_fn(detach_injection=True), params)
    g_inj = _grads(model, lambda: loss_fn(detach_reconstruction=True), params)

    def max_abs(tensors: Iterable[torch.Tensor]) -> float:
        values = [float(t.abs().max()) for t in tensors if t.numel()]
        return max(values) if values else 0.0

    scale = max_abs(combined.values())
    groups: Dict[str, List[torch.Tensor]] = dict()
    for name in combined:
        groups.setdefault(_group_name(name), []).append(combined[name] - g_rec[name] - g_inj[name])
    group_deviation = {
        group: (max_abs(diffs) / scale if scale > 0 else max_abs(diffs)) for group, diffs in groups.items()
    }
    report = GradientAuditReport(
        max_relative_deviation=max(group_deviation.values()) if group_deviation else 0.0,
        groups=group_deviation,
        combined_norm=scale,
        injection_norm=max_abs(g_inj.values()),
        reconstruction_norm=max_abs(g_rec.values()),
    )
    log.info("Gradient audit: max relative deviation %.3e", report.max_relative_deviation)
    return report


def directional_gradient_check(
    model: EMIBModel,
    batch: Batch,
    recon_plans: Optional[Sequence[MaskPlan]] = None,
    inj_plans: Optional[Sequence[MaskPlan]] = None,
    loss_cfg: Optional[LossConfig] = None,
    directions: int = 10,
    eps: float = 1e-3,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> float:
    """Compare the total-loss gradient with central differences along random unit directions of the encoder weights.

    Works on a copy of ``model`` cast to ``dtype``. Contrastive negatives are redrawn from the same seed for every
    evaluation, so all loss evaluations share one sampling. Returns ``max|fd - analytic| / max|analytic|`` over the
    directions.
    """
    loss_cfg = loss_cfg or LossConfig()
    if recon_plans is None:
        recon_plans, inj_plans = default_plans(model, batch, seed)
    probe_model = clone_model(model).to(dtype)
    probe_batch = Batch(batch.images.to(dtype), batch.eyes, batch.gaze, batch.head, batch.indices)

    def loss_fn() -> torch.Tensor:
        loss, _, _ = step_losses(
            probe_model, probe_batch, recon_plans, inj_plans, loss_cfg, np.random.default_rng(seed)
        )
        return loss

    params = [p for _, p in _theta(probe_model)]
    probe_model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    probe_model.zero_grad(set_to_none=True)

    generator = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for _ in range(directions):
            direction = [torch.randn(p.shape, generator=generator, dtype=dtype) for p in params]
            norm = torch.sqrt(sum((d * d).sum() for d in direction))
            direction = [d / norm for d in direction]
            analytic.append(float(sum((g * d).sum() for g, d in zip(grads, direction))))

            for p, d in zip(params, direction):
                p.add_(eps * d)
            plus = float(loss_fn())
            for p, d in zip(params, direction):
                p.sub_(2 * eps * d)
            minus = float(loss_fn())
            for p, d in zip(params, direction):
                p.add_(eps * d)
            numeric.append((plus - minus) / (2 * eps))

    a, n = np.array(analytic), np.array(numeric)
    scale = float(np.abs(a).max())
    error = float(np.abs(n - a).max() / scale) if scale > 0 else float(np.abs(n - a).max())
    log.info("Directional gradient check over %s directions: relative error %.3e", directions, error)
    return error


def distill_train(
    teacher_ckpt: Union[str, Path],
    student_cfg: StudentConfig,
    dataset: FaceDataset,
    train_cfg: TrainConfig,
    out_dir: Union[str, Path],
) -> Checkpoint:
    """Distill a pretrained model's injection branch into a convolutional student.

    The teacher is frozen. A copy of it keeps training as the eye-masked autoencoder, now fed by the student's
    up-projected injection vector. The per-step loss is the eye reconstruction loss plus ``w(t)`` times the mean
    squared error between teacher and student injection vectors, with ``w`` following
    ``train_cfg.loss.distill_weight_schedule``.

    :raises: ConfigError when the student width differs from the teacher's z_dim.
    """
    out_dir = Path(out_dir)
    teacher = load_checkpoint(teacher_ckpt)
    if teacher.cfg.bottleneck.z_dim != student_cfg.z_dim:
        raise ConfigError(
            "Student z_dim %s does not match teacher z_dim %s" % (student_cfg.z_dim, teacher.cfg.bottleneck.z_dim)
        )
    if dataset.image_size != teacher.cfg.image_size:
        raise ConfigError("Dataset images are %s px, teacher expects %s" % (dataset.image_size, teacher.cfg.image_size))

    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    bundle = DistilledModel(clone_model(teacher), build_student(student_cfg, seed=train_cfg.seed))
    for p in bundle.parameters():
        p.requires_grad_(True)

    train = dataset.train if dataset.manifest is not None else dataset
    eyes = dataset_eyes(train, teacher.cfg)
    optimizer = build_optimizer(bundle, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    training_log = TrainingLog(out_dir / LOG_NAME, train_cfg.tz_name)
    plan_cfg = train_cfg.replace(mode="emib")

    log.info("Distill %s into a student, steps=%s", teacher_ckpt, train_cfg.steps)
    bundle.train()
    for step in range(train_cfg.steps):
        batch = make_batch(train, _draw_indices(len(train), train_cfg.batch_size, rng), eyes)
        recon_plans, _ = make_plans(batch.eyes, plan_cfg, teacher.cfg, rng)
        lr = learning_rate(step, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        with torch.no_grad():
            z_teacher = injection_vectors(teacher, batch.images)
        out = bundle.forward_emib(batch.images, recon_plans)
        tokens = patchify(batch.images, teacher.grid)
        targets = [p.targets for p in recon_plans]
        l_rec = reconstruction_loss(out.pred_pixels, tokens, targets, train_cfg.loss.error_mode)
        assert out.z_b is not None
        l_distill = distillation_loss(z_teacher, out.z_b)
        weight = distill_weight(step, train_cfg.loss)
        loss = l_rec + weight * l_distill
        if not torch.isfinite(loss):
            raise DivergenceError("Non-finite distillation loss at step %s" % step)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        training_log.write(
            {
                "step": step + 1,
                "l_rec": float(l_rec.item()),
                "l_distill": float(l_distill.item()),
                "w": weight,
                "lr": lr,
            }
        )

    bundle.eval()
    meta = {"student_config": student_cfg.to_dict(), "teacher": str(teacher_ckpt)}
    return save_checkpoint(
        bundle, out_dir, teacher.cfg, train_cfg.steps, train_cfg=train_cfg, kind=STUDENT_KIND, meta=meta
    )


def finetune(
    model: EMIBModel,
    dataset: FaceDataset,
    fraction: float,
    train_cfg: TrainConfig,
) -> EvalReport:
    """Fine-tune encoder and bottleneck with a linear (pitch, yaw) head on a seeded fraction of the train split.

    The loss is the L1 error of the predicted angles. The report holds the test-split mean angular error; ``model``
    itself is not modified.

    :raises: ConfigError when ``fraction`` selects no samples.
    """
    train, test = dataset.train, dataset.test
    count = int(math.floor(fraction * len(train) + 0.5))
    if not 0.0 < fraction <= 1.0 or count < 1:
        raise ConfigError("Fine-tuning fraction %s selects no samples of %s" % (fraction, len(train)))

    rng = np.random.default_rng(train_cfg.seed)
    subset = train.subset(np.sort(rng.choice(len(train), size=count, replace=False)))
    tuned = clone_model(model)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed)
        head = nn.Linear(tuned.cfg.bottleneck.z_dim, 2)
    modules = nn.ModuleDict({"model": tuned, "head": head})
    optimizer = build_optimizer(modules, train_cfg)
    labels = torch.from_numpy(np.asarray(subset.gaze, dtype=np.float32))

    log.info("Fine-tune on %s of %s train samples, steps=%s", count, len(train), train_cfg.steps)
    modules.train()
    for step in range(train_cfg.steps):
        index = _draw_indices(count, train_cfg.batch_size, rng)
        lr = learning_rate(step, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        images = torch.from_numpy(np.ascontiguousarray(subset.images[index], dtype=np.float32))
        loss = (head(injection_vectors(tuned, images)) - labels[index]).abs().mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    modules.eval()
    with torch.no_grad():
        predictions = [
            head(injection_vectors(tuned, torch.from_numpy(test.images[i : i + 256]))).double().numpy()
            for i in range(0, len(test), 256)
        ]
    errors = angular_errors(np.concatenate(predictions), test.gaze)
    return EvalReport.from_repeats(
        [float(errors.mean())], {"protocol": "finetune", "fraction": fraction, "n_train": count, "n_test": len(test)}
    )


class CheckpointError(BlobStoreError):
    """Raised when a checkpoint is missing, corrupt, or does not match the expected model."""
