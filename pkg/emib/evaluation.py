"""Feature extraction, closed-form ridge probes, probing protocols, and eye reconstruction / gaze redirection."""

from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from PIL import Image

from emib._base import ConfigError, DomainError, ProbeError, write_json
from emib._types import FloatArray, JsonDict
from emib.config import FEATURE_MODES
from emib.geometry import EyeRegion, angular_errors
from emib.masking import MaskPlan, make_full_mask, make_full_view, make_reconstruction_mask, patchify, unpatchify
from emib.model import EMIBModel
from emib.student import DistilledModel
from emib.synth import FaceDataset

log = getLogger(__name__)

# Systems worse conditioned than this are treated as singular.
MAX_CONDITION = 1e12

AnyModel = Union[EMIBModel, DistilledModel]


@dataclass(frozen=True)
class ProbeWeights:
    """Linear map from features (optionally with head pose) to (pitch, yaw)."""

    W: FloatArray
    b: FloatArray
    feature_mode: str = "bottleneck"
    head_pose_used: bool = False
    ridge: float = 1e-3

    @property
    def n_features(self) -> int:
        """Input width ``d``, including head-pose columns."""
        return int(self.W.shape[1])

    @property
    def n_parameters(self) -> int:
        """Weights plus biases, ``2 * d + 2``."""
        return int(self.W.size + self.b.size)

    def predict(self, features: FloatArray, head_poses: Optional[FloatArray] = None) -> FloatArray:
        """Return ``n x 2`` predicted (pitch, yaw)."""
        x = _design(features, head_poses if self.head_pose_used else None)
        if self.head_pose_used and head_poses is None:
            raise ProbeError("Probe was fitted with head pose; pass head poses")
        if x.shape[1] != self.n_features:
            raise ProbeError("Probe expects %s features, got %s" % (self.n_features, x.shape[1]))
        return x @ self.W.T + self.b

    def to_dict(self) -> JsonDict:
        """Return a JSON-serializable dictionary."""
        return {
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "feature_mode": self.feature_mode,
            "head_pose_used": self.head_pose_used,
            "ridge": self.ridge,
            "n_parameters": self.n_parameters,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProbeWeights":
        """Build from :meth:`to_dict` output."""
        try:
            return cls(
                W=np.asarray(data["W"], dtype=np.float64),
                b=np.asarray(data["b"], dtype=np.float64),
                feature_mode=data["feature_mode"],
                head_pose_used=bool(data["head_pose_used"]),
                ridge=float(data["ridge"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ProbeError("Malformed probe: %s" % e) from e


@dataclass
class EvalReport:
    """Mean angular error over repeats, with the protocol that produced it."""

    mean_error: float
    std: float
    per_repeat: List[float]
    metadata: JsonDict = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate."""
        if not self.per_repeat:
            raise DomainError("An evaluation report needs at least one repeat")

    @classmethod
    def from_repeats(cls, errors: Sequence[float], metadata: Optional[JsonDict] = None) -> "EvalReport":
        """Aggregate per-repeat errors; ``std`` is the population standard deviation."""
        values = [float(e) for e in errors]
        return cls(float(np.mean(values)), float(np.std(values)), values, dict(metadata or {}))

    def to_dict(self) -> JsonDict:
        """Return a JSON-serializable dictionary."""
        return {
            "mean_error": self.mean_error,
            "std": self.std,
            "per_repeat": self.per_repeat,
            "metadata": self.metadata,
        }

    def write(self, path: Union[str, Path]) -> None:
        """Write the report as JSON."""
        write_json(path, self.to_dict())


def _to_tensor(images: Union[FloatArray, torch.Tensor]) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    return torch.from_numpy(np.asarray(images, dtype=np.float32))


def _full_view_latents(model: EMIBModel, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    positions = torch.arange(model.grid.n_patches).unsqueeze(0).expand(len(images), -1)
    latents = model.encode(patchify(images, model.grid), positions, injection=True)
    return latents, positions


def injection_vectors(model: EMIBModel, images: torch.Tensor) -> torch.Tensor:
    """Return ``z_b`` of each image under the evaluation-time injection plan (nothing masked)."""
    latents, positions = _full_view_latents(model, images)
    z_b, _ = model.bottleneck_inject(latents, positions)
    return z_b


def extract_features(
    model: AnyModel, images: Union[FloatArray, torch.Tensor], mode: str = "bottleneck", batch_size: int = 256
) -> FloatArray:
    """Return ``n x d`` features of ``images``.

    ``bottleneck`` gives the injection vector (``d = z_dim``); ``prepool`` gives the pooled full-face latents before
    the down-projection (``d`` = encoder width). Students give their head output or their pooled last stage.

    :raises: ConfigError on an unknown mode; DomainError on images that do not match the grid.
    """
    if mode not in FEATURE_MODES:
        raise ConfigError("Unknown feature mode `%s`; known: %s" % (mode, ", ".join(FEATURE_MODES)))
    images_t = _to_tensor(images)
    size = model.grid.image_size
    if images_t.ndim != 4 or tuple(images_t.shape[1:]) != (size, size, 3):
        raise DomainError("Expected images of shape (n, %s, %s, 3), got %s" % (size, size, tuple(images_t.shape)))

    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images_t), batch_size):
            chunk = images_t[start : start + batch_size]
            if isinstance(model, DistilledModel):
                out = model.student(chunk) if mode == "bottleneck" else model.student.features(chunk)
            elif mode == "bottleneck":
                out = injection_vectors(model, chunk)
            else:
                latents, positions = _full_view_latents(model, chunk)
                out = model.pool(latents, positions)
            chunks.append(out.double().numpy())
    model.train(was_training)

    width = chunks[0].shape[1] if chunks else 0
    log.debug("Extracted %s features of width %s, mode=%s", len(images_t), width, mode)
    return np.concatenate(chunks) if chunks else np.zeros((0, width))


def _design(features: FloatArray, head_poses: Optional[FloatArray]) -> FloatArray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("Features must be a matrix, got shape %s" % (x.shape,))
    if head_poses is not None:
        x = np.concatenate([x, np.asarray(head_poses, dtype=np.float64).reshape(len(x), 2)], axis=1)
    return x


def fit_linear_probe(
    features: FloatArray,
    gazes: FloatArray,
    head_poses: Optional[FloatArray] = None,
    ridge: float = 1e-3,
    feature_mode: str = "bottleneck",
) -> ProbeWeights:
    """Fit ``(pitch, yaw) = W x + b`` in closed form.

    Minimizes ``||X W^T + b - Y||^2 + ridge * ||W_f||^2`` where ``X`` is the features, optionally followed by head
    pose columns. Only the feature block ``W_f`` is penalized; the intercept and the head-pose coefficients are not.

    :raises: ProbeError when the system is singular (e.g. degenerate features with ``ridge = 0``).
    """
    x = _design(features, head_poses)
    y = np.asarray(gazes, dtype=np.float64).reshape(-1, 2)
    if len(x) != len(y) or len(x) < 1:
        raise ProbeError("Need matching, non-empty features and labels, got %s and %s rows" % (len(x), len(y)))
    if ridge < 0:
        raise ProbeError("Ridge must be >= 0, got %s" % ridge)

    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    penalty = np.zeros(x.shape[1])
    penalty[: np.asarray(features).shape[1]] = ridge
    gram = xc.T @ xc + np.diag(penalty)
    if np.linalg.cond(gram) > MAX_CONDITION:
        raise ProbeError("Probe system is singular (%s samples, %s features, ridge=%s)" % (len(x), x.shape[1], ridge))
    try:
        weights = np.linalg.solve(gram, xc.T @ yc).T
    except np.linalg.LinAlgError as e:
        raise ProbeError("Cannot solve the probe system: %s" % e) from e

    probe = ProbeWeights(
        W=weights,
        b=y_mean - weights @ x_mean,
        feature_mode=feature_mode,
        head_pose_used=head_poses is not None,
        ridge=ridge,
    )
    log.debug("Fit probe on %s samples, d=%s, parameters=%s", len(x), probe.n_features, probe.n_parameters)
    return probe


def evaluate_probe(
    model: Optional[AnyModel],
    probe: ProbeWeights,
    test_samples: FaceDataset,
    features: Optional[FloatArray] = None,
) -> EvalReport:
    """Return the mean angular error of ``probe`` on ``test_samples``.

    Features are extracted with ``model`` in the probe's mode unless precomputed ``features`` are given.
    """
    if features is None:
        if model is None:
            raise ProbeError("Need a model or precomputed features")
        features = extract_features(model, test_samples.images, probe.feature_mode)
    predictions = probe.predict(features, test_samples.head if probe.head_pose_used else None)
    errors = angular_errors(predictions, test_samples.gaze)
    return EvalReport.from_repeats([float(errors.mean())], {"n_test": len(test_samples)})


def few_shot_protocol(
    model: AnyModel,
    dataset: FaceDataset,
    shots: Optional[int],
    repeats: int = 1,
    with_head_pose: bool = False,
    feature: str = "bottleneck",
    ridge: float = 1e-3,
) -> Tuple[EvalReport, ProbeWeights]:
    """Calibrate on ``shots`` train samples per repeat and test on the full test split.

    Repeat ``r`` draws its calibration indices with seed ``r``; indices are sorted, so ``shots`` equal to the train
    size (or ``None``) is whole-dataset probing. Features are extracted once. Returns the report and the probe of
    the last repeat.

    :raises: ConfigError when ``shots`` exceeds the train split or ``repeats < 1``.
    """
    train, test = dataset.train, dataset.test
    shots = len(train) if shots is None else shots
    if not 1 <= shots <= len(train):
        raise ConfigError("Shots must be in [1, %s] (train split size), got %s" % (len(train), shots))
    if repeats < 1:
        raise ConfigError("repeats must be >= 1, got %s" % repeats)

    log.info(
        "Run probe protocol, shots=%s, repeats=%s, head_pose=%s, feature=%s", shots, repeats, with_head_pose, feature
    )
    train_features = extract_features(model, train.images, feature)
    test_features = extract_features(model, test.images, feature)

    errors = []
    probe = None
    for seed in range(repeats):
        index = np.sort(np.random.default_rng(seed).choice(len(train), size=shots, replace=False))
        probe = fit_linear_probe(
            train_features[index],
            train.gaze[index],
            train.head[index] if with_head_pose else None,
            ridge=ridge,
            feature_mode=feature,
        )
        report = evaluate_probe(None, probe, test, features=test_features)
        log.info("Repeat %s: %.3f deg", seed, report.mean_error)
        errors.append(report.mean_error)

    metadata = {
        "shots": shots,
        "repeats": repeats,
        "seeds": list(range(repeats)),
        "head_pose": with_head_pose,
        "feature": feature,
        "ridge": ridge,
        "n_train": len(train),
        "n_test": len(test),
        "n_parameters": probe.n_parameters if probe else 0,
    }
    if dataset.manifest is not None:
        metadata["dataset"] = {"path": str(dataset.manifest.path), "seed": dataset.manifest.seed}
    assert probe is not None
    return EvalReport.from_repeats(errors, metadata), probe


def linear_protocol(
    model: AnyModel,
    dataset: FaceDataset,
    with_head_pose: bool = False,
    feature: str = "bottleneck",
    ridge: float = 1e-3,
) -> Tuple[EvalReport, ProbeWeights]:
    """Whole-dataset linear probing: every train sample calibrates, the test split evaluates."""
    return few_shot_protocol(model, dataset, None, 1, with_head_pose, feature, ridge)


def splice_patches(
    image: FloatArray, predicted_tokens: FloatArray, indices: Sequence[int], model: EMIBModel
) -> FloatArray:
    """Return ``image`` with the patches ``indices`` replaced by ``predicted_tokens`` (clipped to [0, 1])."""
    tokens = np.array(patchify(np.asarray(image, dtype=np.float32), model.grid))
    index = np.asarray(indices, dtype=np.int64)
    tokens[index] = np.clip(predicted_tokens[index], 0.0, 1.0)
    return np.asarray(unpatchify(tokens, model.grid))


def gray_fill(image: FloatArray, plan: MaskPlan, model: EMIBModel, value: float = 0.5) -> FloatArray:
    """Return ``image`` with every masked patch painted ``value``."""
    tokens = np.array(patchify(np.asarray(image, dtype=np.float32), model.grid))
    tokens[plan.masked] = value
    return np.asarray(unpatchify(tokens, model.grid))


def reconstruct_eyes(
    model: EMIBModel,
    image: FloatArray,
    eyes: EyeRegion,
    seed: int = 0,
    mask_ratio: float = 0.75,
    panel_path: Optional[Union[str, Path]] = None,
) -> FloatArray:
    """Return ``image`` with its eye patches replaced by the model's reconstruction.

    The reconstruction plan is drawn with ``seed`` at ``mask_ratio``; the injection branch sees the whole face. With
    ``panel_path`` a side-by-side PNG (original, masked input, reconstruction) is written.
    """
    grid = model.grid
    plan = (
        make_full_mask(eyes, grid)
        if mask_ratio >= 1.0
        else make_reconstruction_mask(eyes, mask_ratio, grid, np.random.default_rng(seed))
    )
    image_t = _to_tensor(image)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        if model.cfg.injection == "full_face":
            out = model.forward_emib(image_t, plan, make_full_view(grid))
        else:
            out = model.forward_emib(image_t, plan)
    model.train(was_training)

    spliced = splice_patches(image, out.pred_pixels.numpy(), plan.eye, model)
    if panel_path is not None:
        save_panel([np.asarray(image), gray_fill(image, plan, model), spliced], panel_path)
    return spliced


def shift_injection_vector(z_b: FloatArray, probe: ProbeWeights, delta: Tuple[float, float]) -> FloatArray:
    """Return ``z_b + W^T (W W^T)^-1 delta``: the smallest shift moving the probe prediction by ``delta``.

    :raises: ProbeError for head-pose probes, width mismatches, or a singular ``W W^T``.
    """
    if probe.head_pose_used:
        raise ProbeError("Redirection needs a probe fitted without head pose")
    z = np.asarray(z_b, dtype=np.float64)
    if z.shape[-1] != probe.n_features:
        raise ProbeError("Probe expects %s features, injection vector has %s" % (probe.n_features, z.shape[-1]))
    gram = probe.W @ probe.W.T
    if np.linalg.cond(gram) > MAX_CONDITION:
        raise ProbeError("Probe weights are degenerate (W W^T is singular)")
    return z + probe.W.T @ np.linalg.solve(gram, np.asarray(delta, dtype=np.float64))


def redirect_gaze(
    model: EMIBModel,
    probe: ProbeWeights,
    image: FloatArray,
    delta: Tuple[float, float],
    eyes: EyeRegion,
    panel_path: Optional[Union[str, Path]] = None,
) -> FloatArray:
    """Return ``image`` with eyes redrawn to look ``delta`` (pitch, yaw) away from where they look now.

    The injection vector is shifted with :func:`shift_injection_vector` and decoded with every patch masked, so the
    decoder sees only positions and the shifted token. With ``delta = (0, 0)`` the result equals
    ``reconstruct_eyes(..., mask_ratio=1.0)``.
    """
    if probe.feature_mode != "bottleneck":
        raise ProbeError("Redirection needs a bottleneck-mode probe, got `%s`" % probe.feature_mode)
    grid = model.grid
    image_t = _to_tensor(image).unsqueeze(0)
    plan = make_full_mask(eyes, grid)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z_b = injection_vectors(model, image_t)[0].double().numpy()
        shifted = torch.from_numpy(shift_injection_vector(z_b, probe, delta).astype(np.float32))
        inj_token = model.up_proj(shifted)
        empty = torch.zeros(0, dtype=torch.long)
        pred = model.decode(
            torch.zeros(0, model.cfg.encoder.dim), empty, torch.from_numpy(plan.masked), inj_token
        ).numpy()
    model.train(was_training)

    redirected = splice_patches(image, pred, plan.eye, model)
    if panel_path is not None:
        save_panel([np.asarray(image), redirected], panel_path)
    log.info("Redirect gaze by delta=%s", tuple(delta))
    return redirected


def save_panel(images: Sequence[FloatArray], path: Union[str, Path], scale: int = 4) -> None:
    """Write ``images`` side by side as an RGB PNG, upscaled by ``scale`` with nearest-neighbour sampling."""
    strip = np.concatenate([np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0) for im in images], axis=1)
    pixels = np.round(strip * 255.0).astype(np.uint8)
    panel = Image.fromarray(pixels, mode="RGB")
    panel = panel.resize((panel.width * scale, panel.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel.save(path, format="PNG")
    log.info("Wrote panel %s", path)
