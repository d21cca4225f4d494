"""Procedural face-gaze images with analytically known gaze, head pose and eye-corner landmarks.

A face is drawn in a canonical frame: a textured face ellipse, nose, mouth, and two eye ellipses whose iris discs are
offset from the eye centers in proportion to the eye-in-head rotation. The canonical frame is then mapped onto the
canvas by a head-pose dependent affine transform (translation, small roll, foreshortening). Gaze labels are absolute:
the camera-frame composition of head pose and eye-in-head rotation.

Datasets are written in the blob+manifest layout of :class:`emib._base.BlobStore` with the blobs ``images``,
``corners``, ``gaze``, ``head`` and ``subject``.
"""

import dataclasses
import math

from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from emib._base import BlobStore, BlobStoreError, ConfigError, DomainError
from emib._types import FloatArray, IndexArray, JsonDict
from emib.config import _Serializable
from emib.geometry import GazeDirection, HeadPose, gaze_in_head

log = getLogger(__name__)

DATASET_KIND = "emib-dataset"

# Canonical layout, as fractions of the image size.
EYE_CENTERS = ((0.3125, 0.375), (0.6875, 0.375))
EYE_AXES = (0.1, 0.065)
IRIS_RADIUS = 0.03
FACE_CENTER = (0.5, 0.52)
FACE_AXES = (0.4, 0.48)
NOSE = ((0.5, 0.58), (0.05, 0.09))
MOUTH = ((0.5, 0.76), (0.13, 0.035))
EYE_SCALE_RANGE = (0.95, 1.1)
TEXTURE_CELLS = 8
SCLERA = 0.95

# Darkness threshold used to read the iris back from rendered pixels.
IRIS_DARKNESS = 0.45

# Labels are stored as float32, which may round a value drawn inside a range just past its edge.
RANGE_SLACK = 1e-6


@dataclass(frozen=True)
class SynthParams(_Serializable):
    """Renderer and sampling parameters.

    ``iris_gain`` is the iris offset in pixels per radian of eye-in-head rotation and defaults to ``0.03 * image_size``.
    ``head_gain`` scales the head translation (fraction of the image per unit sine of head angle). Subject styles are
    seeded by subject id; ``subject_offset`` shifts the ids a dataset draws, so two offsets give disjoint style
    families.
    """

    image_size: int = 64
    gaze_range: float = 0.6
    head_range: float = 0.4
    iris_gain: Optional[float] = None
    head_gain: float = 0.1
    roll_gain: float = 0.2
    subject_offset: int = 0

    def __post_init__(self) -> None:
        """Validate that the iris stays inside the smallest eye at the most extreme eye-in-head rotation."""
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16, got %s" % self.image_size)
        if not 0 < self.gaze_range <= 1.2 or not 0 <= self.head_range <= 1.2:
            raise ConfigError("Gaze range must be in (0, 1.2] and head range in [0, 1.2] radians")
        if self.subject_offset < 0:
            raise ConfigError("subject_offset must be >= 0")

        pitch, yaw = self.max_eye_rotation()
        a, b = (axis * self.image_size * EYE_SCALE_RANGE[0] for axis in EYE_AXES)
        reach = (self.gain * yaw * 1.1 / a) ** 2 + (self.gain * pitch * 1.1 / b) ** 2
        if reach > 1.0:
            raise ConfigError(
                "Iris gain %.3f px/rad pushes the iris outside the eye at extreme gaze; lower it or the ranges"
                % self.gain
            )

    @property
    def gain(self) -> float:
        """Effective iris gain in pixels per radian."""
        return self.iris_gain if self.iris_gain is not None else 0.03 * self.image_size

    def max_eye_rotation(self) -> Tuple[float, float]:
        """Return the largest absolute (pitch, yaw) of eye-in-head rotation reachable within the ranges."""
        g = np.linspace(-self.gaze_range, self.gaze_range, 5)
        h = np.linspace(-self.head_range, self.head_range, 5)
        rotations = np.array([gaze_in_head((gp, gy), (hp, hy)) for gp in g for gy in g for hp in h for hy in h])
        return float(np.abs(rotations[:, 0]).max()), float(np.abs(rotations[:, 1]).max())

    def replace(self, **changes: Any) -> "SynthParams":
        """Return a copy with ``changes`` applied."""
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SubjectStyle:
    """Per-subject appearance."""

    skin: FloatArray
    background: FloatArray
    iris: FloatArray
    eye_scale: float
    noise_amplitude: float
    texture: FloatArray

    @classmethod
    def from_seed(cls, style_seed: int) -> "SubjectStyle":
        """Draw a style from its seed."""
        if style_seed < 0:
            raise DomainError("Style seed must be >= 0, got %s" % style_seed)
        rng = np.random.default_rng(style_seed)
        return cls(
            skin=rng.uniform(0.62, 0.9) * np.array([1.0, 0.84, 0.72]),
            background=rng.uniform(0.55, 0.75) * np.array([0.9, 0.95, 1.0]),
            iris=rng.uniform(0.05, 0.2) * np.array([1.0, 0.8, 0.6]),
            eye_scale=float(rng.uniform(*EYE_SCALE_RANGE)),
            noise_amplitude=float(rng.uniform(0.02, 0.05)),
            texture=np.clip(rng.normal(size=(TEXTURE_CELLS + 1, TEXTURE_CELLS + 1)), -1.0, 1.0),
        )


@dataclass
class FaceSample:
    """One rendered face with its labels."""

    image: FloatArray
    corners: FloatArray
    gaze: GazeDirection
    head: HeadPose
    subject_id: int


@dataclass(frozen=True)
class DatasetManifest:
    """Metadata of a dataset directory."""

    path: Path
    count: int
    image_size: int
    train_ids: Tuple[int, ...]
    test_ids: Tuple[int, ...]
    seed: int
    params: SynthParams
    blobs: JsonDict = field(default_factory=dict)

    @classmethod
    def from_manifest(cls, path: Path, manifest: Mapping[str, Any]) -> "DatasetManifest":
        """Build from a parsed ``manifest.json``."""
        meta = manifest["meta"]
        return cls(
            path=path,
            count=int(meta["count"]),
            image_size=int(meta["image_size"]),
            train_ids=tuple(meta["splits"]["train"]),
            test_ids=tuple(meta["splits"]["test"]),
            seed=int(meta["seed"]),
            params=SynthParams.from_dict(meta["params"]),
            blobs=dict(manifest["blobs"]),
        )


class FaceDataset:
    """In-memory dataset: stacked arrays plus the manifest they were loaded from."""

    def __init__(
        self,
        images: FloatArray,
        corners: FloatArray,
        gaze: FloatArray,
        head: FloatArray,
        subject: IndexArray,
        manifest: Optional[DatasetManifest] = None,
    ) -> None:
        """Arrays are ``n x S x S x 3``, ``n x 4 x 2``, ``n x 2``, ``n x 2`` and ``n``."""
        n = len(images)
        if not (len(corners) == len(gaze) == len(head) == len(subject) == n):
            raise DomainError("Dataset arrays disagree on the sample count")
        self.images = images
        self.corners = corners
        self.gaze = gaze
        self.head = head
        self.subject = subject
        self.manifest = manifest

    def __len__(self) -> int:
        """Return the sample count."""
        return len(self.images)

    def __getitem__(self, index: int) -> FaceSample:
        """Return sample ``index``."""
        return FaceSample(
            image=self.images[index],
            corners=self.corners[index],
            gaze=GazeDirection(float(self.gaze[index, 0]), float(self.gaze[index, 1])),
            head=HeadPose(float(self.head[index, 0]), float(self.head[index, 1])),
            subject_id=int(self.subject[index]),
        )

    def __iter__(self) -> Iterator[FaceSample]:
        """Yield samples in stored order."""
        return (self[i] for i in range(len(self)))

    @property
    def image_size(self) -> int:
        """Side of the square images."""
        return int(self.images.shape[1])

    def subset(self, ids: Union[Sequence[int], IndexArray]) -> "FaceDataset":
        """Return the samples ``ids`` as a new dataset, in the given order."""
        index = np.asarray(ids, dtype=np.int64)
        return FaceDataset(
            self.images[index], self.corners[index], self.gaze[index], self.head[index], self.subject[index]
        )

    def split(self, name: str) -> "FaceDataset":
        """Return the ``train`` or ``test`` split recorded in the manifest."""
        if self.manifest is None:
            raise DomainError("Dataset has no manifest to take splits from")
        if name not in ("train", "test"):
            raise DomainError("Unknown split `%s`" % name)
        return self.subset(self.manifest.train_ids if name == "train" else self.manifest.test_ids)

    @property
    def train(self) -> "FaceDataset":
        """Train split."""
        return self.split("train")

    @property
    def test(self) -> "FaceDataset":
        """Test split."""
        return self.split("test")

    def order(self, seed: Optional[int] = None) -> IndexArray:
        """Return sample order: stored order, or a permutation reproducible from ``seed``."""
        if seed is None:
            return np.arange(len(self), dtype=np.int64)
        return np.random.default_rng(seed).permutation(len(self)).astype(np.int64)

    def batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[List[FaceSample]]:
        """Yield lists of at most ``batch_size`` samples in :meth:`order`."""
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        order = self.order(seed)
        for start in range(0, len(order), batch_size):
            yield [self[int(i)] for i in order[start : start + batch_size]]


def _ellipse_alpha(x: FloatArray, y: FloatArray, center: Tuple[float, float], axes: Tuple[float, float]) -> FloatArray:
    """Anti-aliased coverage of an axis-aligned ellipse, with a one-pixel edge ramp."""
    a, b = axes
    r = np.sqrt(((x - center[0]) / a) ** 2 + ((y - center[1]) / b) ** 2)
    return np.clip(0.5 - (r - 1.0) * min(a, b), 0.0, 1.0)


def _bilinear(table: FloatArray, x: FloatArray, y: FloatArray, size: int) -> FloatArray:
    """Sample a coarse ``(c+1) x (c+1)`` table spanning the image at pixel coordinates ``(x, y)``."""
    cells = table.shape[0] - 1
    u = np.clip(x / size * cells, 0.0, cells)
    v = np.clip(y / size * cells, 0.0, cells)
    i0 = np.minimum(np.floor(v).astype(np.int64), cells - 1)
    j0 = np.minimum(np.floor(u).astype(np.int64), cells - 1)
    fv, fu = v - i0, u - j0
    top = table[i0, j0] * (1 - fu) + table[i0, j0 + 1] * fu
    bottom = table[i0 + 1, j0] * (1 - fu) + table[i0 + 1, j0 + 1] * fu
    return top * (1 - fv) + bottom * fv


def _scaled(
    shape: Tuple[Tuple[float, float], Tuple[float, float]], size: int
) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    (cx, cy), (a, b) = shape
    return (cx * size, cy * size), (a * size, b * size)


def _blend(canvas: FloatArray, color: FloatArray, alpha: FloatArray) -> FloatArray:
    return canvas * (1.0 - alpha[..., None]) + color * alpha[..., None]


def _head_transform(head: HeadPose, params: SynthParams) -> Tuple[FloatArray, FloatArray]:
    """Return the canonical-to-canvas linear map and translation for ``head``."""
    size = params.image_size
    roll = params.roll_gain * head.yaw
    rotation = np.array([[math.cos(roll), -math.sin(roll)], [math.sin(roll), math.cos(roll)]])
    scale = np.diag([1.0 - 0.2 * (1.0 - math.cos(head.yaw)), 1.0 - 0.2 * (1.0 - math.cos(head.pitch))])
    shift = params.head_gain * size * np.array([math.sin(head.yaw), math.sin(head.pitch)])
    return rotation @ scale, shift


def canonical_corners(style: SubjectStyle, params: SynthParams) -> FloatArray:
    """Return the four eye corners (left eye outer/inner, right eye inner/outer) in the canonical frame."""
    size = params.image_size
    a = EYE_AXES[0] * size * style.eye_scale
    points = []
    for cx, cy in EYE_CENTERS:
        points.extend([(cx * size - a, cy * size), (cx * size + a, cy * size)])
    return np.array(points, dtype=np.float64)


def render_sample(
    gaze: Tuple[float, float], head: Tuple[float, float], style_seed: int, params: SynthParams
) -> FaceSample:
    """Render one face.

    :param gaze: Absolute (pitch, yaw) gaze, within ``params.gaze_range`` per axis.
    :param head: Head (pitch, yaw), within ``params.head_range`` per axis.
    :param style_seed: Subject id; selects the subject style.
    :returns: The sample; its image is float32 in [0, 1] and its corners are the transformed canonical corners.
    :raises: DomainError when the angles are out of range or the iris center leaves an eye.
    """
    gaze = GazeDirection(float(gaze[0]), float(gaze[1]))
    head = HeadPose(float(head[0]), float(head[1]))
    if max(map(abs, gaze)) > params.gaze_range + RANGE_SLACK or max(map(abs, head)) > params.head_range + RANGE_SLACK:
        raise DomainError(
            "Gaze %s or head %s outside ranges (+-%s, +-%s)" % (gaze, head, params.gaze_range, params.head_range)
        )

    size = params.image_size
    style = SubjectStyle.from_seed(style_seed)
    eye = gaze_in_head(gaze, head)
    offset = np.array([params.gain * eye.yaw, params.gain * eye.pitch])
    eye_axes = (EYE_AXES[0] * size * style.eye_scale, EYE_AXES[1] * size * style.eye_scale)
    if (offset[0] / eye_axes[0]) ** 2 + (offset[1] / eye_axes[1]) ** 2 >= 1.0:
        raise DomainError("Iris center leaves the eye for gaze %s and head %s" % (gaze, head))

    # Inverse-map every pixel center into the canonical frame.
    linear, shift = _head_transform(head, params)
    center = np.array([size / 2.0, size / 2.0])
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    points = np.stack([xs - center[0] - shift[0], ys - center[1] - shift[1]], axis=-1) @ np.linalg.inv(linear).T
    x, y = points[..., 0] + center[0], points[..., 1] + center[1]

    canvas = np.broadcast_to(style.background, (size, size, 3)).copy()
    face_alpha = _ellipse_alpha(x, y, *_scaled((FACE_CENTER, FACE_AXES), size))
    noise = style.noise_amplitude * _bilinear(style.texture, x, y, size)
    canvas = canvas * (1.0 - face_alpha[..., None]) + (style.skin + noise[..., None]) * face_alpha[..., None]

    canvas = _blend(canvas, style.skin * 0.88, _ellipse_alpha(x, y, *_scaled(NOSE, size)))
    canvas = _blend(canvas, style.skin * np.array([0.75, 0.4, 0.4]), _ellipse_alpha(x, y, *_scaled(MOUTH, size)))

    iris_radius = IRIS_RADIUS * size * style.eye_scale
    for cx, cy in EYE_CENTERS:
        eye_center = (cx * size, cy * size)
        eye_alpha = _ellipse_alpha(x, y, eye_center, eye_axes)
        canvas = _blend(canvas, np.full(3, SCLERA), eye_alpha)
        iris_center = (eye_center[0] + offset[0], eye_center[1] + offset[1])
        iris_alpha = _ellipse_alpha(x, y, iris_center, (iris_radius, iris_radius)) * eye_alpha
        canvas = _blend(canvas, style.iris, iris_alpha)

    corners = (canonical_corners(style, params) - center) @ linear.T + center + shift
    if np.any(corners < 0) or np.any(corners >= size):
        raise DomainError("Eye corners leave the image for head %s" % (head,))

    return FaceSample(
        image=np.clip(canvas, 0.0, 1.0).astype(np.float32),
        corners=corners.astype(np.float32),
        gaze=gaze,
        head=head,
        subject_id=int(style_seed),
    )


def iris_centroids(image: FloatArray, corners: FloatArray) -> FloatArray:
    """Read the iris back from pixels: per eye, the darkness-weighted centroid minus the corner midpoint.

    Darkness is ``max(IRIS_DARKNESS - gray, 0)`` inside a box around each eye spanning its corners horizontally and
    70% of that vertically. Returns a ``2 x 2`` array of (dx, dy) pixel offsets, left eye first.

    :raises: DomainError when an eye box holds no dark pixels.
    """
    gray = np.asarray(image, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    size = gray.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    corners = np.asarray(corners, dtype=np.float64).reshape(4, 2)

    offsets = []
    for pair in (corners[0:2], corners[2:4]):
        mid = pair.mean(axis=0)
        half_width = 0.5 * float(np.linalg.norm(pair[1] - pair[0]))
        box = (np.abs(xs - mid[0]) <= half_width) & (np.abs(ys - mid[1]) <= 0.7 * half_width)
        weight = np.clip(IRIS_DARKNESS - gray, 0.0, None) * box
        total = weight.sum()
        if total <= 0:
            raise DomainError("No iris pixels found around eye center %s" % mid.tolist())
        offsets.append([(weight * xs).sum() / total - mid[0], (weight * ys).sum() / total - mid[1]])
    return np.array(offsets)


def _split_subjects(subject_ids: Sequence[int], train_fraction: float) -> Tuple[List[int], List[int]]:
    present = sorted(set(subject_ids))
    if len(present) < 2:
        raise ConfigError("Need at least 2 subjects for a train/test split, got %s" % len(present))
    n_train = min(max(int(math.floor(train_fraction * len(present) + 0.5)), 1), len(present) - 1)
    return present[:n_train], present[n_train:]


def generate_dataset(
    n: int,
    params: SynthParams,
    seed: int,
    out_dir: Union[str, Path],
    subjects: int = 10,
    train_fraction: float = 0.8,
) -> DatasetManifest:
    """Render ``n`` samples and write them as a dataset directory.

    Gaze and head angles are drawn uniformly within their ranges and rounded to float32 before rendering, so stored
    labels are exactly the rendered ones. Subjects are cycled over the samples and split whole, so train and test
    never share a subject.

    :raises: ConfigError for fewer than 2 subjects; BlobStoreError when the directory cannot be written.
    """
    if n < 1 or subjects < 1:
        raise ConfigError("Sample and subject counts must be positive, got n=%s, subjects=%s" % (n, subjects))
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1), got %s" % train_fraction)

    subject_ids = [params.subject_offset + i % subjects for i in range(n)]
    train_subjects, _ = _split_subjects(subject_ids, train_fraction)

    log.info("Generate %s samples of %s subjects, size=%s, seed=%s", n, subjects, params.image_size, seed)
    rng = np.random.default_rng(seed)
    gaze = rng.uniform(-params.gaze_range, params.gaze_range, size=(n, 2)).astype(np.float32)
    head = rng.uniform(-params.head_range, params.head_range, size=(n, 2)).astype(np.float32)

    size = params.image_size
    images = np.empty((n, size, size, 3), dtype=np.float32)
    corners = np.empty((n, 4, 2), dtype=np.float32)
    for i in range(n):
        sample = render_sample(gaze[i].tolist(), head[i].tolist(), subject_ids[i], params)
        images[i], corners[i] = sample.image, sample.corners

    train_set = set(train_subjects)
    train_ids = [i for i, s in enumerate(subject_ids) if s in train_set]
    test_ids = [i for i, s in enumerate(subject_ids) if s not in train_set]

    meta = {
        "count": n,
        "image_size": size,
        "seed": seed,
        "subjects": subjects,
        "train_fraction": train_fraction,
        "params": params.to_dict(),
        "splits": {"train": train_ids, "test": test_ids},
    }
    tensors = {
        "images": images,
        "corners": corners,
        "gaze": gaze,
        "head": head,
        "subject": np.asarray(subject_ids, dtype=np.float32),
    }
    out_dir = Path(out_dir)
    manifest = BlobStore(out_dir, DATASET_KIND).write(tensors, meta)
    log.info("Wrote dataset to %s, train=%s, test=%s", out_dir, len(train_ids), len(test_ids))
    return DatasetManifest.from_manifest(out_dir, manifest)


def load_dataset(path: Union[str, Path]) -> FaceDataset:
    """Load a dataset directory (or its ``manifest.json``).

    Every blob is validated against the manifest before anything is returned.

    :raises: DatasetLoadError naming the blob that is missing, truncated, or fails its checksum or shape.
    """
    path = Path(path)
    directory = path.parent if path.name.endswith(".json") else path
    store = BlobStore(directory, DATASET_KIND)
    log.info("Load dataset from %s", directory)
    try:
        raw = store.read_manifest()
        tensors = store.read(["images", "corners", "gaze", "head", "subject"])
    except BlobStoreError as e:
        raise DatasetLoadError(str(e)) from e

    manifest = DatasetManifest.from_manifest(directory, raw)
    n, size = manifest.count, manifest.image_size
    expected = {
        "images": (n, size, size, 3),
        "corners": (n, 4, 2),
        "gaze": (n, 2),
        "head": (n, 2),
        "subject": (n,),
    }
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DatasetLoadError("Blob `%s` has shape %s, expected %s" % (name, tensors[name].shape, shape))
    if set(manifest.train_ids) & set(manifest.test_ids):
        raise DatasetLoadError("Train and test splits overlap in %s" % directory)

    return FaceDataset(
        images=tensors["images"],
        corners=tensors["corners"],
        gaze=tensors["gaze"],
        head=tensors["head"],
        subject=tensors["subject"].astype(np.int64),
        manifest=manifest,
    )


class DatasetLoadError(BlobStoreError):
    """Raised when a dataset directory is missing, corrupt, or inconsistent with its manifest."""
