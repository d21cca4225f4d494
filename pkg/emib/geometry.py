"""Gaze angle conversions, the angular error metric, and eye-patch window geometry.

Gaze and head pose are (pitch, yaw) pairs in radians. The 3D form uses a camera looking along -z::

    v = (-cos(pitch) * sin(yaw), -sin(pitch), -cos(pitch) * cos(yaw))
"""

import math

from dataclasses import dataclass
from logging import getLogger
from typing import FrozenSet, NamedTuple, Sequence, Tuple

import numpy as np

from emib._base import ConfigError, DomainError
from emib._types import FloatArray

log = getLogger(__name__)

PITCH_LIMIT = math.pi / 2
YAW_LIMIT = math.pi


class GazeDirection(NamedTuple):
    """Where a subject looks, as pitch (vertical) and yaw (horizontal) in radians."""

    pitch: float
    yaw: float


class HeadPose(NamedTuple):
    """Head rotation relative to the camera, as pitch and yaw in radians."""

    pitch: float
    yaw: float


@dataclass(frozen=True)
class PatchGrid:
    """Square image split into square patches, numbered row-major."""

    image_size: int
    patch_size: int

    def __post_init__(self) -> None:
        """Validate divisibility."""
        if self.patch_size <= 0 or self.image_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                "Image size %s must be a positive multiple of patch size %s" % (self.image_size, self.patch_size)
            )

    @property
    def rows(self) -> int:
        """Patch rows (equal to columns)."""
        return self.image_size // self.patch_size

    @property
    def cols(self) -> int:
        """Patch columns."""
        return self.rows

    @property
    def n_patches(self) -> int:
        """Number of patches."""
        return self.rows * self.cols

    @property
    def token_dim(self) -> int:
        """Length of a flattened RGB patch."""
        return self.patch_size * self.patch_size * 3

    def index(self, row: int, col: int) -> int:
        """Return the row-major index of patch (row, col)."""
        return row * self.cols + col

    def position(self, index: int) -> Tuple[int, int]:
        """Return (row, col) of a patch index."""
        return divmod(index, self.cols)


@dataclass(frozen=True)
class EyeRegion:
    """Patch windows covering both eyes."""

    left: FrozenSet[int]
    right: FrozenSet[int]
    rows: int
    cols: int

    @property
    def both(self) -> FrozenSet[int]:
        """Union of both windows."""
        return self.left | self.right

    def indices(self) -> np.ndarray:
        """Return the sorted union as an int64 array."""
        return np.array(sorted(self.both), dtype=np.int64)


def _check_angles(pitch: float, yaw: float) -> None:
    if not (np.isfinite(pitch) and np.isfinite(yaw)):
        raise DomainError("Angles must be finite, got pitch=%s, yaw=%s" % (pitch, yaw))
    if abs(pitch) > PITCH_LIMIT or abs(yaw) > YAW_LIMIT:
        raise DomainError("Angles out of range: pitch=%s (|pitch| <= pi/2), yaw=%s (|yaw| <= pi)" % (pitch, yaw))


def pitchyaw_to_vector(g: Tuple[float, float]) -> FloatArray:
    """Return the unit 3-vector of a (pitch, yaw) direction.

    :raises: DomainError when pitch is outside [-pi/2, pi/2] or yaw outside [-pi, pi].
    """
    pitch, yaw = float(g[0]), float(g[1])
    _check_angles(pitch, yaw)
    return np.array(
        [-math.cos(pitch) * math.sin(yaw), -math.sin(pitch), -math.cos(pitch) * math.cos(yaw)], dtype=np.float64
    )


def pitchyaw_to_vectors(angles: FloatArray) -> FloatArray:
    """Vectorized :func:`pitchyaw_to_vector` over an (n, 2) array."""
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(angles)):
        raise DomainError("Angles must be finite")
    if np.any(np.abs(angles[:, 0]) > PITCH_LIMIT) or np.any(np.abs(angles[:, 1]) > YAW_LIMIT):
        raise DomainError("Angles out of range")
    pitch, yaw = angles[:, 0], angles[:, 1]
    return np.stack([-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=1)


def vector_to_pitchyaw(v: Sequence[float]) -> GazeDirection:
    """Return the (pitch, yaw) of a 3-vector; the vector is normalized first."""
    x, y, z = (float(c) for c in v)
    norm = math.sqrt(x * x + y * y + z * z)
    if norm == 0.0:
        raise DomainError("Cannot convert the zero vector to angles")
    x, y, z = x / norm, y / norm, z / norm
    return GazeDirection(math.asin(max(-1.0, min(1.0, -y))), math.atan2(-x, -z))


def angular_error(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Return the angle in degrees between two gaze directions."""
    cos = float(np.dot(pitchyaw_to_vector(a), pitchyaw_to_vector(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


def angular_errors(predicted: FloatArray, target: FloatArray) -> FloatArray:
    """Return per-row angular errors in degrees between two (n, 2) arrays of (pitch, yaw).

    Predicted angles are clipped into the valid ranges first, since probe outputs are unconstrained.
    """
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    predicted = np.stack(
        [np.clip(predicted[:, 0], -PITCH_LIMIT, PITCH_LIMIT), np.clip(predicted[:, 1], -YAW_LIMIT, YAW_LIMIT)], axis=1
    )
    cos = np.sum(pitchyaw_to_vectors(predicted) * pitchyaw_to_vectors(target), axis=1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def head_rotation(head: Tuple[float, float]) -> FloatArray:
    """Return the rotation matrix mapping straight-ahead (0, 0, -1) onto the head direction.

    Composition order is yaw after pitch, so ``head_rotation(h) @ pitchyaw_to_vector(e)`` is the camera-frame
    direction of an eye rotated by ``e`` inside the head.
    """
    pitch, yaw = float(head[0]), float(head[1])
    _check_angles(pitch, yaw)
    cp, sp = math.cos(-pitch), math.sin(-pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rot_y @ rot_x


def gaze_in_head(gaze: Tuple[float, float], head: Tuple[float, float]) -> GazeDirection:
    """Return the eye-in-head rotation whose composition with ``head`` gives ``gaze``."""
    return vector_to_pitchyaw(head_rotation(head).T @ pitchyaw_to_vector(gaze))


def compose_gaze(head: Tuple[float, float], eye: Tuple[float, float]) -> GazeDirection:
    """Return the camera-frame gaze of an eye rotation ``eye`` inside a head posed at ``head``."""
    return vector_to_pitchyaw(head_rotation(head) @ pitchyaw_to_vector(eye))


def _window_start(anchor: int, before: int, size: int, limit: int) -> int:
    return min(max(anchor - before, 0), limit - size)


def eye_patch_windows(corners: Sequence[Sequence[float]], grid: PatchGrid, rows: int, cols: int) -> EyeRegion:
    """Return the patch windows around both eye centers.

    ``corners`` holds four (x, y) pixel points: the two corners of the left eye, then the two corners of the right
    eye. Each eye center is the midpoint of its corners and anchors the window at the patch containing it. The window
    spans rows ``r0 - (rows - 1) // 2`` onwards and columns ``c0 - cols // 2`` onwards, shifted back inside the grid at
    borders so it always holds exactly ``rows * cols`` patches.

    :raises: ConfigError when the window does not fit the grid; DomainError for points outside the image or
        overlapping windows.
    """
    if rows < 1 or cols < 1 or rows > grid.rows or cols > grid.cols:
        raise ConfigError("Eye window %sx%s does not fit a %sx%s grid" % (rows, cols, grid.rows, grid.cols))

    points = np.asarray(corners, dtype=np.float64)
    if points.shape != (4, 2):
        raise DomainError("Expected 4 corner points of shape (4, 2), got %s" % (points.shape,))
    if np.any(points < 0) or np.any(points >= grid.image_size) or not np.all(np.isfinite(points)):
        raise DomainError("Corner points must lie inside the %s px image: %s" % (grid.image_size, points.tolist()))

    windows = []
    for eye in (points[0:2], points[2:4]):
        cx, cy = eye.mean(axis=0)
        r0 = min(int(cy // grid.patch_size), grid.rows - 1)
        c0 = min(int(cx // grid.patch_size), grid.cols - 1)
        row_start = _window_start(r0, (rows - 1) // 2, rows, grid.rows)
        col_start = _window_start(c0, cols // 2, cols, grid.cols)
        windows.append(
            frozenset(
                grid.index(r, c)
                for r in range(row_start, row_start + rows)
                for c in range(col_start, col_start + cols)
            )
        )

    if windows[0] & windows[1]:
        raise DomainError("Eye windows overlap; eye centers are too close for a %sx%s window" % (rows, cols))

    log.debug("Eye windows: left=%s, right=%s", sorted(windows[0]), sorted(windows[1]))
    return EyeRegion(left=windows[0], right=windows[1], rows=rows, cols=cols)
