"""Image/patch-token conversion, sin-cos positional tables, and mask plans.

Patch order is row-major everywhere. A token is the row-major flattening of its ``patch x patch x 3`` pixel block.
Mask cardinalities round half away from zero, so 75% of 196 patches is 147.
"""

import math

from dataclasses import dataclass
from functools import lru_cache
from logging import getLogger
from typing import List, Union

import numpy as np
import torch

from emib._base import ConfigError, DomainError
from emib._types import ArrayOrTensor, FloatArray, IndexArray
from emib.geometry import EyeRegion, PatchGrid

log = getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    """Partition of the patch grid into masked and visible patches for one forward pass."""

    masked: IndexArray
    visible: IndexArray
    eye: IndexArray
    total_ratio: float

    @property
    def targets(self) -> IndexArray:
        """Patches scored by the reconstruction loss: the eye set, or every masked patch when there is none."""
        return self.eye if len(self.eye) else self.masked

    def __eq__(self, other: object) -> bool:
        """Compare index sets and ratio."""
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (
            np.array_equal(self.masked, other.masked)
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.eye, other.eye)
            and self.total_ratio == other.total_ratio
        )

    def __hash__(self) -> int:
        """Hash the masked set."""
        return hash(self.masked.tobytes())


def mask_count(total_ratio: float, n_patches: int) -> int:
    """Return ``round(total_ratio * n_patches)`` with halves rounded away from zero."""
    return int(math.floor(total_ratio * n_patches + 0.5))


def _plan(masked: ArrayOrTensor, eye: ArrayOrTensor, grid: PatchGrid) -> MaskPlan:
    masked_sorted = np.unique(np.asarray(masked, dtype=np.int64))
    visible = np.setdiff1d(np.arange(grid.n_patches, dtype=np.int64), masked_sorted)
    eye_sorted = np.unique(np.asarray(eye, dtype=np.int64))
    return MaskPlan(
        masked=masked_sorted,
        visible=visible,
        eye=eye_sorted,
        total_ratio=len(masked_sorted) / grid.n_patches,
    )


def patchify(image: ArrayOrTensor, grid: PatchGrid) -> ArrayOrTensor:
    """Split an ``H x W x 3`` image (or a batch ``B x H x W x 3``) into ``n_patches x token_dim`` tokens.

    Works on numpy arrays and torch tensors alike and returns the same type.

    :raises: DomainError on a shape that does not match the grid.
    """
    batched = image.ndim == 4
    expected = (grid.image_size, grid.image_size, 3)
    if tuple(image.shape[-3:]) != expected or image.ndim not in (3, 4):
        raise DomainError("Expected image of shape %s, got %s" % (expected, tuple(image.shape)))

    x = image if batched else image[None]
    n, p, g = x.shape[0], grid.patch_size, grid.rows
    x = x.reshape(n, g, p, g, p, 3)
    x = np.transpose(x, (0, 1, 3, 2, 4, 5)) if isinstance(x, np.ndarray) else x.permute(0, 1, 3, 2, 4, 5)
    tokens = x.reshape(n, grid.n_patches, grid.token_dim)
    return tokens if batched else tokens[0]


def unpatchify(tokens: ArrayOrTensor, grid: PatchGrid) -> ArrayOrTensor:
    """Exact inverse of :func:`patchify`.

    :raises: DomainError on a shape that does not match the grid.
    """
    batched = tokens.ndim == 3
    expected = (grid.n_patches, grid.token_dim)
    if tuple(tokens.shape[-2:]) != expected or tokens.ndim not in (2, 3):
        raise DomainError("Expected tokens of shape %s, got %s" % (expected, tuple(tokens.shape)))

    x = tokens if batched else tokens[None]
    n, p, g = x.shape[0], grid.patch_size, grid.rows
    x = x.reshape(n, g, g, p, p, 3)
    x = np.transpose(x, (0, 1, 3, 2, 4, 5)) if isinstance(x, np.ndarray) else x.permute(0, 1, 3, 2, 4, 5)
    image = x.reshape(n, grid.image_size, grid.image_size, 3)
    return image if batched else image[0]


def _sincos_1d(dim: int, positions: FloatArray) -> FloatArray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(positions.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=32)
def _sincos_table(rows: int, cols: int, dim: int) -> FloatArray:
    grid_h, grid_w = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    table = np.concatenate([_sincos_1d(dim // 2, grid_h), _sincos_1d(dim // 2, grid_w)], axis=1)
    table.setflags(write=False)
    return table


def sincos_pos_embed(grid: PatchGrid, dim: int) -> FloatArray:
    """Return the fixed 2D sine-cosine positional table, ``n_patches x dim``.

    The first half of the channels encodes the patch row, the second half the column. Within a half, channel ``i``
    uses frequency ``1 / 10000 ** (i / (dim / 4))``, sines before cosines. Tables are cached per (grid, dim).

    :raises: ConfigError unless ``dim`` is divisible by 4.
    """
    if dim % 4:
        raise ConfigError("Positional embedding width must be divisible by 4, got %s" % dim)
    return _sincos_table(grid.rows, grid.cols, dim)


def make_reconstruction_mask(
    eyes: EyeRegion, total_ratio: float, grid: PatchGrid, rng: np.random.Generator
) -> MaskPlan:
    """Return a plan masking both eye windows plus random facial patches up to ``total_ratio``.

    :raises: ConfigError when ``total_ratio`` cannot cover the eye set; the message names the minimum ratio.
    """
    return _eye_plus_random(eyes.indices(), total_ratio, grid, rng)


def make_single_eye_mask(
    eyes: EyeRegion, total_ratio: float, grid: PatchGrid, rng: np.random.Generator
) -> MaskPlan:
    """Return a plan masking one uniformly chosen eye window plus random facial patches up to ``total_ratio``.

    The other eye is treated as an ordinary facial patch and may or may not be masked.
    """
    window = eyes.left if rng.integers(2) == 0 else eyes.right
    return _eye_plus_random(np.array(sorted(window), dtype=np.int64), total_ratio, grid, rng)


def make_random_mask(total_ratio: float, grid: PatchGrid, rng: np.random.Generator) -> MaskPlan:
    """Return a plan masking uniformly random patches, with no eye set."""
    return _eye_plus_random(np.zeros(0, dtype=np.int64), total_ratio, grid, rng)


def _eye_plus_random(eye: IndexArray, total_ratio: float, grid: PatchGrid, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= total_ratio <= 1.0:
        raise ConfigError("Mask ratio must be in [0, 1], got %s" % total_ratio)

    n_masked = mask_count(total_ratio, grid.n_patches)
    if n_masked < len(eye):
        minimum = len(eye) / grid.n_patches
        raise ConfigError(
            "Mask ratio %s masks %s patches, fewer than the %s eye patches; minimum feasible ratio is %.6f"
            % (total_ratio, n_masked, len(eye), minimum)
        )

    facial = np.setdiff1d(np.arange(grid.n_patches, dtype=np.int64), eye)
    extra = rng.choice(facial, size=n_masked - len(eye), replace=False)
    return _plan(np.concatenate([eye, extra]), eye, grid)


def make_injection_mask(eyes: EyeRegion, grid: PatchGrid, rng: np.random.Generator) -> MaskPlan:
    """Return the injection-branch plan: both eyes with probability 0.5, otherwise one eye chosen uniformly.

    Every non-eye patch stays visible.
    """
    if rng.random() < 0.5:
        masked = eyes.both
    else:
        masked = eyes.left if rng.integers(2) == 0 else eyes.right
    indices = np.array(sorted(masked), dtype=np.int64)
    return _plan(indices, indices, grid)


def make_full_view(grid: PatchGrid) -> MaskPlan:
    """Return the evaluation-time injection plan: nothing masked."""
    empty = np.zeros(0, dtype=np.int64)
    return _plan(empty, empty, grid)


def make_full_mask(eyes: Union[EyeRegion, None], grid: PatchGrid) -> MaskPlan:
    """Return a plan masking every patch (autoencoder mode), keeping the eye set when given."""
    eye = eyes.indices() if eyes is not None else np.zeros(0, dtype=np.int64)
    return _plan(np.arange(grid.n_patches, dtype=np.int64), eye, grid)


def as_index_tensor(plans_indices: List[IndexArray]) -> torch.Tensor:
    """Stack equally sized index arrays into a ``B x L`` long tensor."""
    lengths = {len(p) for p in plans_indices}
    if len(lengths) > 1:
        raise DomainError("Index sets of one batch must share a length, got %s" % sorted(lengths))
    return torch.from_numpy(np.stack(plans_indices).astype(np.int64))
