"""Residual convolutional student that takes over the injection branch after distillation."""

from logging import getLogger
from typing import Sequence

import torch

from torch import nn

from emib.config import StudentConfig
from emib.geometry import PatchGrid
from emib.masking import MaskPlan, as_index_tensor, patchify
from emib.model import EMIBModel, ForwardOutput, gather_rows

log = getLogger(__name__)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with group normalization and an identity (or 1x1) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int) -> None:
        """Build the block."""
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(1, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(1, out_channels)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False), nn.GroupNorm(1, out_channels)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the block."""
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNetStudent(nn.Module):
    """Small ResNet mapping ``B x S x S x 3`` images to ``B x z_dim`` injection vectors."""

    def __init__(self, cfg: StudentConfig) -> None:
        """Build stages from ``cfg.widths`` and ``cfg.blocks``; every stage after the first halves the resolution."""
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.widths[0], 3, padding=1, bias=False), nn.GroupNorm(1, cfg.widths[0]), nn.ReLU()
        )
        layers = []
        in_channels = cfg.widths[0]
        for stage, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            for block in range(count):
                stride = 2 if stage > 0 and block == 0 else 1
                layers.append(BasicBlock(in_channels, width, stride))
                in_channels = width
        self.stages = nn.Sequential(*layers)
        self.head = nn.Linear(in_channels, cfg.z_dim)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Return the globally pooled last-stage features, before the z_dim head."""
        x = self.stages(self.stem(images.permute(0, 3, 1, 2)))
        return x.mean(dim=(2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Return one z_dim vector per image."""
        return self.head(self.features(images))


class DistilledModel(nn.Module):
    """Eye-masked autoencoder whose injection token comes from a convolutional student."""

    def __init__(self, emib: EMIBModel, student: ResNetStudent) -> None:
        """Pair a pretrained ``emib`` model with a ``student`` of the same z_dim."""
        super().__init__()
        self.emib = emib
        self.student = student

    @property
    def grid(self) -> PatchGrid:
        """Patch grid of the wrapped model."""
        return self.emib.grid

    def forward_emib(self, images: torch.Tensor, recon_plans: Sequence[MaskPlan]) -> ForwardOutput:
        """Reconstruct under ``recon_plans`` with the student's injection vector up-projected into the decoder."""
        tokens = patchify(images, self.emib.grid)
        visible = as_index_tensor([p.visible for p in recon_plans])
        masked = as_index_tensor([p.masked for p in recon_plans])
        z_o = self.emib.encode(gather_rows(tokens, visible), visible)
        z_b = self.student(images)
        inj_token = self.emib.up_proj(z_b)
        pred = self.emib.decode(z_o, visible, masked, inj_token)
        return ForwardOutput(pred_pixels=pred, z_b=z_b, z_o=z_o, inj_token=inj_token)


def build_student(cfg: StudentConfig, seed: int = 0) -> ResNetStudent:
    """Return a freshly initialized student; the same ``(cfg, seed)`` always yields identical weights."""
    log.info("Build student, widths=%s, blocks=%s, z_dim=%s", cfg.widths, cfg.blocks, cfg.z_dim)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ResNetStudent(cfg)
