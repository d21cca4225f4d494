"""Weight-shared ViT encoder, masked decoder with an injection token, and the dual-branch forward pass.

The reconstruction branch encodes the patches its plan leaves visible. The injection branch encodes the (nearly) full
face with the *same* encoder, pools the latents, squeezes them through a purely linear bottleneck down to ``z_dim``
and back up to the decoder width, and hands the result to the decoder as one extra token without a position.
"""

import copy

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from timm.models.vision_transformer import Block
from torch import nn

from emib._base import DomainError
from emib.config import ModelConfig
from emib.masking import MaskPlan, as_index_tensor, patchify, sincos_pos_embed

log = getLogger(__name__)


@dataclass
class ForwardOutput:
    """Result of :meth:`EMIBModel.forward_emib` for a batch."""

    pred_pixels: torch.Tensor
    z_b: Optional[torch.Tensor]
    z_o: torch.Tensor
    inj_token: Optional[torch.Tensor]


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select rows ``index`` (B x L) of ``x`` (B x N x D)."""
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class Encoder(nn.Module):
    """Linear patch projection, fixed sin-cos positions, and a stack of transformer blocks."""

    def __init__(self, cfg: ModelConfig) -> None:
        """Build layers from ``cfg.encoder``."""
        super().__init__()
        enc = cfg.encoder
        self.dim = enc.dim
        self.patch_proj = nn.Linear(cfg.grid.token_dim, enc.dim)
        self.blocks = nn.ModuleList(
            [Block(enc.dim, enc.heads, enc.mlp_ratio, qkv_bias=True, norm_layer=nn.LayerNorm) for _ in range(enc.depth)]
        )
        self.norm = nn.LayerNorm(enc.dim)
        table = torch.from_numpy(np.array(sincos_pos_embed(cfg.grid, enc.dim), dtype=np.float32))
        self.register_buffer("pos_embed", table, persistent=False)

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encode ``tokens`` (B x L x token_dim) that sit at grid ``positions`` (B x L)."""
        if tokens.shape[:2] != positions.shape:
            raise DomainError("Got %s token rows for %s positions" % (tuple(tokens.shape[:2]), tuple(positions.shape)))
        if tokens.shape[1] == 0:
            return tokens.new_zeros(tokens.shape[0], 0, self.dim)

        x = self.patch_proj(tokens) + self.pos_embed[positions]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class EMIBModel(nn.Module):
    """Eye-masked autoencoder with a full-face injection bottleneck."""

    def __init__(self, cfg: ModelConfig) -> None:
        """Build the model described by ``cfg``; weights are initialized by :func:`build_model`."""
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.grid
        dec = cfg.decoder

        self.encoder = Encoder(cfg)
        self._separate_encoder = None if cfg.weight_sharing else Encoder(cfg)

        pool_dim = cfg.encoder.dim if cfg.pool_source == "encoder" else dec.dim
        self.down_proj = nn.Linear(pool_dim, cfg.bottleneck.z_dim, bias=False)
        self.up_proj = nn.Linear(cfg.bottleneck.z_dim, dec.dim, bias=False)

        self.decoder_embed = nn.Linear(cfg.encoder.dim, dec.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dec.dim))
        self.decoder_blocks = nn.ModuleList(
            [Block(dec.dim, dec.heads, dec.mlp_ratio, qkv_bias=True, norm_layer=nn.LayerNorm) for _ in range(dec.depth)]
        )
        self.decoder_norm = nn.LayerNorm(dec.dim)
        self.decoder_pred = nn.Linear(dec.dim, self.grid.token_dim)
        table = torch.from_numpy(np.array(sincos_pos_embed(self.grid, dec.dim), dtype=np.float32))
        self.register_buffer("decoder_pos_embed", table, persistent=False)

    @property
    def injection_encoder(self) -> Encoder:
        """Encoder of the full-face branch; the reconstruction encoder itself when weights are shared."""
        return self.encoder if self._separate_encoder is None else self._separate_encoder

    def encoder_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        """Yield the named encoder parameters (theta), of both encoders when weights are not shared."""
        yield from (("encoder." + n, p) for n, p in self.encoder.named_parameters())
        if self._separate_encoder is not None:
            yield from (("_separate_encoder." + n, p) for n, p in self._separate_encoder.named_parameters())

    def initialize_weights(self) -> None:
        """Truncated-normal (std 0.02) linear weights and mask token, zero biases, unit LayerNorm."""
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.apply(_init_weights)

    def encode(self, tokens: torch.Tensor, positions: torch.Tensor, injection: bool = False) -> torch.Tensor:
        """Return latents of visible ``tokens`` at grid ``positions``.

        Accepts a single sample (L x token_dim with L positions) or a batch (B x L x token_dim with B x L positions).
        """
        single = tokens.ndim == 2
        if single:
            tokens, positions = tokens.unsqueeze(0), positions.unsqueeze(0)
        encoder = self.injection_encoder if injection else self.encoder
        latents = encoder(tokens, positions.long())
        return latents[0] if single else latents

    def pool(self, latents: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Mean-pool full-face latents (B x L x dim) into one vector per sample, before the down-projection.

        With ``pool_source == "decoder"`` the latents first run through the decoder blocks.
        """
        if latents.shape[1] == 0:
            raise DomainError("Cannot pool an empty latent set")
        if self.cfg.pool_source == "decoder":
            x = self.decoder_embed(latents) + self.decoder_pos_embed[positions]
            for block in self.decoder_blocks:
                x = block(x)
            latents = self.decoder_norm(x)
        return latents.mean(dim=1)

    def bottleneck_inject(
        self, latents: torch.Tensor, positions: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(z_b, inj_token)``: the pooled latents squeezed to ``z_dim`` and expanded to the decoder width.

        Accepts L x dim or B x L x dim latents; ``positions`` are only needed for decoder pooling.

        :raises: DomainError on an empty latent set.
        """
        single = latents.ndim == 2
        if single:
            latents = latents.unsqueeze(0)
            positions = positions.unsqueeze(0) if positions is not None else None
        if positions is None:
            positions = torch.arange(latents.shape[1]).unsqueeze(0).expand(latents.shape[0], -1)
        z_b = self.down_proj(self.pool(latents, positions.long()))
        inj_token = self.up_proj(z_b)
        return (z_b[0], inj_token[0]) if single else (z_b, inj_token)

    def decode(
        self,
        visible_latents: torch.Tensor,
        visible_positions: torch.Tensor,
        masked_positions: torch.Tensor,
        inj_token: Optional[torch.Tensor],
    ) -> torch.Tensor:
        """Predict pixels of every patch, returned in grid order (B x n_patches x token_dim).

        The decoder sequence is the projected visible latents with positions, a mask token with position at every
        masked patch, and ``inj_token`` (when given) appended last without a position.

        :raises: DomainError unless visible and masked positions partition the grid.
        """
        single = visible_latents.ndim == 2
        if single:
            visible_latents = visible_latents.unsqueeze(0)
            visible_positions, masked_positions = visible_positions.unsqueeze(0), masked_positions.unsqueeze(0)
            inj_token = inj_token.unsqueeze(0) if inj_token is not None else None
        visible_positions, masked_positions = visible_positions.long(), masked_positions.long()

        batch = visible_latents.shape[0]
        order = torch.cat([visible_positions, masked_positions], dim=1)
        if order.shape[1] != self.grid.n_patches or not torch.equal(
            order.sort(dim=1).values, torch.arange(self.grid.n_patches).expand(batch, -1)
        ):
            raise DomainError("Visible and masked positions must partition the %s-patch grid" % self.grid.n_patches)

        parts = [self.decoder_embed(visible_latents) + self.decoder_pos_embed[visible_positions]]
        mask_tokens = self.mask_token.expand(batch, masked_positions.shape[1], -1)
        parts.append(mask_tokens + self.decoder_pos_embed[masked_positions])
        if inj_token is not None:
            parts.append(inj_token.unsqueeze(1))
        x = torch.cat(parts, dim=1)

        for block in self.decoder_blocks:
            x = block(x)
        x = self.decoder_pred(self.decoder_norm(x))[:, : self.grid.n_patches]

        pred = torch.zeros_like(x).scatter(1, order.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        return pred[0] if single else pred

    def full_face_injection(
        self, tokens: torch.Tensor, plans: Sequence[MaskPlan], detach: bool = False
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run the injection branch on a batch of tokens, each sample under its own injection plan.

        Samples are grouped by visible-set size so each group is one encoder call; results return in batch order.
        """
        batch = tokens.shape[0]
        z_rows: List[Optional[torch.Tensor]] = [None] * batch
        inj_rows: List[Optional[torch.Tensor]] = [None] * batch

        groups: Dict[int, List[int]] = dict()
        for i, plan in enumerate(plans):
            groups.setdefault(len(plan.visible), []).append(i)

        for size in sorted(groups):
            members = groups[size]
            positions = as_index_tensor([plans[i].visible for i in members])
            member_tokens = gather_rows(tokens[members], positions)
            latents = self.encode(member_tokens, positions, injection=True)
            if detach:
                latents = latents.detach()
            z_b, inj = self.bottleneck_inject(latents, positions)
            for row, i in enumerate(members):
                z_rows[i], inj_rows[i] = z_b[row], inj[row]

        return torch.stack(z_rows), torch.stack(inj_rows)  # type: ignore[arg-type]

    def forward_emib(
        self,
        images: torch.Tensor,
        recon_plans: Sequence[MaskPlan],
        inj_plans: Optional[Sequence[MaskPlan]] = None,
        detach_injection: bool = False,
        detach_reconstruction: bool = False,
    ) -> ForwardOutput:
        """Run both branches on a batch of ``B x S x S x 3`` images (or one ``S x S x 3`` image and single plans).

        The injection source follows ``cfg.injection``: ``full_face`` encodes the face under ``inj_plans``, ``self``
        pools the reconstruction branch's own latents, ``none`` decodes without an injection token. The detach flags
        treat one branch's encoder output as a constant; the gradient audit uses them.
        """
        single = images.ndim == 3
        if single:
            images = images.unsqueeze(0)
            recon_plans = [recon_plans] if isinstance(recon_plans, MaskPlan) else recon_plans
            if isinstance(inj_plans, MaskPlan):
                inj_plans = [inj_plans]

        tokens = patchify(images, self.grid)
        visible = as_index_tensor([p.visible for p in recon_plans])
        masked = as_index_tensor([p.masked for p in recon_plans])

        z_o = self.encode(gather_rows(tokens, visible), visible)
        if detach_reconstruction:
            z_o = z_o.detach()

        z_b: Optional[torch.Tensor] = None
        inj_token: Optional[torch.Tensor] = None
        if self.cfg.injection == "full_face":
            if inj_plans is None:
                raise DomainError("Full-face injection needs injection plans")
            z_b, inj_token = self.full_face_injection(tokens, inj_plans, detach=detach_injection)
        elif self.cfg.injection == "self" and visible.shape[1]:
            z_b, inj_token = self.bottleneck_inject(z_o, visible)

        pred = self.decode(z_o, visible, masked, inj_token)
        out = ForwardOutput(pred_pixels=pred, z_b=z_b, z_o=z_o, inj_token=inj_token)
        if single:
            out = ForwardOutput(
                pred_pixels=pred[0],
                z_b=z_b[0] if z_b is not None else None,
                z_o=z_o[0],
                inj_token=inj_token[0] if inj_token is not None else None,
            )
        return out


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(cfg: ModelConfig, seed: int = 0) -> EMIBModel:
    """Return a freshly initialized model; the same ``(cfg, seed)`` always yields identical weights."""
    log.info(
        "Build model, image=%s, patch=%s, z_dim=%s, seed=%s", cfg.image_size, cfg.patch_size, cfg.bottleneck.z_dim, seed
    )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EMIBModel(cfg)
        model.initialize_weights()
    return model


def clone_model(model: EMIBModel) -> EMIBModel:
    """Return an independent deep copy of ``model``."""
    return copy.deepcopy(model)
