"""Co-saliency network.

A shared five-block backbone (each block halves resolution) feeds two
collaborative branches: a classification branch (global average pool, then
parallel identity and OBC heads) and a saliency decoder built from four CS
blocks.  Each CS block upsamples the running decoder map x2 with fixed
bilinear interpolation, projects the upsampled map and one lateral backbone
stage to a common width with 1x1 convolutions, fuses them by pixel-wise
summation, and refines with two 3x3 convolutions.  The decoder emits a
1-channel logit map at half the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

TINY_STAGE_CHANNELS = (16, 32, 64, 96, 128)
PAPER_STAGE_CHANNELS = (64, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class NetworkConfig:
    stage_channels: tuple[int, int, int, int, int] = TINY_STAGE_CHANNELS
    n_identities: int = 2
    cs_channels: int = 32
    input_size: int = 64

    def __post_init__(self) -> None:
        if len(self.stage_channels) != 5 or any(c <= 0 for c in self.stage_channels):
            raise ConfigurationError("stage_channels must be 5 positive integers")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigurationError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.n_identities < 2:
            raise ConfigurationError("n_identities must be >= 2")
        if self.cs_channels <= 0:
            raise ConfigurationError("cs_channels must be positive")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]

    @classmethod
    def preset(cls, name: str, n_identities: int) -> "NetworkConfig":
        if name == "tiny":
            return cls(TINY_STAGE_CHANNELS, n_identities, cs_channels=32, input_size=64)
        if name == "paper":
            return cls(PAPER_STAGE_CHANNELS, n_identities, cs_channels=64, input_size=224)
        raise ConfigurationError(f"unknown network preset {name!r}")


@dataclass
class NetworkOutput:
    """All heads of one forward pass over one batch."""

    identity_logits: torch.Tensor  # B x n_identities
    obc_logits: torch.Tensor  # B x 2
    saliency_logits: torch.Tensor | None  # B x S/2 x S/2 (decoder-native)
    saliency_full: torch.Tensor | None  # B x S x S bilinear view
    feature: torch.Tensor  # B x embed_dim pooled backbone feature


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class _ConvBlock(nn.Module):
    """One backbone stage: stride-2 3x3 conv then a 3x3 conv, each with norm + ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
            _group_norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _group_norm(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class _CSBlock(nn.Module):
    """Co-saliency decoder block: upsample x2, fuse one lateral stage, refine."""

    def __init__(self, lateral_channels: int, cs_channels: int):
        super().__init__()
        self.proj_decoder = nn.Conv2d(cs_channels, cs_channels, 1)
        self.proj_lateral = nn.Conv2d(lateral_channels, cs_channels, 1)
        self.refine = nn.Sequential(
            nn.Conv2d(cs_channels, cs_channels, 3, padding=1),
            _group_norm(cs_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(cs_channels, cs_channels, 3, padding=1),
            _group_norm(cs_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, decoder_map: torch.Tensor, lateral: torch.Tensor) -> torch.Tensor:
        upsampled = F.interpolate(decoder_map, scale_factor=2, mode="bilinear", align_corners=False)
        if upsampled.shape[-2:] != lateral.shape[-2:]:
            raise ValueError(
                f"CS block spatial mismatch: upsampled {tuple(upsampled.shape[-2:])} vs "
                f"lateral {tuple(lateral.shape[-2:])}"
            )
        fused = self.proj_decoder(upsampled) + self.proj_lateral(lateral)
        return self.refine(fused)


class CoSaliencyNet(nn.Module):
    """Backbone + classification branch (identity, OBC heads) + saliency decoder."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.stage_channels
        ins = (3,) + channels[:-1]
        self.backbone = nn.ModuleList(_ConvBlock(ci, co) for ci, co in zip(ins, channels))
        self.identity_head = nn.Linear(config.embed_dim, config.n_identities)
        self.obc_head = nn.Linear(config.embed_dim, 2)
        self.decoder_seed = nn.Conv2d(channels[4], config.cs_channels, 1)
        # lateral order F4, F3, F2, F1; F5 enters through the seed projection
        self.cs_blocks = nn.ModuleList(
            _CSBlock(channels[k], config.cs_channels) for k in (3, 2, 1, 0)
        )
        self.saliency_head = nn.Conv2d(config.cs_channels, 1, 1)

    # ----- branch-level forwards -------------------------------------------------

    def backbone_forward(self, batch: torch.Tensor) -> list[torch.Tensor]:
        """Stage features F1..F5; Fk has spatial size S / 2**k."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected B x 3 x S x S input, got {tuple(batch.shape)}")
        size = batch.shape[-1]
        if batch.shape[-2] != size or size % 32 != 0:
            raise ValueError(f"input must be square with size a multiple of 32, got {tuple(batch.shape[-2:])}")
        features = []
        x = batch
        for block in self.backbone:
            x = block(x)
            features.append(x)
        return features

    def pool(self, f5: torch.Tensor) -> torch.Tensor:
        return f5.mean(dim=(2, 3))

    def classification_forward(self, f5: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Global-average-pool F5, then the parallel identity and OBC heads."""
        pooled = self.pool(f5)
        return self.identity_head(pooled), self.obc_head(pooled)

    def cosaliency_forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        """Run the four CS blocks top-down; 1-channel logits at S/2 resolution."""
        if len(features) != 5:
            raise ValueError(f"expected 5 stage features, got {len(features)}")
        x = self.decoder_seed(features[4])
        for i, block in enumerate(self.cs_blocks):
            lateral = features[3 - i]
            try:
                x = block(x, lateral)
            except (ValueError, RuntimeError) as exc:
                raise ValueError(f"CS block {i} (lateral F{4 - i}): {exc}") from exc
        return self.saliency_head(x).squeeze(1)

    # ----- public API ------------------------------------------------------------

    def forward(self, batch: torch.Tensor, compute_saliency: bool = True) -> NetworkOutput:
        features = self.backbone_forward(batch)
        identity_logits, obc_logits = self.classification_forward(features[4])
        saliency_logits = saliency_full = None
        if compute_saliency:
            saliency_logits = self.cosaliency_forward(features)
            saliency_full = F.interpolate(
                saliency_logits.unsqueeze(1),
                size=batch.shape[-2:],
                mode="bilinear",
                align_corners=False,
            ).squeeze(1)
        return NetworkOutput(
            identity_logits=identity_logits,
            obc_logits=obc_logits,
            saliency_logits=saliency_logits,
            saliency_full=saliency_full,
            feature=self.pool(features[4]),
        )

    def extract_feature(self, batch: torch.Tensor) -> torch.Tensor:
        """Pooled backbone feature (pre-classifier), used for retrieval distance."""
        return self.pool(self.backbone_forward(batch)[4])

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint learning-rate groups: shared backbone vs the two branches."""
        backbone = list(self.backbone.parameters())
        branches = (
            list(self.identity_head.parameters())
            + list(self.obc_head.parameters())
            + list(self.decoder_seed.parameters())
            + list(self.cs_blocks.parameters())
            + list(self.saliency_head.parameters())
        )
        total = sum(p.numel() for p in self.parameters())
        grouped = sum(p.numel() for p in backbone) + sum(p.numel() for p in branches)
        assert total == grouped, "parameter groups must partition the model"
        return {"backbone": backbone, "branches": branches}


def to_input_tensor(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack HxWx3 arrays into a B x 3 x S x S tensor."""
    stacked = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(stacked)).to(dtype)
