"""Training objectives.

Identity and OBC heads use softmax cross-entropy; the saliency map uses
pixel-wise sigmoid binary cross-entropy (mean-reduced so the branch weight is
independent of resolution).  The classification branch blends identity and OBC
terms with beta, and the two branches blend with alpha.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Blend coefficients: alpha between branches, beta inside the classification branch.

    Default validation requires both to lie in [0.5, 1); pass
    ``allow_out_of_range=True`` to accept any value in [0, 1] (a warning is
    logged outside the recommended band).
    """

    alpha: float = 0.8
    beta: float = 0.8
    allow_out_of_range: bool = False

    def __post_init__(self) -> None:
        for name, value in (("alpha", self.alpha), ("beta", self.beta)):
            if self.allow_out_of_range:
                if not 0.0 <= value <= 1.0:
                    raise ConfigurationError(f"{name}={value} outside [0, 1]")
                if not 0.5 <= value < 1.0:
                    log.warning("%s=%s outside the recommended [0.5, 1) band", name, value)
            elif not 0.5 <= value < 1.0:
                raise ConfigurationError(
                    f"{name}={value} outside [0.5, 1); pass allow_out_of_range=True to override"
                )


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step scalar loss components and their blends."""

    identity: float
    obc: float
    saliency: float
    multitask: float
    total: float

    def composition_errors(self, weights: LossWeights) -> tuple[float, float]:
        """Absolute deviation of (multitask, total) from their defining blends."""
        expect_mt = weights.beta * self.identity + (1.0 - weights.beta) * self.obc
        expect_total = weights.alpha * self.multitask + (1.0 - weights.alpha) * self.saliency
        return abs(self.multitask - expect_mt), abs(self.total - expect_total)


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() == 0:
        raise ValueError("empty batch")
    if labels.min().item() < 0 or labels.max().item() >= n_classes:
        raise ValueError(
            f"labels outside [0, {n_classes}): min={labels.min().item()}, max={labels.max().item()}"
        )


def identity_loss(identity_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the identity classifier."""
    _check_labels(labels, identity_logits.shape[1])
    return F.cross_entropy(identity_logits, labels)


def obc_loss(obc_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean 2-class cross-entropy of the occluded/non-occluded classifier."""
    _check_labels(labels, 2)
    return F.cross_entropy(obc_logits, labels)


def saliency_loss(saliency_logits: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel sigmoid BCE between predicted logits and the target mask."""
    if saliency_logits.shape != target_mask.shape:
        raise ValueError(
            f"saliency logits {tuple(saliency_logits.shape)} vs mask {tuple(target_mask.shape)}"
        )
    return F.binary_cross_entropy_with_logits(saliency_logits, target_mask)


def multitask_loss(identity, obc, weights: LossWeights):
    """Classification-branch blend: beta * identity + (1 - beta) * obc."""
    return weights.beta * identity + (1.0 - weights.beta) * obc


def blend_branches(multitask, saliency, weights: LossWeights):
    """Branch blend: alpha * multitask + (1 - alpha) * saliency."""
    return weights.alpha * multitask + (1.0 - weights.alpha) * saliency


def total_loss(
    per_domain: Sequence[tuple[float, float, float]], weights: LossWeights
) -> LossBreakdown:
    """Compose the final loss from 1 or 2 per-domain (identity, obc, saliency) triples.

    With identical weights per domain, the sum over domains equals blending the
    component sums, so the breakdown equalities hold for either call shape.
    """
    if not 1 <= len(per_domain) <= 2:
        raise ValueError(f"expected 1 or 2 domain contributions, got {len(per_domain)}")
    identity = float(sum(d[0] for d in per_domain))
    obc = float(sum(d[1] for d in per_domain))
    saliency = float(sum(d[2] for d in per_domain))
    multitask = multitask_loss(identity, obc, weights)
    total = blend_branches(multitask, saliency, weights)
    return LossBreakdown(identity=identity, obc=obc, saliency=saliency, multitask=multitask, total=total)
