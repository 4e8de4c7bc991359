"""Central finite-difference gradient oracle for the full training loss.

The oracle only ever evaluates the loss forward, so it stays independent of
the autograd path it is checking.  Run in double precision: with eps around
1e-6 the truncation and round-off errors both sit far below the 1e-4 gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import LossWeights
from .network import CoSaliencyNet
from .seeding import rng_for
from .trainer import Batch, compute_losses


@dataclass(frozen=True)
class GradProbe:
    name: str
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


def _loss_value(model, batch, weights, use_saliency, use_obc) -> float:
    with torch.no_grad():
        total, _ = compute_losses(model, batch, weights, use_saliency, use_obc)
    return float(total.item())


def finite_difference_check(
    model: CoSaliencyNet,
    batch: Batch,
    weights: LossWeights | None = None,
    n_probes: int = 50,
    eps: float = 1e-6,
    seed: int = 0,
) -> list[GradProbe]:
    """Compare autograd gradients against central differences on random parameters.

    The model and batch are promoted to float64 in place.  Relative error uses
    |a - f| / max(1e-6, |a|, |f|) so near-zero gradients do not inflate noise.
    """
    weights = weights or LossWeights()
    model = model.double()
    batch = Batch(
        images=batch.images.double(),
        identity=batch.identity,
        obc=batch.obc,
        masks=batch.masks.double(),
        source_ids=batch.source_ids,
    )
    model.eval()

    total, _ = compute_losses(model, batch, weights, True, True)
    model.zero_grad(set_to_none=True)
    total.backward()

    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.cumsum(sizes)
    rng = rng_for(seed, "gradcheck")
    picks = rng.integers(0, int(offsets[-1]), size=n_probes)

    probes = []
    for pick in picks:
        param_idx = int(np.searchsorted(offsets, pick, side="right"))
        flat_index = int(pick - (offsets[param_idx - 1] if param_idx else 0))
        name, param = named[param_idx]
        analytic = float(param.grad.reshape(-1)[flat_index].item())
        with torch.no_grad():
            flat = param.reshape(-1)
            original = float(flat[flat_index].item())
            flat[flat_index] = original + eps
            f_plus = _loss_value(model, batch, weights, True, True)
            flat[flat_index] = original - eps
            f_minus = _loss_value(model, batch, weights, True, True)
            flat[flat_index] = original
        numeric = (f_plus - f_minus) / (2.0 * eps)
        rel = abs(analytic - numeric) / max(1e-6, abs(analytic), abs(numeric))
        probes.append(GradProbe(name, flat_index, analytic, numeric, rel))
    return probes
