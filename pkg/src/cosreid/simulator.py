"""Cross-domain occlusion simulator.

Transforms full-body records into simulated occluded ones: a background patch
is pasted onto the image at a uniform position, the same rectangle of the
saliency mask is blacked out, and the OBC label flips to 1 while the identity
stays unchanged.  The per-epoch selection probability grows linearly with the
epoch counter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

import cv2
import numpy as np

from .data import Dataset, Domain, ImageRecord
from .errors import ConfigurationError
from .seeding import rng_for

log = logging.getLogger(__name__)

_MIN_STRIP = 4  # thinnest donor margin worth stretching into a patch


def round_half_up(x: float) -> int:
    """Nearest integer, ties rounded up (deterministic, order-free)."""
    return int(math.floor(x + 0.5))


class ScheduleMode(str, Enum):
    CONSTANT_0 = "constant_0"
    CONSTANT_1 = "constant_1"
    GROWING = "growing"


@dataclass(frozen=True)
class OcclusionSchedule:
    epoch_max: int
    mode: ScheduleMode = ScheduleMode.GROWING

    def __post_init__(self) -> None:
        if self.epoch_max < 1:
            raise ConfigurationError("epoch_max must be a positive integer")
        object.__setattr__(self, "mode", ScheduleMode(self.mode))


def schedule_probability(epoch: int, schedule: OcclusionSchedule) -> float:
    """Occlusion probability at the start of the given epoch."""
    if epoch < 0 or epoch > schedule.epoch_max:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epoch_max}]")
    if schedule.mode is ScheduleMode.CONSTANT_0:
        return 0.0
    if schedule.mode is ScheduleMode.CONSTANT_1:
        return 1.0
    return epoch / schedule.epoch_max


class PatchOrigin(str, Enum):
    BORDER_CROP = "border_crop"
    SOLID = "solid"
    NOISE = "noise"


@dataclass(frozen=True)
class OccluderPatch:
    pixels: np.ndarray  # h x w x 3 in [0, 1]
    origin: PatchOrigin

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class SimulatorConfig:
    area_fraction_range: tuple[float, float] = (0.1, 0.4)
    bank_mode: PatchOrigin = PatchOrigin.BORDER_CROP
    aspect_range: tuple[float, float] = (0.5, 2.0)
    max_retries: int = 8

    def __post_init__(self) -> None:
        lo, hi = self.area_fraction_range
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigurationError(f"area_fraction_range must satisfy 0 < lo <= hi < 1, got {lo, hi}")
        alo, ahi = self.aspect_range
        if not (0.0 < alo <= ahi):
            raise ConfigurationError("aspect_range must be positive and ordered")
        object.__setattr__(self, "bank_mode", PatchOrigin(self.bank_mode))


def _patch_shape(target_hw: tuple[int, int], config: SimulatorConfig, rng: np.random.Generator) -> tuple[int, int]:
    height, width = target_hw
    lo, hi = config.area_fraction_range
    area = rng.uniform(lo, hi) * height * width
    aspect = rng.uniform(*config.aspect_range)  # h / w
    h = int(np.clip(round(math.sqrt(area * aspect)), 1, height))
    w = int(np.clip(round(math.sqrt(area / aspect)), 1, width))
    return h, w


def _background_strips(record: ImageRecord) -> list[tuple[int, int, int, int]]:
    """Margins (r0, r1, c0, c1) fully outside the donor's mask bounding box."""
    if record.mask_provenance == "absent":
        return []
    rows = np.flatnonzero(record.mask.max(axis=1) > 0.5)
    cols = np.flatnonzero(record.mask.max(axis=0) > 0.5)
    height, width = record.mask.shape
    if rows.size == 0 or cols.size == 0:
        return [(0, height, 0, width)]
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    strips = []
    if r0 > 0:
        strips.append((0, r0, 0, width))
    if r1 < height:
        strips.append((r1, height, 0, width))
    if c0 > 0:
        strips.append((0, height, 0, c0))
    if c1 < width:
        strips.append((0, height, c1, width))
    return strips


def sample_occluder(
    bank: Dataset | None,
    config: SimulatorConfig,
    target_hw: tuple[int, int],
    rng: np.random.Generator,
) -> OccluderPatch:
    """Draw a patch whose area fraction of the target lies in the configured range."""
    h, w = _patch_shape(target_hw, config, rng)
    if config.bank_mode is PatchOrigin.SOLID:
        color = rng.uniform(0.0, 1.0, size=3)
        return OccluderPatch(np.tile(color.astype(np.float32), (h, w, 1)), PatchOrigin.SOLID)
    if config.bank_mode is PatchOrigin.NOISE:
        return OccluderPatch(rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32), PatchOrigin.NOISE)
    if bank is None or len(bank) == 0:
        raise ConfigurationError("border_crop mode needs a non-empty donor bank")
    for _ in range(config.max_retries):
        donor = bank.records[int(rng.integers(len(bank)))]
        usable = [
            (r0, r1, c0, c1)
            for r0, r1, c0, c1 in _background_strips(donor)
            if (r1 - r0) >= _MIN_STRIP and (c1 - c0) >= _MIN_STRIP
        ]
        if not usable:
            continue
        exact = [s for s in usable if (s[1] - s[0]) >= h and (s[3] - s[2]) >= w]
        r0, r1, c0, c1 = (exact or usable)[int(rng.integers(len(exact or usable)))]
        crop_h = min(h, r1 - r0)
        crop_w = min(w, c1 - c0)
        top = int(rng.integers(r0, r1 - crop_h + 1))
        left = int(rng.integers(c0, c1 - crop_w + 1))
        pixels = donor.image[top : top + crop_h, left : left + crop_w].copy()
        if (crop_h, crop_w) != (h, w):
            # margin smaller than the patch: stretch the background texture up
            pixels = cv2.resize(pixels, (w, h), interpolation=cv2.INTER_LINEAR)
        return OccluderPatch(np.clip(pixels, 0.0, 1.0), PatchOrigin.BORDER_CROP)
    log.warning("no border-crop donor region for a %dx%d patch after %d tries; using noise",
                h, w, config.max_retries)
    return OccluderPatch(rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32), PatchOrigin.NOISE)


def apply_occlusion(record: ImageRecord, patch: OccluderPatch, rng: np.random.Generator) -> ImageRecord:
    """Paste the patch at a uniform position; black out the same mask rectangle."""
    h, w = patch.shape
    height, width = record.height, record.width
    if h > height or w > width:
        raise ValueError(f"patch {h}x{w} does not fit inside image {height}x{width}")
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    image = record.image.copy()
    image[top : top + h, left : left + w] = patch.pixels
    mask = record.mask.copy()
    mask[top : top + h, left : left + w] = 0.0
    return replace(
        record,
        image=image,
        mask=mask,
        obc=1,
        domain=Domain.SIMULATED_OCCLUDED,
        occluder_box=(top, left, h, w),
    )


def simulate_epoch(
    dataset: Dataset,
    p: float,
    bank: Dataset | None,
    rng: np.random.Generator,
    config: SimulatorConfig = SimulatorConfig(),
) -> Dataset:
    """Occlude exactly round(p*N) records; output order is a fresh shuffle."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    n = len(dataset)
    n_occluded = round_half_up(p * n)
    order = rng.permutation(n)
    records = []
    for position, index in enumerate(order):
        record = dataset.records[int(index)]
        if position < n_occluded:
            patch = sample_occluder(bank, config, (record.height, record.width), rng)
            records.append(apply_occlusion(record, patch, rng))
        else:
            records.append(record if record.obc == 0 else replace(record, obc=0))
    return Dataset.from_records(records, Domain.MIXED)


def occlude_dataset(
    dataset: Dataset,
    fraction: float,
    config: SimulatorConfig,
    seed: int,
    domain: Domain = Domain.OCCLUDED,
) -> Dataset:
    """Occlude a per-identity fraction of records, keeping the input order.

    Used to materialise a static occluded-domain dataset (the desk-scale
    stand-in for a real occluded person dataset): every identity keeps both
    full-body and occluded views.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"fraction {fraction} outside [0, 1]")
    rng = rng_for(seed, "occlude-dataset")
    by_identity: dict[int, list[int]] = {}
    for index, record in enumerate(dataset.records):
        by_identity.setdefault(record.identity, []).append(index)
    selected: set[int] = set()
    for identity in sorted(by_identity):
        indices = by_identity[identity]
        k = round_half_up(fraction * len(indices))
        chosen = rng.choice(len(indices), size=k, replace=False)
        selected.update(indices[int(i)] for i in chosen)
    records = []
    for index, record in enumerate(dataset.records):
        if index in selected:
            patch = sample_occluder(dataset, config, (record.height, record.width), rng)
            occluded = apply_occlusion(record, patch, rng)
            records.append(replace(occluded, domain=domain))
        else:
            records.append(record)
    return Dataset.from_records(records, domain)
