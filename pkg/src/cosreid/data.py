"""Dataset representation, on-disk ingestion, toy-data synthesis, and splits.

Records carry full images plus pixel-exact saliency masks and an
occluded/non-occluded (OBC) flag.  The toy generator draws a small stylised
person figure (head + torso + legs, colours fixed per identity) on a textured
achromatic background, so every mask is exact by construction and retrieval
difficulty is controlled by how much of the figure an occluder hides.
"""

from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import ConfigurationError, EvaluationSetupError, RecordValidationError
from .seeding import rng_for

log = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"
MANIFEST_FORMAT = "cosreid-dataset-v1"


class Domain(str, Enum):
    FULL_BODY = "full_body"
    OCCLUDED = "occluded"
    SIMULATED_OCCLUDED = "simulated_occluded"
    # dataset-level tag for an epoch pool mixing full-body and simulated records
    MIXED = "mixed"


@dataclass(frozen=True)
class ImageRecord:
    """One sample: image, identity label, saliency mask, OBC flag, domain tag."""

    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    identity: int
    mask: np.ndarray  # H x W float32 in [0, 1]; 1 = salient person pixel
    obc: int  # 0 = non-occluded, 1 = occluded
    domain: Domain
    source_id: str
    mask_provenance: str = "exact"  # exact | absent | distilled
    occluder_box: tuple[int, int, int, int] | None = None  # (top, left, h, w)

    def validate(self) -> None:
        img, msk = self.image, self.mask
        if img.ndim != 3 or img.shape[2] != 3:
            raise RecordValidationError(f"{self.source_id}: image must be HxWx3, got {img.shape}")
        if msk.shape != img.shape[:2]:
            raise RecordValidationError(
                f"{self.source_id}: mask shape {msk.shape} does not match image {img.shape[:2]}"
            )
        if img.min() < 0.0 or img.max() > 1.0:
            raise RecordValidationError(f"{self.source_id}: image intensities outside [0, 1]")
        if msk.min() < 0.0 or msk.max() > 1.0:
            raise RecordValidationError(f"{self.source_id}: mask values outside [0, 1]")
        if self.obc not in (0, 1):
            raise RecordValidationError(f"{self.source_id}: obc must be 0 or 1, got {self.obc}")
        if self.identity < 0:
            raise RecordValidationError(f"{self.source_id}: negative identity {self.identity}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of records with an identity vocabulary."""

    records: tuple[ImageRecord, ...]
    identities: tuple[int, ...]
    domain_tag: Domain

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], domain_tag: Domain) -> "Dataset":
        recs = tuple(records)
        identities = tuple(sorted({r.identity for r in recs}))
        return cls(records=recs, identities=identities, domain_tag=domain_tag)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> ImageRecord:
        return self.records[index]

    def validate(self) -> None:
        if not self.records:
            raise RecordValidationError("dataset has no records")
        vocab = set(self.identities)
        for record in self.records:
            record.validate()
            if record.identity not in vocab:
                raise RecordValidationError(
                    f"{record.source_id}: identity {record.identity} missing from vocabulary"
                )

    def label_index(self) -> dict[int, int]:
        """Map identity label -> contiguous class index (sorted vocabulary order)."""
        return {identity: i for i, identity in enumerate(self.identities)}

    def identity_histogram(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for record in self.records:
            counts[record.identity] = counts.get(record.identity, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# toy data generation
# ---------------------------------------------------------------------------

TOY_HUES = 6  # torso/leg colour wheel; identities are (torso, leg) hue pairs
TOY_PALETTE_CAPACITY = TOY_HUES * TOY_HUES

_BODY_HEIGHT_FRAC = 0.80  # body bbox height as a fraction of image size
_SCALE_JITTER = (0.85, 1.0)
_ASPECT_RANGE = (0.42, 0.52)  # body width / body height, fixed per identity
_HEAD_FRAC_RANGE = (0.13, 0.16)  # head radius / body height, fixed per identity
_TORSO_FRAC = 0.40  # torso height / body height
_LEG_WIDTH_FRAC = 0.38  # one leg width / body width
_CENTER_JITTER = (0.10, 0.08)  # horizontal / vertical centre jitter (fraction of size)
_HEAD_COLOR = (0.87, 0.72, 0.58)


class BackgroundTexture(str, Enum):
    NOISE = "noise"
    GRADIENT = "gradient"
    CHECKER = "checker"


@dataclass(frozen=True)
class ToyConfig:
    n_identities: int
    images_per_identity: int
    image_size: int = 64
    figure_palette_seed: int = 0
    background_texture: BackgroundTexture = BackgroundTexture.NOISE

    def __post_init__(self) -> None:
        if self.n_identities < 2:
            raise ConfigurationError("n_identities must be >= 2")
        if self.images_per_identity < 2:
            raise ConfigurationError("images_per_identity must be >= 2")
        if self.image_size % 32 != 0 or self.image_size <= 0:
            raise ConfigurationError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.n_identities > TOY_PALETTE_CAPACITY:
            raise ConfigurationError(
                f"n_identities={self.n_identities} exceeds palette capacity {TOY_PALETTE_CAPACITY}"
            )
        object.__setattr__(self, "background_texture", BackgroundTexture(self.background_texture))


@dataclass(frozen=True)
class FigureSpec:
    torso_color: tuple[float, float, float]
    leg_color: tuple[float, float, float]
    aspect: float
    head_frac: float


def toy_figure_area_bounds() -> tuple[float, float]:
    """Analytic min/max figure coverage (fraction of image area), with raster slack."""
    totals = []
    for scale in _SCALE_JITTER:
        for aspect in _ASPECT_RANGE:
            for head in _HEAD_FRAC_RANGE:
                hb = _BODY_HEIGHT_FRAC * scale
                head_area = math.pi * (head * hb) ** 2
                torso_area = _TORSO_FRAC * hb * hb * aspect
                leg_h = hb * (1.0 - _TORSO_FRAC - 2.0 * head)
                leg_area = 2.0 * _LEG_WIDTH_FRAC * aspect * hb * leg_h
                totals.append(head_area + torso_area + leg_area)
    # pad for rasterisation error (one-pixel ring around a ~4*hb perimeter)
    slack = 0.02
    return min(totals) - slack, max(totals) + slack


def _hue_rgb(hue_index: int, value: float) -> tuple[float, float, float]:
    r, g, b = colorsys.hsv_to_rgb(hue_index / TOY_HUES, 0.85, value)
    return (r, g, b)


def toy_palette(palette_seed: int, n_identities: int) -> list[FigureSpec]:
    """Fixed per-identity figure specs: colour pair plus body geometry."""
    if n_identities > TOY_PALETTE_CAPACITY:
        raise ConfigurationError(
            f"n_identities={n_identities} exceeds palette capacity {TOY_PALETTE_CAPACITY}"
        )
    order_rng = rng_for(palette_seed, "palette-order")
    pairs = [(i, j) for i in range(TOY_HUES) for j in range(TOY_HUES)]
    order = order_rng.permutation(len(pairs))
    specs = []
    for idx in range(n_identities):
        torso_hue, leg_hue = pairs[order[idx]]
        per_id = rng_for(palette_seed, "figure", idx)
        value = per_id.uniform(0.80, 0.95)
        specs.append(
            FigureSpec(
                torso_color=_hue_rgb(torso_hue, value),
                leg_color=_hue_rgb(leg_hue, value),
                aspect=per_id.uniform(*_ASPECT_RANGE),
                head_frac=per_id.uniform(*_HEAD_FRAC_RANGE),
            )
        )
    return specs


def _render_background(size: int, texture: BackgroundTexture, rng: np.random.Generator) -> np.ndarray:
    if texture is BackgroundTexture.NOISE:
        base = rng.uniform(0.35, 0.60)
        gray = base + rng.uniform(-0.12, 0.12, size=(size, size))
    elif texture is BackgroundTexture.GRADIENT:
        g0, g1 = rng.uniform(0.25, 0.70, size=2)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
        t = (xx * math.cos(theta) + yy * math.sin(theta) + 1.0) / 2.0
        gray = g0 + (g1 - g0) * t
    elif texture is BackgroundTexture.CHECKER:
        g0, g1 = rng.uniform(0.30, 0.70, size=2)
        cell = int(rng.integers(4, 10))
        py, px = rng.integers(0, cell, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        board = (((yy + py) // cell) + ((xx + px) // cell)) % 2
        gray = np.where(board == 0, g0, g1)
    else:  # pragma: no cover - enum is closed
        raise ConfigurationError(f"unknown background texture {texture}")
    gray = np.clip(gray, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _render_figure(size: int, spec: FigureSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise one figure; returns (H x W x 3 colour overlay, boolean footprint)."""
    scale = rng.uniform(*_SCALE_JITTER)
    cx = size / 2.0 + rng.uniform(-_CENTER_JITTER[0], _CENTER_JITTER[0]) * size
    cy = size / 2.0 + rng.uniform(-_CENTER_JITTER[1], _CENTER_JITTER[1]) * size

    body_h = _BODY_HEIGHT_FRAC * size * scale
    body_w = body_h * spec.aspect
    top = cy - body_h / 2.0
    head_r = spec.head_frac * body_h
    head_cy = top + head_r
    torso_top = top + 2.0 * head_r
    torso_bot = torso_top + _TORSO_FRAC * body_h
    leg_bot = top + body_h
    leg_w = _LEG_WIDTH_FRAC * body_w

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    head = (yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r**2
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) <= body_w / 2.0)
    left_leg = (
        (yy >= torso_bot)
        & (yy < leg_bot)
        & (xx >= cx - body_w / 2.0)
        & (xx < cx - body_w / 2.0 + leg_w)
    )
    right_leg = (
        (yy >= torso_bot)
        & (yy < leg_bot)
        & (xx <= cx + body_w / 2.0)
        & (xx > cx + body_w / 2.0 - leg_w)
    )

    overlay = np.zeros((size, size, 3), dtype=np.float64)
    overlay[head] = _HEAD_COLOR
    overlay[torso] = spec.torso_color
    overlay[left_leg | right_leg] = spec.leg_color
    footprint = head | torso | left_leg | right_leg
    return overlay, footprint


def generate_toy_dataset(config: ToyConfig, seed: int) -> Dataset:
    """Synthesise a full-body toy dataset; deterministic given (config, seed)."""
    specs = toy_palette(config.figure_palette_seed, config.n_identities)
    records = []
    for identity in range(config.n_identities):
        for j in range(config.images_per_identity):
            rng = rng_for(seed, "toy", config.figure_palette_seed, identity, j)
            image = _render_background(config.image_size, config.background_texture, rng)
            overlay, footprint = _render_figure(config.image_size, specs[identity], rng)
            image[footprint] = overlay[footprint]
            # quantise to 8-bit so an export/reload round trip is exact
            image8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
            records.append(
                ImageRecord(
                    image=(image8.astype(np.float32) / 255.0),
                    identity=identity,
                    mask=footprint.astype(np.float32),
                    obc=0,
                    domain=Domain.FULL_BODY,
                    source_id=f"toy{config.figure_palette_seed}-{identity:03d}-{j:03d}",
                )
            )
    dataset = Dataset.from_records(records, Domain.FULL_BODY)
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutSpec:
    """Names the domain tag (and optionally the OBC default) of a directory tree."""

    domain: Domain
    obc_default: int | None = None

    def resolved_obc(self) -> int:
        if self.obc_default is not None:
            return self.obc_default
        return 1 if self.domain is Domain.OCCLUDED else 0


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def _load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def save_dataset(dataset: Dataset, root: Path | str) -> Path:
    """Write PNG images, 8-bit grayscale PNG masks, and the manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for index, record in enumerate(dataset.records):
        rel_image = Path("images") / f"{record.identity:04d}" / f"{index:05d}.png"
        (root / rel_image).parent.mkdir(parents=True, exist_ok=True)
        image8 = np.clip(np.rint(record.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(image8, mode="RGB").save(root / rel_image)
        rel_mask = None
        if record.mask_provenance != "absent":
            rel_mask = Path("masks") / f"{record.identity:04d}" / f"{index:05d}.png"
            (root / rel_mask).parent.mkdir(parents=True, exist_ok=True)
            mask8 = np.clip(np.rint(record.mask * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(mask8, mode="L").save(root / rel_mask)
        entries.append(
            {
                "image": str(rel_image),
                "mask": str(rel_mask) if rel_mask is not None else None,
                "identity": record.identity,
                "obc": record.obc,
                "domain": record.domain.value,
                "source_id": record.source_id,
                "mask_provenance": record.mask_provenance,
                "occluder_box": list(record.occluder_box) if record.occluder_box else None,
            }
        )
    manifest = {
        "format": MANIFEST_FORMAT,
        "domain": dataset.domain_tag.value,
        "identities": list(dataset.identities),
        "records": entries,
    }
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def _load_from_manifest(root: Path) -> Dataset:
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigurationError(f"unknown manifest format {manifest.get('format')!r} in {root}")
    records = []
    for entry in manifest["records"]:
        image = _load_image(root / entry["image"])
        if entry["mask"] is not None:
            mask = _load_mask(root / entry["mask"])
            if mask.shape != image.shape[:2]:
                raise RecordValidationError(
                    f"mask size {mask.shape} does not match image {image.shape[:2]} for {root / entry['mask']}"
                )
        else:
            mask = np.ones(image.shape[:2], dtype=np.float32)
        box = entry.get("occluder_box")
        records.append(
            ImageRecord(
                image=image,
                identity=int(entry["identity"]),
                mask=mask,
                obc=int(entry["obc"]),
                domain=Domain(entry["domain"]),
                source_id=entry["source_id"],
                mask_provenance=entry.get("mask_provenance", "exact"),
                occluder_box=tuple(box) if box else None,
            )
        )
    dataset = Dataset.from_records(records, Domain(manifest["domain"]))
    dataset.validate()
    return dataset


def load_dataset(root: Path | str, layout: LayoutSpec | None = None) -> Dataset:
    """Load a dataset directory; uses the manifest when present, else scans the tree."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if (root / MANIFEST_NAME).exists():
        return _load_from_manifest(root)
    if layout is None:
        raise ConfigurationError(f"no {MANIFEST_NAME} in {root}; a LayoutSpec naming the domain is required")
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images/ directory under {root}")
    obc = layout.resolved_obc()
    records = []
    for identity_dir in sorted(images_dir.iterdir()):
        if not identity_dir.is_dir():
            continue
        try:
            identity = int(identity_dir.name)
        except ValueError as exc:
            raise RecordValidationError(f"identity directory {identity_dir} is not an integer label") from exc
        for image_path in sorted(identity_dir.glob("*.png")):
            image = _load_image(image_path)
            mask_path = root / "masks" / identity_dir.name / image_path.name
            if mask_path.exists():
                mask = _load_mask(mask_path)
                provenance = "exact"
                if mask.shape != image.shape[:2]:
                    raise RecordValidationError(
                        f"mask size {mask.shape} does not match image {image.shape[:2]} for {mask_path}"
                    )
            else:
                mask = np.ones(image.shape[:2], dtype=np.float32)
                provenance = "absent"
            records.append(
                ImageRecord(
                    image=image,
                    identity=identity,
                    mask=mask,
                    obc=obc,
                    domain=layout.domain,
                    source_id=str(image_path.relative_to(root)),
                    mask_provenance=provenance,
                )
            )
    if not records:
        raise RecordValidationError(f"no PNG images found under {images_dir}")
    dataset = Dataset.from_records(records, layout.domain)
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    resize_to: int = 240
    crop_to: int = 224

    def __post_init__(self) -> None:
        if self.resize_to <= 0 or self.crop_to <= 0:
            raise ConfigurationError("resize/crop sizes must be positive")
        if self.crop_to > self.resize_to:
            raise ConfigurationError(
                f"crop size {self.crop_to} exceeds resize size {self.resize_to}"
            )


PAPER_PREPROCESS = PreprocessConfig(resize_to=240, crop_to=224)
TOY_PREPROCESS = PreprocessConfig(resize_to=72, crop_to=64)


def resize_image(array: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size; works for HxWx3 images and HxW masks."""
    out = cv2.resize(array.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def crop_offsets(
    mode: str, config: PreprocessConfig, rng: np.random.Generator | None = None
) -> tuple[int, int]:
    """Crop window top-left corner: centred for eval, uniform for train."""
    span = config.resize_to - config.crop_to
    if mode == "eval":
        return span // 2, span // 2
    if mode == "train":
        if rng is None:
            raise ConfigurationError("train-mode preprocessing needs an rng")
        top = int(rng.integers(0, span + 1))
        left = int(rng.integers(0, span + 1))
        return top, left
    raise ConfigurationError(f"unknown preprocess mode {mode!r}")


def preprocess(
    record: ImageRecord,
    mode: str,
    rng: np.random.Generator | None = None,
    config: PreprocessConfig = PAPER_PREPROCESS,
) -> tuple[np.ndarray, np.ndarray]:
    """Resize then crop, applying the identical geometric transform to the mask."""
    image = resize_image(record.image, config.resize_to)
    mask = resize_image(record.mask, config.resize_to)
    top, left = crop_offsets(mode, config, rng)
    c = config.crop_to
    return image[top : top + c, left : left + c], mask[top : top + c, left : left + c]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


class ProbeGallerySplit(NamedTuple):
    probes: Dataset
    gallery: Dataset
    unmatched: tuple[int, ...]


def split_probe_gallery(dataset: Dataset) -> ProbeGallerySplit:
    """Occluded records become probes, full-body records the gallery."""
    probe_records = [r for r in dataset.records if r.obc == 1]
    gallery_records = [r for r in dataset.records if r.obc == 0]
    if not probe_records or not gallery_records:
        raise EvaluationSetupError(
            f"need both occluded and full-body records, got {len(probe_records)} probes / "
            f"{len(gallery_records)} gallery"
        )
    gallery_ids = {r.identity for r in gallery_records}
    unmatched = tuple(sorted({r.identity for r in probe_records} - gallery_ids))
    if unmatched:
        log.warning("probe identities missing from gallery: %s", unmatched)
    return ProbeGallerySplit(
        probes=Dataset.from_records(probe_records, Domain.OCCLUDED),
        gallery=Dataset.from_records(gallery_records, Domain.FULL_BODY),
        unmatched=unmatched,
    )


def split_by_identity(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Identity-disjoint split: train on one identity subset, hold out the rest."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie strictly between 0 and 1")
    identities = list(dataset.identities)
    rng = rng_for(seed, "identity-split")
    rng.shuffle(identities)
    n_train = int(math.floor(train_fraction * len(identities) + 0.5))
    n_train = min(max(n_train, 1), len(identities) - 1)
    train_ids = set(identities[:n_train])
    train = [r for r in dataset.records if r.identity in train_ids]
    held = [r for r in dataset.records if r.identity not in train_ids]
    return (
        Dataset.from_records(train, dataset.domain_tag),
        Dataset.from_records(held, dataset.domain_tag),
    )
