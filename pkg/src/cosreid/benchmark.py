"""Desk-scale synthetic benchmark.

Sixteen teacher identities of full-body toy figures and eight disjoint student
identities whose dataset mixes full-body (gallery) and occluded (probe) views,
mirroring the occluded-person evaluation protocol: occluded images query a
full-body gallery.  Ablation variants toggle the co-saliency branch (S), the
cross-domain simulator (D), and the OBC loss (O) on top of the classification
branch (C).
"""

from __future__ import annotations

from pathlib import Path

from .data import Dataset, ToyConfig, generate_toy_dataset, split_probe_gallery, TOY_PREPROCESS
from .errors import ConfigurationError
from .evaluator import RetrievalResult, evaluate_retrieval
from .simulator import PatchOrigin, SimulatorConfig, occlude_dataset
from .trainer import Checkpoint, CoSaliencyNet, TrainConfig, extract_features, toy_train_config

TEACHER_N_IDENTITIES = 16
STUDENT_N_IDENTITIES = 8
TEACHER_IMAGES_PER_ID = 12
STUDENT_IMAGES_PER_ID = 24
TEACHER_PALETTE_SEED = 11
STUDENT_PALETTE_SEED = 29
TEACHER_EPOCHS = 30

# evaluation occluders are at least as aggressive as the training range
TRAIN_SIMULATOR = SimulatorConfig(area_fraction_range=(0.1, 0.4), bank_mode=PatchOrigin.BORDER_CROP)
EVAL_SIMULATOR = SimulatorConfig(area_fraction_range=(0.15, 0.4), bank_mode=PatchOrigin.BORDER_CROP)

ABLATION_VARIANTS = ("C", "C+S", "C+S+D", "C+S+D+O")


def build_teacher_set(seed: int, images_per_identity: int = TEACHER_IMAGES_PER_ID) -> Dataset:
    config = ToyConfig(
        n_identities=TEACHER_N_IDENTITIES,
        images_per_identity=images_per_identity,
        image_size=64,
        figure_palette_seed=TEACHER_PALETTE_SEED,
    )
    return generate_toy_dataset(config, seed)


def build_student_set(
    seed: int,
    images_per_identity: int = STUDENT_IMAGES_PER_ID,
    occlude_fraction: float = 0.5,
) -> Dataset:
    """Occluded-domain stand-in: per identity, half the views carry an occluder."""
    config = ToyConfig(
        n_identities=STUDENT_N_IDENTITIES,
        images_per_identity=images_per_identity,
        image_size=64,
        figure_palette_seed=STUDENT_PALETTE_SEED,
    )
    full = generate_toy_dataset(config, seed + 1)
    return occlude_dataset(full, occlude_fraction, EVAL_SIMULATOR, seed=seed + 1)


def ablation_config(variant: str, seed: int, checkpoint_dir: Path | str | None = None, epochs: int = TEACHER_EPOCHS) -> TrainConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    return toy_train_config(
        epochs=epochs,
        seed=seed,
        checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else None,
        checkpoint_every=0,
        use_saliency="S" in variant.split("+"),
        use_simulator="D" in variant.split("+"),
        use_obc="O" in variant.split("+"),
        simulator=TRAIN_SIMULATOR,
    )


def student_config(seed: int, checkpoint_dir: Path | str | None = None, epochs: int = 15) -> TrainConfig:
    return toy_train_config(
        epochs=epochs,
        seed=seed,
        checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else None,
        checkpoint_every=0,
        use_simulator=False,
    )


def evaluate_on_split(source: Checkpoint | CoSaliencyNet, occluded_set: Dataset, max_rank: int = 10) -> RetrievalResult:
    """Retrieval metrics with occluded records as probes and full-body as gallery."""
    probes, gallery, _unmatched = split_probe_gallery(occluded_set)
    probe_feats = extract_features(source, probes, TOY_PREPROCESS)
    gallery_feats = extract_features(source, gallery, TOY_PREPROCESS)
    return evaluate_retrieval(
        probe_feats,
        gallery_feats,
        [r.identity for r in probes.records],
        [r.identity for r in gallery.records],
        max_rank=max_rank,
    )
