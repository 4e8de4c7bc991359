"""Two-stage optimisation.

Stage one ("teacher") trains the co-saliency network on full-body data mixed
with simulated occlusions whose per-epoch probability follows the occlusion
schedule.  Stage two ("student") fine-tunes the inherited model on occluded
data with teacher-distilled pseudo masks, identity head re-initialised because
the identity vocabularies differ between domains.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import cv2
import numpy as np
import torch

from .data import (
    Dataset,
    ImageRecord,
    PreprocessConfig,
    PAPER_PREPROCESS,
    TOY_PREPROCESS,
    preprocess,
    resize_image,
)
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError
from .losses import (
    LossBreakdown,
    LossWeights,
    identity_loss,
    obc_loss,
    saliency_loss,
    total_loss,
)
from .network import CoSaliencyNet, NetworkConfig, to_input_tensor
from .seeding import derive_seed, rng_for
from .simulator import (
    OcclusionSchedule,
    SimulatorConfig,
    schedule_probability,
    simulate_epoch,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cosreid-ckpt-v1"
TRAIN_LOG_NAME = "train_log.csv"
TRAIN_LOG_HEADER = ("epoch", "step", "identity", "obc", "saliency", "multitask", "total", "p")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_backbone: float = 1e-5
    lr_branches: float = 2e-4
    weights: LossWeights = LossWeights()
    schedule: OcclusionSchedule | None = None  # defaults to growing over `epochs`
    seed: int = 0
    checkpoint_dir: Path | None = None
    checkpoint_every: int = 1  # 0 = only final/best/last
    use_saliency: bool = True
    use_obc: bool = True
    use_simulator: bool = True
    simulator: SimulatorConfig = SimulatorConfig()
    preprocess: PreprocessConfig = PAPER_PREPROCESS
    network: NetworkConfig | None = None  # n_identities is resolved from the data
    network_preset: str = "paper"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lr_backbone <= 0 or self.lr_branches <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.checkpoint_dir is not None:
            object.__setattr__(self, "checkpoint_dir", Path(self.checkpoint_dir))

    def resolved_schedule(self) -> OcclusionSchedule:
        return self.schedule or OcclusionSchedule(epoch_max=self.epochs)

    def resolved_network(self, n_identities: int) -> NetworkConfig:
        base = self.network or NetworkConfig.preset(self.network_preset, n_identities)
        if base.n_identities != n_identities:
            base = replace(base, n_identities=n_identities)
        if base.input_size != self.preprocess.crop_to:
            raise ConfigurationError(
                f"network input size {base.input_size} must equal preprocess crop {self.preprocess.crop_to}"
            )
        return base

    def effective_weights(self) -> LossWeights:
        """Ablation flags expressed as boundary blend weights (alpha=1 / beta=1)."""
        alpha = self.weights.alpha if self.use_saliency else 1.0
        beta = self.weights.beta if self.use_obc else 1.0
        if alpha == self.weights.alpha and beta == self.weights.beta:
            return self.weights
        return LossWeights(alpha=alpha, beta=beta, allow_out_of_range=True)


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: tiny preset, 72->64 preprocessing, from-scratch learning rates.

    Batch 16 rather than the full-scale default of 8: from-scratch training on
    the tiny corpus is markedly less seed-sensitive with the larger batch.
    """
    base = dict(
        epochs=30,
        batch_size=16,
        lr_backbone=1e-3,
        lr_branches=2e-3,
        preprocess=TOY_PREPROCESS,
        network_preset="tiny",
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    network: NetworkConfig
    state: dict[str, np.ndarray]  # parameter tensors keyed by module path
    epoch: int
    stage: str  # teacher | student
    identities: tuple[int, ...]
    config_echo: dict
    rng_torch: np.ndarray | None = None
    format_tag: str = CHECKPOINT_FORMAT

    def build_model(self) -> CoSaliencyNet:
        model = CoSaliencyNet(self.network)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        model.eval()
        return model


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if hasattr(value, "value") and not isinstance(value, (int, float, str, bool)):
        return value.value  # enums
    return value


def config_echo(cfg: TrainConfig) -> dict:
    return _jsonable(asdict(cfg))


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": checkpoint.format_tag,
        "stage": checkpoint.stage,
        "epoch": checkpoint.epoch,
        "identities": list(checkpoint.identities),
        "network": _jsonable(asdict(checkpoint.network)),
        "config": checkpoint.config_echo,
        "param_names": sorted(checkpoint.state),
    }
    arrays = {f"param/{k}": v for k, v in checkpoint.state.items()}
    if checkpoint.rng_torch is not None:
        arrays["rng/torch"] = checkpoint.rng_torch
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: arrays[k] for k in sorted(arrays)})
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if "meta" not in archive:
            raise CheckpointError(f"{path} is not a cosreid checkpoint (missing meta)")
        meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unknown checkpoint format {meta.get('format')!r} in {path}")
        state = {
            name: archive[f"param/{name}"]
            for name in meta["param_names"]
        }
        rng_torch = archive["rng/torch"] if "rng/torch" in archive else None
    network_meta = dict(meta["network"])
    network_meta["stage_channels"] = tuple(network_meta["stage_channels"])
    return Checkpoint(
        network=NetworkConfig(**network_meta),
        state=state,
        epoch=int(meta["epoch"]),
        stage=meta["stage"],
        identities=tuple(int(i) for i in meta["identities"]),
        config_echo=meta["config"],
        rng_torch=rng_torch,
    )


def _snapshot(model: CoSaliencyNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _link_or_copy(target: Path, link: Path) -> None:
    if link.exists() or link.is_symlink():
        link.unlink()
    try:
        os.symlink(target.name, link)
    except OSError:
        shutil.copy2(target, link)


# ---------------------------------------------------------------------------
# batches and steps
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x S x S
    identity: torch.Tensor  # B
    obc: torch.Tensor  # B
    masks: torch.Tensor  # B x S x S
    source_ids: tuple[str, ...]


def collate(
    records: Sequence[ImageRecord],
    label_index: dict[int, int],
    mode: str,
    preprocess_cfg: PreprocessConfig,
    rngs: Sequence[np.random.Generator] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    images, masks = [], []
    for i, record in enumerate(records):
        rng = rngs[i] if rngs is not None else None
        image, mask = preprocess(record, mode, rng=rng, config=preprocess_cfg)
        images.append(image)
        masks.append(mask)
    return Batch(
        images=to_input_tensor(images, dtype=dtype),
        identity=torch.tensor([label_index[r.identity] for r in records], dtype=torch.long),
        obc=torch.tensor([r.obc for r in records], dtype=torch.long),
        masks=torch.from_numpy(np.stack(masks)).to(dtype),
        source_ids=tuple(r.source_id for r in records),
    )


def downsample_mask(masks: torch.Tensor) -> torch.Tensor:
    """Area-average the ground-truth mask to the decoder-native half resolution."""
    return torch.nn.functional.avg_pool2d(masks.unsqueeze(1), kernel_size=2).squeeze(1)


def compute_losses(
    model: CoSaliencyNet,
    batch: Batch,
    weights: LossWeights,
    use_saliency: bool = True,
    use_obc: bool = True,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward pass plus loss composition; returns (total tensor, float breakdown)."""
    output = model(batch.images, compute_saliency=use_saliency)
    id_term = identity_loss(output.identity_logits, batch.identity)
    obc_term = obc_loss(output.obc_logits, batch.obc) if use_obc else None
    sal_term = (
        saliency_loss(output.saliency_logits, downsample_mask(batch.masks))
        if use_saliency
        else None
    )
    multitask_t = id_term if obc_term is None else weights.beta * id_term + (1.0 - weights.beta) * obc_term
    total_t = (
        multitask_t
        if sal_term is None
        else weights.alpha * multitask_t + (1.0 - weights.alpha) * sal_term
    )
    breakdown = total_loss(
        [(
            float(id_term.item()),
            float(obc_term.item()) if obc_term is not None else 0.0,
            float(sal_term.item()) if sal_term is not None else 0.0,
        )],
        weights,
    )
    return total_t, breakdown


class StepResult(NamedTuple):
    breakdown: LossBreakdown
    applied: bool  # False when non-finite gradients forced a skip


def step(
    batch: Batch,
    model: CoSaliencyNet,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    use_saliency: bool = True,
    use_obc: bool = True,
) -> StepResult:
    """One forward/backward/update; skips the update on non-finite gradients."""
    total_t, breakdown = compute_losses(model, batch, weights, use_saliency, use_obc)
    optimizer.zero_grad(set_to_none=True)
    total_t.backward()
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            log.warning("non-finite gradients; skipping step (batch %s)", batch.source_ids)
            return StepResult(breakdown, applied=False)
    optimizer.step()
    return StepResult(breakdown, applied=True)


# ---------------------------------------------------------------------------
# epoch loop shared by both stages
# ---------------------------------------------------------------------------


def _shuffled_records(dataset: Dataset, rng: np.random.Generator) -> list[ImageRecord]:
    order = rng.permutation(len(dataset))
    return [dataset.records[int(i)] for i in order]


def build_optimizer(model: CoSaliencyNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = model.parameter_groups()
    log.info(
        "parameter groups: backbone=%d tensors (%d params, lr=%g), branches=%d tensors (%d params, lr=%g)",
        len(groups["backbone"]),
        sum(p.numel() for p in groups["backbone"]),
        cfg.lr_backbone,
        len(groups["branches"]),
        sum(p.numel() for p in groups["branches"]),
        cfg.lr_branches,
    )
    return torch.optim.Adam(
        [
            {"params": groups["backbone"], "lr": cfg.lr_backbone},
            {"params": groups["branches"], "lr": cfg.lr_branches},
        ]
    )


def _train(
    model: CoSaliencyNet,
    dataset: Dataset,
    cfg: TrainConfig,
    stage: str,
) -> Checkpoint:
    dataset.validate()
    weights = cfg.effective_weights()
    schedule = cfg.resolved_schedule()
    label_index = dataset.label_index()
    optimizer = build_optimizer(model, cfg)
    model.train()

    log_rows: list[tuple] = []
    best_total = math.inf
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = -1

    for epoch in range(cfg.epochs):
        epoch_rng = rng_for(cfg.seed, stage, "epoch", epoch)
        if stage == "teacher" and cfg.use_simulator:
            p = schedule_probability(min(epoch, schedule.epoch_max), schedule)
            pool = simulate_epoch(dataset, p, bank=dataset, rng=epoch_rng, config=cfg.simulator).records
        else:
            p = 0.0
            pool = _shuffled_records(dataset, epoch_rng)
        epoch_totals = []
        for step_idx, start in enumerate(range(0, len(pool), cfg.batch_size)):
            records = pool[start : start + cfg.batch_size]
            rngs = [
                rng_for(cfg.seed, stage, "crop", epoch, start + i) for i in range(len(records))
            ]
            batch = collate(records, label_index, "train", cfg.preprocess, rngs)
            result = step(batch, model, weights, optimizer, cfg.use_saliency, cfg.use_obc)
            breakdown = result.breakdown
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step_idx}; batch {batch.source_ids}"
                )
            log_rows.append(
                (
                    epoch,
                    step_idx,
                    breakdown.identity,
                    breakdown.obc,
                    breakdown.saliency,
                    breakdown.multitask,
                    breakdown.total,
                    p,
                )
            )
            epoch_totals.append(breakdown.total)
        epoch_mean = float(np.mean(epoch_totals))
        log.info("%s epoch %d: p=%.3f mean total loss %.4f", stage, epoch, p, epoch_mean)
        if epoch_mean < best_total:
            best_total, best_epoch = epoch_mean, epoch
            best_state = _snapshot(model)
        if cfg.checkpoint_dir is not None and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            epoch_ckpt = Checkpoint(
                network=model.config,
                state=_snapshot(model),
                epoch=epoch,
                stage=stage,
                identities=dataset.identities,
                config_echo=config_echo(cfg),
                rng_torch=torch.get_rng_state().numpy().copy(),
            )
            save_checkpoint(epoch_ckpt, cfg.checkpoint_dir / f"epoch_{epoch:03d}.npz")

    model.eval()
    final = Checkpoint(
        network=model.config,
        state=_snapshot(model),
        epoch=cfg.epochs - 1,
        stage=stage,
        identities=dataset.identities,
        config_echo=config_echo(cfg),
        rng_torch=torch.get_rng_state().numpy().copy(),
    )
    if cfg.checkpoint_dir is not None:
        cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        _write_log(cfg.checkpoint_dir / TRAIN_LOG_NAME, log_rows)
        last_path = save_checkpoint(final, cfg.checkpoint_dir / "last.npz")
        if best_state is not None:
            best = replace_state(final, best_state, best_epoch)
            best_path = save_checkpoint(best, cfg.checkpoint_dir / "best_epoch.npz")
            _link_or_copy(best_path, cfg.checkpoint_dir / "best.npz")
        epoch_file = cfg.checkpoint_dir / f"epoch_{cfg.epochs - 1:03d}.npz"
        if epoch_file.exists():
            _link_or_copy(epoch_file, cfg.checkpoint_dir / "last_epoch.npz")
        log.info("checkpoints written under %s (last: %s)", cfg.checkpoint_dir, last_path)
    return final


def replace_state(checkpoint: Checkpoint, state: dict[str, np.ndarray], epoch: int) -> Checkpoint:
    return Checkpoint(
        network=checkpoint.network,
        state=state,
        epoch=epoch,
        stage=checkpoint.stage,
        identities=checkpoint.identities,
        config_echo=checkpoint.config_echo,
        rng_torch=checkpoint.rng_torch,
    )


def _write_log(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_train_log(path: Path | str) -> list[dict[str, float]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: float(v) for k, v in row.items()})
    return rows


# ---------------------------------------------------------------------------
# stage operations
# ---------------------------------------------------------------------------


def train_teacher(full_body: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Stage one: full-body data plus the cross-domain simulator."""
    if any(r.obc != 0 for r in full_body.records):
        raise ConfigurationError("teacher training expects full-body records with obc=0")
    torch.manual_seed(derive_seed(cfg.seed, "teacher", "init"))
    model = CoSaliencyNet(cfg.resolved_network(len(full_body.identities)))
    return _train(model, full_body, cfg, stage="teacher")


def train_student(
    teacher: Checkpoint | None,
    occluded: Dataset,
    cfg: TrainConfig,
) -> Checkpoint:
    """Stage two: fine-tune on occluded data; identity head re-initialised.

    ``teacher=None`` trains the same architecture from scratch (the no-teacher
    ablation); all other parameters are inherited from the checkpoint.
    """
    torch.manual_seed(derive_seed(cfg.seed, "student", "init"))
    network = cfg.resolved_network(len(occluded.identities))
    if teacher is not None and teacher.network != replace(network, n_identities=teacher.network.n_identities):
        raise ConfigurationError("student network config must match the teacher's backbone layout")
    model = CoSaliencyNet(network)
    if teacher is not None:
        inherited = {
            k: torch.from_numpy(v.copy())
            for k, v in teacher.state.items()
            if not k.startswith("identity_head.")
        }
        missing, unexpected = model.load_state_dict(inherited, strict=False)
        unexpected = [k for k in unexpected if not k.startswith("identity_head.")]
        if unexpected or any(not k.startswith("identity_head.") for k in missing):
            raise CheckpointError(
                f"teacher/student parameter mismatch: missing={missing}, unexpected={unexpected}"
            )
    student_cfg = cfg if not cfg.use_simulator else replace(cfg, use_simulator=False)
    return _train(model, occluded, student_cfg, stage="student")


def distill_masks(teacher: Checkpoint | CoSaliencyNet, occluded: Dataset, batch_size: int = 16) -> Dataset:
    """Replace every mask with the teacher decoder's sigmoid map at record resolution."""
    model = teacher.build_model() if isinstance(teacher, Checkpoint) else teacher
    model.eval()
    size = model.config.input_size
    records = list(occluded.records)
    out_records: list[ImageRecord] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            images = [resize_image(r.image, size) for r in chunk]
            output = model(to_input_tensor(images), compute_saliency=True)
            probs = torch.sigmoid(output.saliency_logits).numpy()
            for record, prob in zip(chunk, probs):
                pseudo = cv2.resize(
                    prob.astype(np.float32),
                    (record.width, record.height),
                    interpolation=cv2.INTER_LINEAR,
                )
                pseudo = np.clip(pseudo, 0.0, 1.0)
                if pseudo.shape != record.image.shape[:2]:  # pragma: no cover - contract
                    raise RuntimeError("pseudo mask resolution mismatch")
                out_records.append(replace(record, mask=pseudo, mask_provenance="distilled"))
    return Dataset.from_records(out_records, occluded.domain_tag)


def extract_features(
    source: Checkpoint | CoSaliencyNet,
    dataset: Dataset,
    preprocess_cfg: PreprocessConfig,
    batch_size: int = 32,
) -> np.ndarray:
    """Pooled backbone features under deterministic eval preprocessing."""
    model = source.build_model() if isinstance(source, Checkpoint) else source
    model.eval()
    if model.config.input_size != preprocess_cfg.crop_to:
        raise ConfigurationError(
            f"network input size {model.config.input_size} vs eval crop {preprocess_cfg.crop_to}"
        )
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            records = dataset.records[start : start + batch_size]
            images = [preprocess(r, "eval", config=preprocess_cfg)[0] for r in records]
            chunks.append(model.extract_feature(to_input_tensor(images)).numpy())
    return np.concatenate(chunks, axis=0)
