"""Occlusion-robust person re-identification.

Teacher-student training of a co-saliency network: a shared backbone with an
identity/OBC classification branch and a pixel-wise saliency decoder, trained
on full-body data under a growing-probability occlusion simulator, then
distilled onto occluded data via pseudo saliency masks.
"""

from .data import (
    BackgroundTexture,
    Dataset,
    Domain,
    ImageRecord,
    LayoutSpec,
    PreprocessConfig,
    PAPER_PREPROCESS,
    TOY_PREPROCESS,
    ToyConfig,
    generate_toy_dataset,
    load_dataset,
    preprocess,
    save_dataset,
    split_by_identity,
    split_probe_gallery,
)
from .evaluator import (
    RetrievalResult,
    SaliencyScore,
    cmc,
    distance_matrix,
    emit_report,
    evaluate_retrieval,
    f_measure,
    mean_average_precision,
    saliency_metrics,
)
from .losses import LossBreakdown, LossWeights, identity_loss, multitask_loss, obc_loss, saliency_loss, total_loss
from .network import CoSaliencyNet, NetworkConfig, NetworkOutput
from .simulator import (
    OccluderPatch,
    OcclusionSchedule,
    PatchOrigin,
    ScheduleMode,
    SimulatorConfig,
    apply_occlusion,
    occlude_dataset,
    sample_occluder,
    schedule_probability,
    simulate_epoch,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    distill_masks,
    extract_features,
    load_checkpoint,
    save_checkpoint,
    step,
    toy_train_config,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"
