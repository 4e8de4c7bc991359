import math

import numpy as np
import pytest
import torch

from cosreid.data import Dataset, ToyConfig, TOY_PREPROCESS, generate_toy_dataset
from cosreid.errors import CheckpointError, ConfigurationError, TrainingDivergedError
from cosreid.gradcheck import finite_difference_check
from cosreid.losses import LossWeights
from cosreid.network import CoSaliencyNet, NetworkConfig
from cosreid.simulator import SimulatorConfig, occlude_dataset
from cosreid.trainer import (
    Batch,
    TrainConfig,
    collate,
    compute_losses,
    distill_masks,
    extract_features,
    load_checkpoint,
    read_train_log,
    save_checkpoint,
    step,
    toy_train_config,
    train_student,
    train_teacher,
)


@pytest.fixture(scope="module")
def small_full_body() -> Dataset:
    return generate_toy_dataset(ToyConfig(4, 4, 64, figure_palette_seed=3), seed=3)


@pytest.fixture(scope="module")
def small_occluded(small_full_body) -> Dataset:
    return occlude_dataset(small_full_body, 0.5, SimulatorConfig(), seed=5)


def quick_config(tmp_path=None, **overrides) -> TrainConfig:
    base = dict(epochs=2, seed=0, checkpoint_every=0)
    if tmp_path is not None:
        base["checkpoint_dir"] = tmp_path
    base.update(overrides)
    return toy_train_config(**base)


@pytest.fixture(scope="module")
def teacher_checkpoint(small_full_body):
    return train_teacher(small_full_body, quick_config(epochs=2))


class TestTrainTeacher:
    def test_log_carries_the_growing_schedule(self, small_full_body, tmp_path):
        cfg = quick_config(tmp_path, epochs=5)
        train_teacher(small_full_body, cfg)
        rows = read_train_log(tmp_path / "train_log.csv")
        by_epoch = {}
        for row in rows:
            by_epoch.setdefault(row["epoch"], set()).add(row["p"])
        assert sorted(by_epoch) == [0, 1, 2, 3, 4]
        assert [by_epoch[e] for e in sorted(by_epoch)] == [{0.0}, {0.2}, {0.4}, {0.6}, {0.8}]

    def test_deterministic_final_loss_and_checkpoint(self, small_full_body, tmp_path):
        # identical run config (including the checkpoint dir, which is echoed
        # into the archive) must reproduce the checkpoint bytes exactly
        cfg = quick_config(tmp_path / "run", epochs=2)
        train_teacher(small_full_body, cfg)
        first_rows = read_train_log(tmp_path / "run" / "train_log.csv")
        first_bytes = (tmp_path / "run" / "last.npz").read_bytes()
        train_teacher(small_full_body, cfg)
        second_rows = read_train_log(tmp_path / "run" / "train_log.csv")
        assert abs(first_rows[-1]["total"] - second_rows[-1]["total"]) <= 1e-6
        assert first_bytes == (tmp_path / "run" / "last.npz").read_bytes()

    def test_rejects_occluded_records(self, small_occluded):
        with pytest.raises(ConfigurationError):
            train_teacher(small_occluded, quick_config())

    def test_loss_decreases_on_toy_data(self, small_full_body, tmp_path):
        cfg = quick_config(tmp_path, epochs=6, use_simulator=False)
        train_teacher(small_full_body, cfg)
        rows = read_train_log(tmp_path / "train_log.csv")
        first = np.mean([r["total"] for r in rows if r["epoch"] == 0])
        last = np.mean([r["total"] for r in rows if r["epoch"] == 5])
        assert last < first

    def test_divergence_aborts_with_batch_context(self, small_full_body):
        cfg = quick_config(epochs=2, lr_backbone=1e14, lr_branches=1e14)
        with pytest.raises(TrainingDivergedError, match="toy3"):
            train_teacher(small_full_body, cfg)

    def test_epoch_checkpoints_written(self, small_full_body, tmp_path):
        cfg = quick_config(tmp_path, epochs=2, checkpoint_every=1)
        train_teacher(small_full_body, cfg)
        assert (tmp_path / "epoch_000.npz").exists()
        assert (tmp_path / "epoch_001.npz").exists()
        assert (tmp_path / "best.npz").exists()
        assert (tmp_path / "last.npz").exists()


class TestCheckpointRoundTrip:
    def test_save_load_eval_bitwise(self, teacher_checkpoint, tmp_path, small_full_body):
        path = save_checkpoint(teacher_checkpoint, tmp_path / "ck.npz")
        loaded = load_checkpoint(path)
        assert loaded.stage == "teacher"
        assert loaded.identities == teacher_checkpoint.identities
        feats_a = extract_features(teacher_checkpoint, small_full_body, TOY_PREPROCESS)
        feats_b = extract_features(loaded, small_full_body, TOY_PREPROCESS)
        assert (feats_a == feats_b).all()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.npz")

    def test_config_echo_preserved(self, teacher_checkpoint, tmp_path):
        path = save_checkpoint(teacher_checkpoint, tmp_path / "ck.npz")
        loaded = load_checkpoint(path)
        assert loaded.config_echo["epochs"] == 2
        assert loaded.config_echo["network_preset"] == "tiny"


class TestStep:
    def _batch(self, dataset, n=4):
        records = dataset.records[:n]
        label_index = dataset.label_index()
        rngs = [np.random.default_rng(i) for i in range(n)]
        return collate(records, label_index, "train", TOY_PREPROCESS, rngs)

    def test_zero_learning_rate_keeps_parameters(self, small_full_body):
        torch.manual_seed(0)
        model = CoSaliencyNet(NetworkConfig.preset("tiny", 4))
        before = {k: v.clone() for k, v in model.state_dict().items()}
        optimizer = torch.optim.Adam(model.parameters(), lr=0.0)
        result = step(self._batch(small_full_body), model, LossWeights(), optimizer)
        assert result.applied
        assert math.isfinite(result.breakdown.total)
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_alpha_one_zeroes_decoder_gradients(self, small_full_body):
        torch.manual_seed(0)
        model = CoSaliencyNet(NetworkConfig.preset("tiny", 4))
        weights = LossWeights(alpha=1.0, beta=0.8, allow_out_of_range=True)
        total, _ = compute_losses(model, self._batch(small_full_body), weights)
        model.zero_grad()
        total.backward()
        decoder_norm = sum(
            p.grad.abs().sum().item()
            for p in list(model.cs_blocks.parameters()) + list(model.saliency_head.parameters())
            if p.grad is not None
        )
        assert decoder_norm == 0.0

    def test_breakdown_composition_holds_each_step(self, small_full_body):
        torch.manual_seed(1)
        model = CoSaliencyNet(NetworkConfig.preset("tiny", 4))
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        weights = LossWeights()
        for i in range(3):
            result = step(self._batch(small_full_body), model, weights, optimizer)
            errors = result.breakdown.composition_errors(weights)
            assert max(errors) <= 1e-6

    def test_nonfinite_gradients_skip_update(self, small_full_body):
        torch.manual_seed(0)
        model = CoSaliencyNet(NetworkConfig.preset("tiny", 4))
        with torch.no_grad():
            model.identity_head.weight.mul_(torch.inf)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        batch = self._batch(small_full_body)
        result = step(batch, model, LossWeights(), optimizer)
        assert not result.applied


class TestGradientCheck:
    def test_tiny_double_precision_gradients(self, small_full_body):
        torch.manual_seed(3)
        model = CoSaliencyNet(NetworkConfig.preset("tiny", 4))
        records = small_full_body.records[:2]
        batch = collate(
            records,
            small_full_body.label_index(),
            "eval",
            TOY_PREPROCESS,
        )
        # occupy both OBC classes so the OBC term is non-degenerate
        batch = Batch(batch.images, batch.identity, torch.tensor([0, 1]), batch.masks, batch.source_ids)
        probes = finite_difference_check(model, batch, LossWeights(), n_probes=12, seed=0)
        worst = max(p.rel_error for p in probes)
        assert worst < 1e-4


class TestDistillMasks:
    def test_contract(self, teacher_checkpoint, small_occluded):
        distilled = distill_masks(teacher_checkpoint, small_occluded)
        assert len(distilled) == len(small_occluded)
        for before, after in zip(small_occluded, distilled):
            assert after.mask_provenance == "distilled"
            assert (after.image == before.image).all()
            assert after.identity == before.identity
            assert after.mask.shape == before.mask.shape
            assert after.mask.min() >= 0.0 and after.mask.max() <= 1.0


class TestTrainStudent:
    def test_inherits_backbone_exactly(self, teacher_checkpoint, small_occluded):
        # a zero-epoch equivalent: epochs=1 with lr ~ 0 keeps the inherited weights
        cfg = quick_config(epochs=1, lr_backbone=1e-30, lr_branches=1e-30)
        student = train_student(teacher_checkpoint, small_occluded, cfg)
        for key, value in teacher_checkpoint.state.items():
            if key.startswith("identity_head."):
                continue
            assert np.allclose(student.state[key], value, atol=1e-6), key

    def test_identity_head_resized_to_student_vocabulary(self, teacher_checkpoint, small_occluded):
        cfg = quick_config(epochs=1)
        student = train_student(teacher_checkpoint, small_occluded, cfg)
        assert student.network.n_identities == len(small_occluded.identities)
        assert student.stage == "student"

    def test_one_epoch_changes_branch_parameters(self, teacher_checkpoint, small_occluded):
        cfg = quick_config(epochs=1)
        student = train_student(teacher_checkpoint, small_occluded, cfg)
        delta = 0.0
        for key, value in teacher_checkpoint.state.items():
            if key.startswith("identity_head."):
                continue
            delta += np.abs(student.state[key] - value).sum()
        assert delta > 0.0

    def test_from_scratch_variant(self, small_occluded):
        student = train_student(None, small_occluded, quick_config(epochs=1))
        assert student.stage == "student"


class TestExtractFeatures:
    def test_shape_and_determinism(self, teacher_checkpoint, small_full_body):
        feats = extract_features(teacher_checkpoint, small_full_body, TOY_PREPROCESS)
        assert feats.shape == (len(small_full_body), 128)
        again = extract_features(teacher_checkpoint, small_full_body, TOY_PREPROCESS)
        assert (feats == again).all()

    def test_crop_must_match_input_size(self, teacher_checkpoint, small_full_body):
        from cosreid.data import PreprocessConfig

        with pytest.raises(ConfigurationError):
            extract_features(teacher_checkpoint, small_full_body, PreprocessConfig(240, 224))
