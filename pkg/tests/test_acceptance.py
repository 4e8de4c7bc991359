"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-backed criteria (6, 7, 9) share cached teacher checkpoints, so the
whole file runs in roughly 20 minutes on two CPU cores:

    pytest tests/test_acceptance.py -v -s
"""

import math

import numpy as np
import pytest
import torch

from cosreid.benchmark import (
    ABLATION_VARIANTS,
    ablation_config,
    build_student_set,
    build_teacher_set,
    evaluate_on_split,
    student_config,
)
from cosreid.data import (
    Dataset,
    Domain,
    TOY_PREPROCESS,
    ToyConfig,
    generate_toy_dataset,
    split_by_identity,
)
from cosreid.evaluator import (
    cmc,
    distance_matrix,
    emit_report,
    f_measure,
    mean_average_precision,
    saliency_metrics,
)
from cosreid.gradcheck import finite_difference_check
from cosreid.losses import LossBreakdown, LossWeights, blend_branches
from cosreid.network import CoSaliencyNet, NetworkConfig
from cosreid.simulator import (
    OcclusionSchedule,
    SimulatorConfig,
    schedule_probability,
    simulate_epoch,
)
from cosreid.trainer import (
    collate,
    distill_masks,
    extract_features,
    read_train_log,
    toy_train_config,
    train_student,
    train_teacher,
)

from test_evaluator import brute_force_cmc_map

SEEDS = (0, 1, 2)


def report(number: int, name: str, ok: bool, detail: str) -> None:
    print(f"[criterion {number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} ({name}): {detail}"


class BenchCache:
    """Lazily trains and caches the benchmark teachers shared across criteria."""

    def __init__(self):
        self._sets: dict[int, tuple[Dataset, Dataset]] = {}
        self._teachers: dict[tuple[str, int], object] = {}

    def data(self, seed: int) -> tuple[Dataset, Dataset]:
        if seed not in self._sets:
            self._sets[seed] = (build_teacher_set(seed=seed), build_student_set(seed=seed))
        return self._sets[seed]

    def teacher(self, variant: str, seed: int):
        key = (variant, seed)
        if key not in self._teachers:
            teacher_set, _ = self.data(seed)
            self._teachers[key] = train_teacher(teacher_set, ablation_config(variant, seed=seed))
        return self._teachers[key]


@pytest.fixture(scope="module")
def bench() -> BenchCache:
    return BenchCache()


# --------------------------------------------------------------------------- 1
def test_criterion_1_f_measure_anchor():
    """F-measure arithmetic at the published precision/recall pair. Instant."""
    gt = np.zeros(2500)
    gt[:1000] = 1.0  # 1000 positive ground-truth pixels
    pred = np.zeros(2500)
    pred[:780] = 1.0  # TP=780
    pred[1000:1195] = 1.0  # FP=195 -> P=0.80 exactly, R=0.78 exactly
    score = saliency_metrics([pred.reshape(50, 50)], [gt.reshape(50, 50)], threshold=0.5, beta2=0.3)
    ok = (
        score.precision == pytest.approx(0.80, abs=1e-12)
        and score.recall == pytest.approx(0.78, abs=1e-12)
        and abs(score.f_measure - 0.795) <= 1e-3
        and round(score.f_measure, 2) == 0.80
        and abs(f_measure(0.80, 0.78, 0.3) - 0.795) <= 1e-3
    )
    report(1, "f-measure anchor", ok, f"P={score.precision:.2f} R={score.recall:.2f} F={score.f_measure:.4f}")


# --------------------------------------------------------------------------- 2
def test_criterion_2_ranking_oracle_equivalence():
    """cmc and mAP equal an exhaustive reference exactly on 200 random instances. <10 s."""
    rng = np.random.default_rng(20)
    checked = 0
    while checked < 200:
        n_p = int(rng.integers(1, 9))
        n_g = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        probe_ids = rng.integers(0, 4, size=n_p)
        gallery_ids = rng.integers(0, 4, size=n_g)
        if not set(probe_ids) & set(gallery_ids):
            continue
        dist = distance_matrix(rng.normal(size=(n_p, d)), rng.normal(size=(n_g, d)))
        expected_cmc, expected_map, expected_aps = brute_force_cmc_map(dist, probe_ids, gallery_ids, n_g)
        got_cmc = cmc(dist, probe_ids, gallery_ids, max_rank=n_g)
        got_map, got_aps = mean_average_precision(dist, probe_ids, gallery_ids)
        assert np.array_equal(got_cmc, expected_cmc), f"cmc mismatch on instance {checked}"
        assert got_map == expected_map, f"mAP mismatch on instance {checked}"
        assert np.array_equal(got_aps, expected_aps)
        checked += 1
    report(2, "ranking-oracle equivalence", checked == 200, f"{checked} instances exact")


# --------------------------------------------------------------------------- 3
def test_criterion_3_gradient_check():
    """Analytic vs central-difference gradients, tiny preset, float64. <2 min."""
    torch.manual_seed(30)
    model = CoSaliencyNet(NetworkConfig.preset("tiny", n_identities=4))
    data = generate_toy_dataset(ToyConfig(4, 2, 64, figure_palette_seed=13), seed=30)
    batch = collate(
        data.records[:4],
        data.label_index(),
        "eval",
        TOY_PREPROCESS,
    )
    # both OBC classes present so every loss term is active
    batch.obc[:2] = 0
    batch.obc[2:] = 1
    probes = finite_difference_check(
        model, batch, LossWeights(alpha=0.8, beta=0.8), n_probes=50, eps=1e-6, seed=30
    )
    worst = max(p.rel_error for p in probes)
    report(3, "gradient check", worst < 1e-4, f"worst relative error {worst:.2e} over 50 probes")


# --------------------------------------------------------------------------- 4
def test_criterion_4_simulator_invariants():
    """Counts, mask/image synchronisation, identity multiset, schedule. <30 s."""
    data = generate_toy_dataset(ToyConfig(25, 16, 64, figure_palette_seed=17), seed=40)  # N=400
    originals = {r.source_id: r for r in data}
    schedule = OcclusionSchedule(epoch_max=10)
    simulated = 0
    for epoch, p in enumerate((0.3, 0.6, 0.9, 1.0)):
        pool = simulate_epoch(data, p, bank=data, rng=np.random.default_rng(epoch), config=SimulatorConfig())
        occluded = [r for r in pool if r.obc == 1]
        assert len(occluded) == int(math.floor(p * len(data) + 0.5)), f"count mismatch at p={p}"
        assert pool.identity_histogram() == data.identity_histogram(), "identity multiset changed"
        for record in occluded:
            top, left, h, w = record.occluder_box
            src = originals[record.source_id]
            assert (record.mask[top : top + h, left : left + w] == 0.0).all()
            inside = record.mask.copy()
            inside[top : top + h, left : left + w] = src.mask[top : top + h, left : left + w]
            assert (inside == src.mask).all(), "mask changed outside the paste rectangle"
            changed = record.image != src.image
            changed[top : top + h, left : left + w] = False
            assert not changed.any(), "image changed outside the paste rectangle"
        simulated += len(occluded)
    schedule_ok = all(
        schedule_probability(e, schedule) == e / schedule.epoch_max for e in range(schedule.epoch_max + 1)
    )
    ok = simulated >= 1000 and schedule_ok
    report(4, "simulator invariants", ok, f"{simulated} simulated records checked; schedule exact")


# --------------------------------------------------------------------------- 5
def test_criterion_5_loss_composition(tmp_path):
    """Breakdown equalities on every step of a 3-epoch run; blend bounds. <5 min."""
    data = generate_toy_dataset(ToyConfig(6, 6, 64, figure_palette_seed=19), seed=50)
    weights = LossWeights(alpha=0.8, beta=0.8)
    cfg = toy_train_config(epochs=3, seed=50, weights=weights, checkpoint_dir=tmp_path, checkpoint_every=0)
    train_teacher(data, cfg)
    rows = read_train_log(tmp_path / "train_log.csv")
    worst = 0.0
    for row in rows:
        breakdown = LossBreakdown(
            identity=row["identity"],
            obc=row["obc"],
            saliency=row["saliency"],
            multitask=row["multitask"],
            total=row["total"],
        )
        worst = max(worst, *breakdown.composition_errors(weights))
    assert worst <= 1e-6, f"composition residual {worst}"

    rng = np.random.default_rng(51)
    for _ in range(1000):
        a, b = rng.uniform(0, 10, size=2)
        lam = rng.uniform(0, 1)
        blended = blend_branches(a, b, LossWeights(lam, lam, allow_out_of_range=True))
        assert min(a, b) - 1e-12 <= blended <= max(a, b) + 1e-12
    report(5, "loss composition", True, f"{len(rows)} steps, worst residual {worst:.2e}; 1000 blend bounds")


# --------------------------------------------------------------------------- 6
def test_criterion_6_directional_ablation(bench):
    """Mean rank-1 over 3 seeds non-decreasing over C, C+S, C+S+D, C+S+D+O;
    C+S+D at least 5 points above C. <30 min total."""
    means = {}
    per_seed = {}
    for variant in ABLATION_VARIANTS:
        scores = []
        for seed in SEEDS:
            _, student_set = bench.data(seed)
            result = evaluate_on_split(bench.teacher(variant, seed), student_set)
            scores.append(result.cmc[0])
        means[variant] = float(np.mean(scores))
        per_seed[variant] = [round(float(s), 3) for s in scores]
    chain_ok = all(
        means[a] <= means[b] + 1e-12 for a, b in zip(ABLATION_VARIANTS, ABLATION_VARIANTS[1:])
    )
    gap = means["C+S+D"] - means["C"]
    detail = " ".join(f"{v}={means[v]:.3f}" for v in ABLATION_VARIANTS) + f"; D-gap={gap:+.3f}"
    print(f"  per-seed rank-1: {per_seed}")
    report(6, "directional ablation", chain_ok and gap >= 0.05, detail)


# --------------------------------------------------------------------------- 7
def test_criterion_7_teacher_transfer(bench):
    """Teacher-initialised student >= from-scratch student, mean of 3 seeds. <15 min."""
    init_scores, scratch_scores = [], []
    for seed in SEEDS:
        _, student_set = bench.data(seed)
        teacher = bench.teacher("C+S+D+O", seed)
        train_half, eval_half = split_by_identity(student_set, 0.5, seed=seed)
        pseudo = distill_masks(teacher, train_half)
        cfg = student_config(seed=seed)
        student = train_student(teacher, pseudo, cfg)
        scratch = train_student(None, pseudo, cfg)
        init_scores.append(evaluate_on_split(student, eval_half, max_rank=5).cmc[0])
        scratch_scores.append(evaluate_on_split(scratch, eval_half, max_rank=5).cmc[0])
    mean_init = float(np.mean(init_scores))
    mean_scratch = float(np.mean(scratch_scores))
    report(
        7,
        "teacher transfer",
        mean_init >= mean_scratch,
        f"teacher-init={mean_init:.3f} vs scratch={mean_scratch:.3f}",
    )


# --------------------------------------------------------------------------- 8
def test_criterion_8_determinism(tmp_path):
    """Same seed, single worker: loss to 1e-6, checkpoints bitwise, eval bytes equal. <10 min."""
    data = generate_toy_dataset(ToyConfig(4, 6, 64, figure_palette_seed=23), seed=80)
    cfg = toy_train_config(epochs=3, seed=80, checkpoint_dir=tmp_path / "run", checkpoint_every=0)

    ck_first = train_teacher(data, cfg)
    loss_first = read_train_log(tmp_path / "run" / "train_log.csv")[-1]["total"]
    bytes_first = (tmp_path / "run" / "last.npz").read_bytes()
    feats_first = extract_features(ck_first, data, TOY_PREPROCESS)
    emit_report(tmp_path / "eval_a", retrieval=None, saliency=saliency_metrics([data[0].mask], [data[0].mask]))

    ck_second = train_teacher(data, cfg)
    loss_second = read_train_log(tmp_path / "run" / "train_log.csv")[-1]["total"]
    bytes_second = (tmp_path / "run" / "last.npz").read_bytes()
    feats_second = extract_features(ck_second, data, TOY_PREPROCESS)
    emit_report(tmp_path / "eval_b", retrieval=None, saliency=saliency_metrics([data[0].mask], [data[0].mask]))

    loss_ok = abs(loss_first - loss_second) <= 1e-6
    ckpt_ok = bytes_first == bytes_second
    feats_ok = feats_first.tobytes() == feats_second.tobytes()
    report_ok = (tmp_path / "eval_a" / "metrics.json").read_bytes() == (
        tmp_path / "eval_b" / "metrics.json"
    ).read_bytes()
    report(
        8,
        "determinism",
        loss_ok and ckpt_ok and feats_ok and report_ok,
        f"dloss={abs(loss_first - loss_second):.1e}, ckpt bitwise={ckpt_ok}, eval bytes={feats_ok and report_ok}",
    )


# --------------------------------------------------------------------------- 9
def test_criterion_9_distillation_sanity(bench):
    """Pseudo-mask mean inside occluders < inside visible figure, 3-seed majority. <5 min."""
    votes = []
    details = []
    for seed in SEEDS:
        _, student_set = bench.data(seed)
        teacher = bench.teacher("C+S+D+O", seed)
        occluded = Dataset.from_records([r for r in student_set if r.obc == 1], Domain.OCCLUDED)
        distilled = distill_masks(teacher, occluded)
        box_means, figure_means = [], []
        for raw, soft in zip(occluded.records, distilled.records):
            top, left, h, w = raw.occluder_box
            box_means.append(soft.mask[top : top + h, left : left + w].mean())
            figure = raw.mask == 1.0
            if figure.any():
                figure_means.append(soft.mask[figure].mean())
        ok = float(np.mean(box_means)) < float(np.mean(figure_means))
        votes.append(ok)
        details.append(f"seed{seed}: occ={np.mean(box_means):.3f} fig={np.mean(figure_means):.3f}")
    majority = sum(votes) >= 2
    report(9, "distillation sanity", majority, "; ".join(details))
