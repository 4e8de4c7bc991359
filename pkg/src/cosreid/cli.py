"""Command-line entry point.

One command, seven subcommands: synth-data, simulate-preview, teach,
distill-masks, study, eval-reid, eval-saliency.  Training subcommands read a
JSON config file (``--set key=value`` overrides individual entries) and every
run echoes its resolved configuration into the output directory before doing
any work.  Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    BackgroundTexture,
    Domain,
    LayoutSpec,
    PreprocessConfig,
    ToyConfig,
    generate_toy_dataset,
    load_dataset,
    save_dataset,
)
from .errors import ConfigurationError, EvaluationSetupError
from .evaluator import emit_report, evaluate_retrieval, saliency_metrics
from .losses import LossWeights
from .seeding import rng_for
from .simulator import (
    OcclusionSchedule,
    PatchOrigin,
    ScheduleMode,
    SimulatorConfig,
    apply_occlusion,
    occlude_dataset,
    sample_occluder,
)
from .trainer import (
    TrainConfig,
    distill_masks,
    extract_features,
    load_checkpoint,
    train_student,
    train_teacher,
)

log = logging.getLogger(__name__)


def _write_resolved_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


def _parse_set_overrides(pairs: list[str] | None) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "seed": 0,
    "epochs": 30,
    "batch_size": 8,
    "lr_backbone": 1e-3,
    "lr_branches": 2e-3,
    "alpha": 0.8,
    "beta": 0.8,
    "preset": "tiny",
    "resize_to": 72,
    "crop_to": 64,
    "use_saliency": True,
    "use_obc": True,
    "use_simulator": True,
    "schedule": "growing",
    "area_fraction": [0.1, 0.4],
    "bank_mode": "border_crop",
    "checkpoint_every": 1,
    "teacher": None,  # student stage only
}


def _resolve_train_settings(args) -> dict:
    resolved = dict(TRAIN_DEFAULTS)
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(resolved)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    overrides = _parse_set_overrides(getattr(args, "set", None))
    unknown = set(overrides) - set(resolved)
    if unknown:
        raise ConfigurationError(f"unknown --set keys: {sorted(unknown)}")
    resolved.update(overrides)
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.out is not None:
        resolved["out"] = str(args.out)
    if resolved["data"] is None:
        raise ConfigurationError("config must name a 'data' directory")
    if resolved["out"] is None:
        raise ConfigurationError("an output directory is required ('out' key or --out)")
    return resolved


def _train_config_from(resolved: dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        lr_backbone=float(resolved["lr_backbone"]),
        lr_branches=float(resolved["lr_branches"]),
        weights=LossWeights(alpha=float(resolved["alpha"]), beta=float(resolved["beta"])),
        schedule=OcclusionSchedule(
            epoch_max=int(resolved["epochs"]), mode=ScheduleMode(resolved["schedule"])
        ),
        seed=int(resolved["seed"]),
        checkpoint_dir=Path(resolved["out"]),
        checkpoint_every=int(resolved["checkpoint_every"]),
        use_saliency=bool(resolved["use_saliency"]),
        use_obc=bool(resolved["use_obc"]),
        use_simulator=bool(resolved["use_simulator"]),
        simulator=SimulatorConfig(
            area_fraction_range=tuple(resolved["area_fraction"]),
            bank_mode=PatchOrigin(resolved["bank_mode"]),
        ),
        preprocess=PreprocessConfig(
            resize_to=int(resolved["resize_to"]), crop_to=int(resolved["crop_to"])
        ),
        network_preset=str(resolved["preset"]),
    )


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    out = Path(args.out)
    resolved = {
        "subcommand": "synth-data",
        "ids": args.ids,
        "per_id": args.per_id,
        "size": args.size,
        "seed": args.seed,
        "palette_seed": args.palette_seed,
        "texture": args.texture,
        "occlude_fraction": args.occlude_fraction,
        "area_fraction": list(args.area),
        "out": str(out),
    }
    _write_resolved_config(out, resolved)
    config = ToyConfig(
        n_identities=args.ids,
        images_per_identity=args.per_id,
        image_size=args.size,
        figure_palette_seed=args.palette_seed,
        background_texture=BackgroundTexture(args.texture),
    )
    dataset = generate_toy_dataset(config, args.seed)
    if args.occlude_fraction > 0:
        sim = SimulatorConfig(area_fraction_range=tuple(args.area))
        dataset = occlude_dataset(dataset, args.occlude_fraction, sim, seed=args.seed)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset)} records ({len(dataset.identities)} identities) to {out}")
    return 0


def _cmd_simulate_preview(args) -> int:
    out = Path(args.out)
    resolved = {
        "subcommand": "simulate-preview",
        "data": str(args.data),
        "p": args.p,
        "count": args.count,
        "seed": args.seed,
        "area_fraction": list(args.area),
        "bank_mode": args.bank_mode,
        "out": str(out),
    }
    _write_resolved_config(out, resolved)
    dataset = load_dataset(args.data, LayoutSpec(Domain.FULL_BODY))
    sim = SimulatorConfig(area_fraction_range=tuple(args.area), bank_mode=PatchOrigin(args.bank_mode))
    rng = rng_for(args.seed, "simulate-preview")
    n = min(args.count, len(dataset))
    chosen = rng.choice(len(dataset), size=n, replace=False)
    for i in sorted(int(c) for c in chosen):
        record = dataset.records[i]
        if rng.uniform() < args.p:
            patch = sample_occluder(dataset, sim, (record.height, record.width), rng)
            after = apply_occlusion(record, patch, rng)
        else:
            after = record
        for tag, rec in (("before", record), ("after", after)):
            img8 = np.clip(np.rint(rec.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img8, "RGB").save(out / f"{i:05d}_{tag}.png")
            msk8 = np.clip(np.rint(rec.mask * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(msk8, "L").save(out / f"{i:05d}_{tag}_mask.png")
    print(f"wrote {n} before/after pairs to {out}")
    return 0


def _cmd_teach(args) -> int:
    resolved = _resolve_train_settings(args)
    resolved["subcommand"] = "teach"
    out = Path(resolved["out"])
    _write_resolved_config(out, resolved)
    dataset = load_dataset(resolved["data"], LayoutSpec(Domain.FULL_BODY))
    checkpoint = train_teacher(dataset, _train_config_from(resolved))
    print(f"teacher checkpoint written to {out / 'last.npz'} (epoch {checkpoint.epoch})")
    return 0


def _cmd_study(args) -> int:
    resolved = _resolve_train_settings(args)
    resolved["subcommand"] = "study"
    resolved["use_simulator"] = False
    out = Path(resolved["out"])
    _write_resolved_config(out, resolved)
    teacher = load_checkpoint(resolved["teacher"]) if resolved["teacher"] else None
    dataset = load_dataset(resolved["data"], LayoutSpec(Domain.OCCLUDED))
    checkpoint = train_student(teacher, dataset, _train_config_from(resolved))
    print(f"student checkpoint written to {out / 'last.npz'} (epoch {checkpoint.epoch})")
    return 0


def _cmd_distill_masks(args) -> int:
    out = Path(args.out)
    resolved = {
        "subcommand": "distill-masks",
        "ckpt": str(args.ckpt),
        "data": str(args.data),
        "out": str(out),
        "seed": args.seed,
    }
    _write_resolved_config(out, resolved)
    teacher = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, LayoutSpec(Domain.OCCLUDED))
    distilled = distill_masks(teacher, dataset)
    save_dataset(distilled, out)
    print(f"wrote {len(distilled)} records with distilled masks to {out}")
    return 0


def _cmd_eval_reid(args) -> int:
    out = Path(args.out)
    resolved = {
        "subcommand": "eval-reid",
        "probes": str(args.probes),
        "gallery": str(args.gallery),
        "ckpt": str(args.ckpt),
        "max_rank": args.max_rank,
        "seed": args.seed,
        "out": str(out),
    }
    _write_resolved_config(out, resolved)
    checkpoint = load_checkpoint(args.ckpt)
    probes = load_dataset(args.probes, LayoutSpec(Domain.OCCLUDED))
    gallery = load_dataset(args.gallery, LayoutSpec(Domain.FULL_BODY))
    preprocess_cfg = PreprocessConfig(
        resize_to=round(checkpoint.network.input_size * 1.125),
        crop_to=checkpoint.network.input_size,
    )
    probe_feats = extract_features(checkpoint, probes, preprocess_cfg)
    gallery_feats = extract_features(checkpoint, gallery, preprocess_cfg)
    result = evaluate_retrieval(
        probe_feats,
        gallery_feats,
        [r.identity for r in probes.records],
        [r.identity for r in gallery.records],
        max_rank=args.max_rank,
    )
    emit_report(out, retrieval=result)
    print(f"rank-1 {result.cmc[0]:.4f} mAP {result.map:.4f} -> {out / 'metrics.json'}")
    return 0


def _load_mask_dir(root: Path) -> dict[str, np.ndarray]:
    masks = {}
    for path in sorted(root.rglob("*.png")):
        with Image.open(path) as im:
            masks[str(path.relative_to(root))] = (
                np.asarray(im.convert("L"), dtype=np.uint8).astype(np.float64) / 255.0
            )
    if not masks:
        raise FileNotFoundError(f"no PNG masks under {root}")
    return masks


def _cmd_eval_saliency(args) -> int:
    out = Path(args.out)
    resolved = {
        "subcommand": "eval-saliency",
        "pred": str(args.pred),
        "gt": str(args.gt),
        "threshold": args.threshold,
        "out": str(out),
    }
    _write_resolved_config(out, resolved)
    pred = _load_mask_dir(Path(args.pred))
    gt = _load_mask_dir(Path(args.gt))
    common = sorted(set(pred) & set(gt))
    if not common:
        raise EvaluationSetupError("prediction and ground-truth directories share no mask names")
    gt_masks = [(gt[name] >= 0.5).astype(np.float64) for name in common]
    score = saliency_metrics([pred[name] for name in common], gt_masks, threshold=args.threshold)
    emit_report(out, saliency=score)
    print(
        f"precision {score.precision:.4f} recall {score.recall:.4f} "
        f"F {score.f_measure:.4f} -> {out / 'metrics.json'}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosreid",
        description="Occlusion-robust person re-id: teacher-student co-saliency training",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a toy dataset directory")
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--per-id", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--palette-seed", type=int, default=0)
    p.add_argument("--texture", choices=[t.value for t in BackgroundTexture], default="noise")
    p.add_argument("--occlude-fraction", type=float, default=0.0,
                   help="per-identity fraction of records to occlude (makes an occluded-domain set)")
    p.add_argument("--area", type=float, nargs=2, default=(0.15, 0.4), metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("simulate-preview", help="write before/after occlusion pairs for visual audit")
    p.add_argument("--data", required=True)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--area", type=float, nargs=2, default=(0.1, 0.4), metavar=("LO", "HI"))
    p.add_argument("--bank-mode", choices=[m.value for m in PatchOrigin], default="border_crop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate_preview)

    for name, handler, help_text in (
        ("teach", _cmd_teach, "train the teacher on full-body data"),
        ("study", _cmd_study, "fine-tune the student on occluded data"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=handler)

    p = sub.add_parser("distill-masks", help="replace dataset masks with teacher pseudo masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_distill_masks)

    p = sub.add_parser("eval-reid", help="retrieval evaluation: CMC and mAP")
    p.add_argument("--probes", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_reid)

    p = sub.add_parser("eval-saliency", help="saliency mask precision/recall/F-measure")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_saliency)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: ConfigurationError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
