"""Retrieval evaluation (Euclidean distances, CMC, mAP) and saliency-mask scoring.

Single-camera protocol: every gallery item sharing the probe identity counts
as relevant; ranking ties are broken by stable gallery index order.  Probes
whose identity never occurs in the gallery are excluded and reported.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.spatial.distance import cdist

from .errors import EvaluationSetupError

log = logging.getLogger(__name__)


def distance_matrix(probe_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, probes along rows."""
    probe_feats = np.asarray(probe_feats, dtype=np.float64)
    gallery_feats = np.asarray(gallery_feats, dtype=np.float64)
    if probe_feats.ndim != 2 or gallery_feats.ndim != 2:
        raise ValueError("feature arrays must be 2-D (items x dim)")
    if probe_feats.shape[1] != gallery_feats.shape[1]:
        raise ValueError(
            f"feature dimension mismatch: {probe_feats.shape[1]} vs {gallery_feats.shape[1]}"
        )
    return cdist(probe_feats, gallery_feats, metric="euclidean")


def _validate_ids(dist: np.ndarray, probe_ids: np.ndarray, gallery_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (probe_ids.size, gallery_ids.size):
        raise ValueError(
            f"distance matrix {dist.shape} inconsistent with {probe_ids.size} probes / "
            f"{gallery_ids.size} gallery items"
        )
    return probe_ids, gallery_ids


def _match_rows(dist: np.ndarray, probe_ids: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """Boolean match matrix with gallery sorted per probe by (distance, index)."""
    order = np.argsort(dist, axis=1, kind="stable")
    return gallery_ids[order] == probe_ids[:, None]


def valid_probe_mask(probe_ids: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    gallery_set = set(np.asarray(gallery_ids).tolist())
    return np.array([pid in gallery_set for pid in np.asarray(probe_ids)], dtype=bool)


def cmc(
    dist: np.ndarray,
    probe_ids: np.ndarray,
    gallery_ids: np.ndarray,
    max_rank: int = 20,
) -> np.ndarray:
    """Rank-k accuracies for k = 1..max_rank (clipped to the gallery size)."""
    probe_ids, gallery_ids = _validate_ids(dist, probe_ids, gallery_ids)
    n_gallery = gallery_ids.size
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    if max_rank > n_gallery:
        log.warning("max_rank %d exceeds gallery size %d; clipping", max_rank, n_gallery)
        max_rank = n_gallery
    valid = valid_probe_mask(probe_ids, gallery_ids)
    if not valid.any():
        raise EvaluationSetupError("no probe identity occurs in the gallery")
    if not valid.all():
        log.warning("excluding %d probes with no gallery match", int((~valid).sum()))
    matches = _match_rows(dist[valid], probe_ids[valid], gallery_ids)
    first_hit = matches.argmax(axis=1)  # rank (0-based) of the nearest correct match
    hist = np.bincount(first_hit, minlength=n_gallery).astype(np.float64)
    curve = np.cumsum(hist) / matches.shape[0]
    return curve[:max_rank]


def mean_average_precision(
    dist: np.ndarray,
    probe_ids: np.ndarray,
    gallery_ids: np.ndarray,
) -> tuple[float, np.ndarray]:
    """mAP and per-probe APs (valid probes only, in probe order)."""
    probe_ids, gallery_ids = _validate_ids(dist, probe_ids, gallery_ids)
    valid = valid_probe_mask(probe_ids, gallery_ids)
    if not valid.any():
        raise EvaluationSetupError("no probe identity occurs in the gallery")
    matches = _match_rows(dist[valid], probe_ids[valid], gallery_ids)
    ranks = np.arange(1, gallery_ids.size + 1, dtype=np.float64)
    cumulative_hits = np.cumsum(matches, axis=1)
    precision_at_rank = cumulative_hits / ranks[None, :]
    # mean over the relevant positions only; zero-padding would perturb the
    # floating-point sum and break exact agreement with a by-hand reference
    per_probe_ap = np.array([precision_at_rank[i][matches[i]].mean() for i in range(matches.shape[0])])
    return float(per_probe_ap.mean()), per_probe_ap


@dataclass(frozen=True)
class RetrievalResult:
    cmc: np.ndarray  # rank-k accuracies, k = 1..max_rank
    map: float
    per_probe_ap: np.ndarray
    excluded_probes: tuple[int, ...]  # probe indices with no gallery match

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


def evaluate_retrieval(
    probe_feats: np.ndarray,
    gallery_feats: np.ndarray,
    probe_ids: np.ndarray,
    gallery_ids: np.ndarray,
    max_rank: int = 20,
) -> RetrievalResult:
    dist = distance_matrix(probe_feats, gallery_feats)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    curve = cmc(dist, probe_ids, gallery_ids, max_rank=max_rank)
    map_value, per_probe_ap = mean_average_precision(dist, probe_ids, gallery_ids)
    excluded = tuple(int(i) for i in np.flatnonzero(~valid_probe_mask(probe_ids, gallery_ids)))
    return RetrievalResult(cmc=curve, map=map_value, per_probe_ap=per_probe_ap, excluded_probes=excluded)


# ---------------------------------------------------------------------------
# saliency metrics
# ---------------------------------------------------------------------------


def f_measure(precision: float, recall: float, beta2: float = 0.3) -> float:
    """(1 + beta2) * P * R / (beta2 * P + R); 0 when the denominator vanishes."""
    denominator = beta2 * precision + recall
    if denominator == 0.0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denominator


@dataclass(frozen=True)
class SaliencyScore:
    precision: float
    recall: float
    f_measure: float
    threshold: float
    macro_precision: float
    macro_recall: float
    macro_f_measure: float
    degenerate: bool = False  # some denominator vanished and was reported as 0


def saliency_metrics(
    pred_masks: Sequence[np.ndarray] | np.ndarray,
    gt_masks: Sequence[np.ndarray] | np.ndarray,
    threshold: float = 0.5,
    beta2: float = 0.3,
) -> SaliencyScore:
    """Pixel-pooled (micro) precision/recall/F over all pairs; macro also reported."""
    if isinstance(pred_masks, np.ndarray) and pred_masks.ndim == 2:
        pred_masks = [pred_masks]
        gt_masks = [gt_masks]  # type: ignore[list-item]
    pred_list = [np.asarray(m, dtype=np.float64) for m in pred_masks]
    gt_list = [np.asarray(m, dtype=np.float64) for m in gt_masks]
    if len(pred_list) != len(gt_list) or not pred_list:
        raise ValueError(f"need equal non-empty mask lists, got {len(pred_list)} vs {len(gt_list)}")
    tp = fp = fn = 0.0
    macro_p, macro_r = [], []
    degenerate = False
    for pred, gt in zip(pred_list, gt_list):
        if pred.shape != gt.shape:
            raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
        if not np.isin(np.unique(gt), (0.0, 1.0)).all():
            raise ValueError("ground-truth masks must be binary")
        pred_bin = pred >= threshold
        gt_bin = gt >= 0.5
        tp_i = float(np.count_nonzero(pred_bin & gt_bin))
        fp_i = float(np.count_nonzero(pred_bin & ~gt_bin))
        fn_i = float(np.count_nonzero(~pred_bin & gt_bin))
        tp, fp, fn = tp + tp_i, fp + fp_i, fn + fn_i
        if tp_i + fp_i == 0 or tp_i + fn_i == 0:
            degenerate = True
        macro_p.append(tp_i / (tp_i + fp_i) if tp_i + fp_i else 0.0)
        macro_r.append(tp_i / (tp_i + fn_i) if tp_i + fn_i else 0.0)
    if tp + fp == 0 or tp + fn == 0:
        degenerate = True
        log.warning("degenerate saliency metrics: empty prediction or ground truth")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    mean_macro_p = float(np.mean(macro_p))
    mean_macro_r = float(np.mean(macro_r))
    return SaliencyScore(
        precision=precision,
        recall=recall,
        f_measure=f_measure(precision, recall, beta2),
        threshold=threshold,
        macro_precision=mean_macro_p,
        macro_recall=mean_macro_r,
        macro_f_measure=f_measure(mean_macro_p, mean_macro_r, beta2),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def emit_report(
    out_dir: Path | str,
    retrieval: RetrievalResult | None = None,
    saliency: SaliencyScore | None = None,
    saliency_maps: dict[str, np.ndarray] | None = None,
) -> list[Path]:
    """Write metrics.json plus CSV curves (and optional saliency-map PNGs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    metrics: dict[str, object] = {}
    if retrieval is not None:
        metrics["map"] = retrieval.map
        metrics["cmc"] = [float(v) for v in retrieval.cmc]
        for k in (1, 2, 5, 10):
            if k <= retrieval.cmc.size:
                metrics[f"rank_{k}"] = float(retrieval.cmc[k - 1])
        metrics["n_excluded_probes"] = len(retrieval.excluded_probes)
        curve_path = out_dir / "cmc_curve.csv"
        lines = ["rank,accuracy"]
        lines += [f"{k + 1},{float(v)!r}" for k, v in enumerate(retrieval.cmc)]
        curve_path.write_text("\n".join(lines) + "\n")
        written.append(curve_path)
        ap_path = out_dir / "per_probe_ap.csv"
        lines = ["probe,ap"]
        lines += [f"{i},{float(v)!r}" for i, v in enumerate(retrieval.per_probe_ap)]
        ap_path.write_text("\n".join(lines) + "\n")
        written.append(ap_path)
    if saliency is not None:
        metrics["saliency"] = {
            "precision": saliency.precision,
            "recall": saliency.recall,
            "f_measure": saliency.f_measure,
            "threshold": saliency.threshold,
            "macro_precision": saliency.macro_precision,
            "macro_recall": saliency.macro_recall,
            "macro_f_measure": saliency.macro_f_measure,
            "degenerate": saliency.degenerate,
        }
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
    written.insert(0, metrics_path)
    if saliency_maps:
        maps_dir = out_dir / "saliency_maps"
        maps_dir.mkdir(exist_ok=True)
        for name in sorted(saliency_maps):
            arr = np.clip(np.rint(np.asarray(saliency_maps[name]) * 255.0), 0, 255).astype(np.uint8)
            path = maps_dir / f"{name}.png"
            Image.fromarray(arr, mode="L").save(path)
            written.append(path)
    return written
