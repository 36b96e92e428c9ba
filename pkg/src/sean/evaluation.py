"""Dice, lesion-level metrics, alignment error, and dataset evaluation.

Lesion instances are connected components: 8-connectivity for 2D masks,
26-connectivity for 3D masks (so in-plane components merged across
adjacent slices count as one lesion). Predicted and ground-truth instances
are matched one-to-one greedily in descending IoU order; a pair counts as
a hit when its IoU reaches the threshold.
"""

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .align import RigidParams, estimate_volume_params, invert_params, warp_volume
from .errors import ConfigError, DataError
from .fileio import atomic_write_text, write_json
from .network import HybridUnet
from .phantom import CtVolume, extract_slab, preprocess


def dice_coefficient(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass(frozen=True)
class LesionInstance:
    """One connected lesion component."""

    coords: np.ndarray  # (n, ndim) voxel indices

    @property
    def area(self) -> int:
        return self.coords.shape[0]


def connected_components(mask: np.ndarray) -> list[LesionInstance]:
    """Components with full (diagonal-including) connectivity, ordered by
    their minimum coordinates."""
    mask = np.asarray(mask)
    if mask.ndim not in (2, 3):
        raise ValueError("mask must be 2D or 3D")
    structure = np.ones((3,) * mask.ndim, dtype=int)
    labels, count = ndimage.label(mask != 0, structure=structure)
    instances = []
    for lab in range(1, count + 1):
        coords = np.argwhere(labels == lab)
        instances.append(LesionInstance(coords=coords))
    instances.sort(key=lambda inst: tuple(inst.coords.min(axis=0)))
    return instances


@dataclass(frozen=True)
class LesionMatchResult:
    recall: float
    precision: float
    f1: float
    matches: tuple[tuple[int, int], ...]  # (gt index, pred index) pairs
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_pred: int


def _prf(tp: int, n_gt: int, n_pred: int) -> tuple[float, float, float]:
    recall = 1.0 if n_gt == 0 else tp / n_gt
    precision = 1.0 if n_pred == 0 else tp / n_pred
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return recall, precision, f1


def lesion_prf(pred_mask: np.ndarray, gt_mask: np.ndarray, iou_threshold: float = 0.1) -> LesionMatchResult:
    """Instance-level recall/precision/F1 with greedy one-to-one matching."""
    if not 0.0 <= iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in [0, 1)")
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("pred and gt masks must share a shape")

    structure = np.ones((3,) * pred_mask.ndim, dtype=int)
    gt_labels, n_gt = ndimage.label(gt_mask != 0, structure=structure)
    pred_labels, n_pred = ndimage.label(pred_mask != 0, structure=structure)
    gt_order = _labels_by_min_coord(gt_labels, n_gt)
    pred_order = _labels_by_min_coord(pred_labels, n_pred)

    # intersection counts for all (gt, pred) label pairs in one pass
    both = (gt_labels > 0) & (pred_labels > 0)
    inter = np.zeros((n_gt + 1, n_pred + 1), dtype=np.int64)
    if both.any():
        flat = gt_labels[both].astype(np.int64) * (n_pred + 1) + pred_labels[both].astype(np.int64)
        counts = np.bincount(flat, minlength=(n_gt + 1) * (n_pred + 1))
        inter = counts.reshape(n_gt + 1, n_pred + 1)
    gt_areas = np.bincount(gt_labels.ravel(), minlength=n_gt + 1)
    pred_areas = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)

    candidates = []
    for gi, glab in enumerate(gt_order):
        for pi, plab in enumerate(pred_order):
            i = inter[glab, plab]
            if i == 0:
                continue
            union = gt_areas[glab] + pred_areas[plab] - i
            iou = i / union
            if iou >= iou_threshold:
                candidates.append((iou, gi, pi))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    used_gt: set[int] = set()
    used_pred: set[int] = set()
    matches = []
    for _, gi, pi in candidates:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        matches.append((gi, pi))
    tp = len(matches)
    recall, precision, f1 = _prf(tp, n_gt, n_pred)
    return LesionMatchResult(recall, precision, f1, tuple(sorted(matches)), tp,
                             n_pred - tp, n_gt - tp, n_gt, n_pred)


def _labels_by_min_coord(labels: np.ndarray, count: int) -> list[int]:
    keyed = []
    for lab in range(1, count + 1):
        coords = np.argwhere(labels == lab)
        keyed.append((tuple(coords.min(axis=0)), lab))
    keyed.sort()
    return [lab for _, lab in keyed]


def alignment_error(pred: RigidParams, truth: RigidParams) -> tuple[float, float, float]:
    """(|dtheta| degrees with wrap-around, |dtx| px, |dty| px)."""
    d = pred.theta - truth.theta
    d = (d + math.pi) % (2.0 * math.pi) - math.pi
    return abs(math.degrees(d)), abs(pred.tx - truth.tx), abs(pred.ty - truth.ty)


@dataclass(frozen=True)
class EvalCase:
    volume: CtVolume
    mask: np.ndarray | None
    truth: RigidParams | None = None
    case_id: str = ""


@dataclass
class EvalConfig:
    temporal_radius: int = 1
    iou_threshold: float = 0.1
    prob_threshold: float = 0.5
    batch_size: int = 8
    bench: bool = False


@dataclass
class MetricsReport:
    case_ids: list[str]
    per_case_dice: list[float]
    mean_dice: float
    lesion_tp: int
    lesion_fp: int
    lesion_fn: int
    lesion_recall: float
    lesion_precision: float
    lesion_f1: float
    per_case_rows: list[dict]
    align_mean_abs_dtheta_deg: float | None
    align_mean_abs_dtx_px: float | None
    align_mean_abs_dty_px: float | None
    timings: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "mean_dice": self.mean_dice,
            "lesion": {
                "tp": self.lesion_tp,
                "fp": self.lesion_fp,
                "fn": self.lesion_fn,
                "recall": self.lesion_recall,
                "precision": self.lesion_precision,
                "f1": self.lesion_f1,
            },
            "alignment": {
                "mean_abs_dtheta_deg": self.align_mean_abs_dtheta_deg,
                "mean_abs_dtx_px": self.align_mean_abs_dtx_px,
                "mean_abs_dty_px": self.align_mean_abs_dty_px,
            },
            "cases": self.per_case_rows,
            "timings": self.timings,
        }


def predict_volume(model: HybridUnet, align_net, vol: CtVolume, cfg: EvalConfig):
    """Full per-case pipeline; returns (pred mask, probabilities, params, align_seconds).

    The volume is aligned with the estimated parameters, preprocessed, and
    segmented slice by slice; predicted probabilities are warped back to
    the original frame before thresholding so outputs live in the space of
    the input annotation.
    """
    t0 = time.perf_counter()
    params = estimate_volume_params(align_net, vol)
    aligned = warp_volume(vol.voxels, params)
    align_seconds = time.perf_counter() - t0

    pre = preprocess(CtVolume(voxels=aligned, spacing=vol.spacing, id=vol.id))
    d = pre.voxels.shape[0]
    radius = cfg.temporal_radius
    model.eval()
    probs = np.empty_like(pre.voxels, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, d, cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, d))
            slabs = np.stack([extract_slab(pre.voxels, i, radius) for i in idx])
            logits = model(torch.from_numpy(slabs).float())[:, 0]
            probs[list(idx)] = torch.sigmoid(logits).numpy()

    back = warp_volume(probs, invert_params(params))
    pred = (back >= cfg.prob_threshold).astype(np.uint8)
    return pred, back, params, align_seconds


def evaluate_dataset(model: HybridUnet, align_net, cases: list[EvalCase], cfg: EvalConfig) -> MetricsReport:
    """Run the pipeline over a dataset and assemble the metrics report.

    Per-case Dice is macro-averaged; lesion counts are pooled across cases
    before computing recall/precision/F1. Alignment errors are reported
    when ground-truth parameters are available (the truth compared against
    is the inverse of the applied perturbation).
    """
    if not cases:
        raise DataError("no cases to evaluate")
    case_ids = []
    dices = []
    rows = []
    tp = fp = fn = n_gt_total = n_pred_total = 0
    dthetas, dtxs, dtys = [], [], []
    align_times = []
    t_start = time.perf_counter()

    for case in sorted(cases, key=lambda c: c.case_id):
        if case.mask is None:
            raise DataError(f"case {case.case_id!r} has no ground-truth mask")
        if getattr(model, "temporal_radius", cfg.temporal_radius) != cfg.temporal_radius:
            raise ConfigError("model temporal radius does not match the evaluation config")
        pred, _, params, align_s = predict_volume(model, align_net, case.volume, cfg)
        align_times.append(align_s)

        dice = dice_coefficient(pred, case.mask)
        match = lesion_prf(pred, case.mask, cfg.iou_threshold)
        case_ids.append(case.case_id)
        dices.append(dice)
        tp += match.tp
        fp += match.fp
        fn += match.fn
        n_gt_total += match.n_gt
        n_pred_total += match.n_pred
        rows.append({
            "case_id": case.case_id,
            "dice": dice,
            "n_gt": match.n_gt,
            "n_pred": match.n_pred,
            "tp": match.tp,
            "fp": match.fp,
            "fn": match.fn,
        })
        if case.truth is not None:
            dtheta, dtx, dty = alignment_error(params, invert_params(case.truth))
            dthetas.append(dtheta)
            dtxs.append(dtx)
            dtys.append(dty)

    recall, precision, f1 = _prf(tp, n_gt_total, n_pred_total)
    timings = {
        "total_seconds": time.perf_counter() - t_start,
        "num_cases": len(case_ids),
    }
    if cfg.bench:
        timings["alignment_seconds_per_volume"] = float(np.mean(align_times))
        timings["alignment_seconds_max"] = float(np.max(align_times))
    return MetricsReport(
        case_ids=case_ids,
        per_case_dice=dices,
        mean_dice=float(np.mean(dices)),
        lesion_tp=tp,
        lesion_fp=fp,
        lesion_fn=fn,
        lesion_recall=recall,
        lesion_precision=precision,
        lesion_f1=f1,
        per_case_rows=rows,
        align_mean_abs_dtheta_deg=float(np.mean(dthetas)) if dthetas else None,
        align_mean_abs_dtx_px=float(np.mean(dtxs)) if dtxs else None,
        align_mean_abs_dty_px=float(np.mean(dtys)) if dtys else None,
        timings=timings,
    )


def write_report(report: MetricsReport, out_dir) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", report.to_json_dict())
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["case_id", "dice", "n_gt", "n_pred", "tp", "fp", "fn"])
    for row in report.per_case_rows:
        writer.writerow([row["case_id"], repr(row["dice"]), row["n_gt"], row["n_pred"],
                         row["tp"], row["fp"], row["fn"]])
    atomic_write_text(out_dir / "report.csv", buf.getvalue())


def write_overlay_png(path, slice_hu: np.ndarray, pred_slice: np.ndarray,
                      gt_slice: np.ndarray | None = None) -> None:
    """Grayscale brain-window slice with the prediction contour in red
    (and the ground-truth contour in green when given)."""
    from PIL import Image

    lo, hi = 40.0, 100.0
    gray = np.clip((slice_hu - lo) / (hi - lo), 0.0, 1.0)
    rgb = np.stack([gray, gray, gray], axis=-1)

    def contour(mask):
        m = mask.astype(bool)
        return m ^ ndimage.binary_erosion(m)

    pc = contour(pred_slice)
    rgb[pc] = (1.0, 0.15, 0.15)
    if gt_slice is not None:
        gc = contour(gt_slice)
        rgb[gc & ~pc] = (0.15, 1.0, 0.15)
    img = Image.fromarray((rgb * 255).astype(np.uint8))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
