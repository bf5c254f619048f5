"""Segmentation (IoU / precision) and misclassification-detection metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_types import NUM_CLASSES, TAXONOMY, ShapeError

# threshold grid for calibration: -1.00, -0.99, ..., 1.00
THRESHOLDS = np.round(np.linspace(-1.0, 1.0, 201), 2)


class UndefinedMetricError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total: int = 0

    @classmethod
    def zeros(cls, num_classes: int = NUM_CLASSES) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), 0)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.total + other.total)

    @property
    def gt_pixels(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def pred_pixels(self) -> np.ndarray:
        return self.tp + self.fp


def _confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def seg_confusion(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray],
                  num_classes: int = NUM_CLASSES) -> ConfusionCounts:
    """Pixel counts pooled over every pixel of every image pair."""
    counts = ConfusionCounts.zeros(num_classes)
    for pred, gt in zip(preds, gts, strict=True):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        cm = _confusion_matrix(pred, gt, num_classes)
        tp = np.diag(cm)
        counts = counts + ConfusionCounts(tp, cm.sum(0) - tp, cm.sum(1) - tp, int(gt.size))
    return counts


@dataclass
class SegMetricsReport:
    iou: np.ndarray
    precision: np.ndarray
    miou: float
    mp: float
    pixel_counts: np.ndarray
    counts: ConfusionCounts
    label: str = ""

    def to_dict(self) -> dict:
        names = TAXONOMY.short_names[: len(self.iou)]
        return {
            "label": self.label,
            "classes": list(names),
            "IoU": {**{n: float(v) for n, v in zip(names, self.iou)}, "All": self.miou},
            "Precision": {**{n: float(v) for n, v in zip(names, self.precision)}, "All": self.mp},
            "mIoU": self.miou,
            "mP": self.mp,
            "pixels": {n: int(v) for n, v in zip(names, self.pixel_counts)},
            "counts": {"TP": self.counts.tp.tolist(), "FP": self.counts.fp.tolist(), "FN": self.counts.fn.tolist()},
        }


def seg_report(counts: ConfusionCounts, label: str = "") -> SegMetricsReport:
    """Per-class IoU and precision plus their class means.

    A class absent from both prediction and ground truth scores 1 for both.
    A class present in the ground truth but never predicted has precision 0.
    """
    tp, fp, fn = (a.astype(np.float64) for a in (counts.tp, counts.fp, counts.fn))
    union = tp + fp + fn
    iou = np.divide(tp, union, out=np.ones_like(tp), where=union > 0)
    pred = tp + fp
    precision = np.divide(tp, pred, out=np.where(union > 0, 0.0, 1.0), where=pred > 0)
    return SegMetricsReport(iou, precision, float(iou.mean()), float(precision.mean()),
                            counts.gt_pixels.copy(), counts, label)


def average_precision(scores: np.ndarray, correct: np.ndarray, positive: str = "correct") -> float:
    """Step-wise area under the precision-recall curve.

    ``positive="correct"`` ranks by score with correct pixels as positives (AP);
    ``positive="incorrect"`` ranks by negated score with errors as positives (AP-E).
    Thresholds are the distinct score values.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if scores.shape != correct.shape:
        raise ShapeError("scores and correctness flags differ in length")
    if positive == "correct":
        y, s = correct, scores
    elif positive == "incorrect":
        y, s = ~correct, -scores
    else:
        raise ValueError(f"positive must be 'correct' or 'incorrect', got {positive!r}")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError(f"average precision undefined: no {positive} samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # last index of each distinct score
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def uq_mse(u: np.ndarray, u_hat: np.ndarray) -> float:
    u, u_hat = np.asarray(u, dtype=np.float64), np.asarray(u_hat, dtype=np.float64)
    if u.shape != u_hat.shape:
        raise ShapeError(f"soft label shapes differ: {u.shape} vs {u_hat.shape}")
    return float(np.mean((u - u_hat) ** 2))


@dataclass(frozen=True)
class DetectionCounts:
    """Errors are the positive class; a pixel is flagged correct iff u_hat >= tau."""

    tp: int
    fn: int
    tn: int
    fp: int


def _rate(num: float, den: float) -> float:
    return 1.0 if den == 0 else num / den


def f1_ss(spec: float, sens: float) -> float:
    return 0.0 if spec + sens == 0 else 2 * sens * spec / (sens + spec)


def detection_counts(u_hat: np.ndarray, correct: np.ndarray, tau: float) -> DetectionCounts:
    u_hat = np.asarray(u_hat, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if u_hat.shape != correct.shape:
        raise ShapeError("predictions and correctness flags differ in length")
    flagged_ok = u_hat >= tau
    return DetectionCounts(
        tp=int(np.sum(~correct & ~flagged_ok)),
        fn=int(np.sum(~correct & flagged_ok)),
        tn=int(np.sum(correct & flagged_ok)),
        fp=int(np.sum(correct & ~flagged_ok)),
    )


def spec_sens_f1(u_hat: np.ndarray, correct: np.ndarray, tau: float) -> tuple[float, float, float]:
    """Specificity (correct kept), sensitivity (errors caught) and their harmonic mean."""
    c = detection_counts(u_hat, correct, tau)
    spec = _rate(c.tn, c.tn + c.fp)
    sens = _rate(c.tp, c.tp + c.fn)
    return spec, sens, f1_ss(spec, sens)


def f1_curve(u_hat: np.ndarray, correct: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    """F1-SS at every threshold, via sorted counts instead of one pass per threshold."""
    u_hat = np.asarray(u_hat, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    ok, bad = np.sort(u_hat[correct]), np.sort(u_hat[~correct])
    tn = ok.size - np.searchsorted(ok, thresholds, side="left")
    fn = bad.size - np.searchsorted(bad, thresholds, side="left")
    spec = tn / ok.size if ok.size else np.ones(len(thresholds))
    sens = (bad.size - fn) / bad.size if bad.size else np.ones(len(thresholds))
    den = spec + sens
    return np.divide(2 * spec * sens, den, out=np.zeros_like(den, dtype=np.float64), where=den > 0)


def select_threshold(u_hat_val: np.ndarray, correct_val: np.ndarray) -> float:
    """Grid threshold maximizing F1-SS on validation pixels; ties go to the smallest."""
    correct_val = np.asarray(correct_val, dtype=bool)
    if correct_val.all() or not correct_val.any():
        raise CalibrationError("threshold calibration needs both correct and incorrect pixels")
    curve = f1_curve(u_hat_val, correct_val, THRESHOLDS)
    return float(THRESHOLDS[int(np.argmax(curve))])


@dataclass
class UqMetricsReport:
    ap: float
    ap_e: float
    mse: float
    spec: float
    sens: float
    f1_ss: float
    tau: float
    counts: DetectionCounts
    extra: dict = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "AP": self.ap,
            "AP-E": self.ap_e,
            "MSE": self.mse,
            "Spec": self.spec,
            "Sens": self.sens,
            "F1-SS": self.f1_ss,
            "tau": self.tau,
            "counts": {"TP": self.counts.tp, "FN": self.counts.fn, "TN": self.counts.tn, "FP": self.counts.fp},
            **self.extra,
        }


def uq_report(u: np.ndarray, u_hat: np.ndarray, correct: np.ndarray, tau: float,
              max_prob: np.ndarray | None = None, label: str = "") -> UqMetricsReport:
    """All six detection measures at a fixed threshold.

    ``max_prob`` (maximum softmax probability) adds a baseline ranking for comparison.
    """
    correct = np.asarray(correct, dtype=bool)
    spec, sens, f1 = spec_sens_f1(u_hat, correct, tau)
    extra = {}
    if max_prob is not None:
        extra["MSP-AP"] = _safe_ap(max_prob, correct, "correct")
        extra["MSP-AP-E"] = _safe_ap(max_prob, correct, "incorrect")
    return UqMetricsReport(
        ap=_safe_ap(u_hat, correct, "correct"),
        ap_e=_safe_ap(u_hat, correct, "incorrect"),
        mse=uq_mse(u, u_hat),
        spec=spec, sens=sens, f1_ss=f1, tau=float(tau),
        counts=detection_counts(u_hat, correct, tau),
        extra=extra, label=label,
    )


def _safe_ap(scores, correct, positive) -> float:
    try:
        return average_precision(scores, correct, positive)
    except UndefinedMetricError:
        return float("nan")


SEG_COLUMNS = (*TAXONOMY.short_names, "All")
UQ_COLUMNS = ("AP", "AP-E", "MSE", "Spec", "Sens", "F1-SS", "tau")


def write_seg_report(report: SegMetricsReport, out_dir: Path, stem: str = "seg_report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    jpath = out_dir / f"{stem}.json"
    jpath.write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    cpath = out_dir / f"{stem}.csv"
    with cpath.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class", "IoU", "Precision", "pixels"])
        for name in d["classes"]:
            w.writerow([name, f"{d['IoU'][name]:.6f}", f"{d['Precision'][name]:.6f}", d["pixels"][name]])
        w.writerow(["All", f"{report.miou:.6f}", f"{report.mp:.6f}", int(report.pixel_counts.sum())])
    return jpath, cpath


def write_seg_table(reports: Sequence[SegMetricsReport], path: Path) -> Path:
    """Rows of IoU and precision per model, one column per class plus All."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["model", "metric", *SEG_COLUMNS])
        for metric in ("IoU", "Precision"):
            for r in reports:
                d = r.to_dict()[metric]
                w.writerow([r.label, metric, *(f"{d[c]:.3f}" for c in SEG_COLUMNS)])
    return path


def write_uq_report(report: UqMetricsReport, out_dir: Path, stem: str = "uq_report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    jpath = out_dir / f"{stem}.json"
    jpath.write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    cpath = out_dir / f"{stem}.csv"
    with cpath.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["label", *UQ_COLUMNS])
        w.writerow([report.label, *(f"{d[c]:.6f}" for c in UQ_COLUMNS)])
    return jpath, cpath
