"""Run trained models over sample sets and build metric reports."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .core_types import ImageSample
from .dataio import iterate_batches
from .losses import soft_label_targets
from .metanet import MetaNet
from .metrics import SegMetricsReport, UqMetricsReport, seg_confusion, seg_report, select_threshold, uq_report
from .segnet import SegNet, predict_probs


def _to_tensor(images: np.ndarray, model: torch.nn.Module) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(images).to(dtype)


def predict_labels(model: SegNet, samples: Sequence[ImageSample], batch_size: int = 8) -> list[np.ndarray]:
    preds = []
    for images, _ in iterate_batches(samples, batch_size):
        probs = predict_probs(model, _to_tensor(images, model))
        preds.extend(probs.argmax(1).numpy())
    return preds


def evaluate_segmentation(model: SegNet, samples: Sequence[ImageSample], batch_size: int = 8,
                          label: str = "") -> SegMetricsReport:
    preds = predict_labels(model, samples, batch_size)
    counts = seg_confusion(preds, [s.mask for s in samples], model.config.num_classes)
    return seg_report(counts, label)


@torch.no_grad()
def collect_soft_labels(seg: SegNet, meta: MetaNet, samples: Sequence[ImageSample],
                        batch_size: int = 8) -> dict[str, np.ndarray]:
    """Flattened per-pixel targets u, predictions u_hat, correctness and max softmax."""
    was_training = meta.training
    meta.eval()
    out = {"u": [], "u_hat": [], "correct": [], "max_prob": []}
    try:
        for images, masks in iterate_batches(samples, batch_size):
            probs = predict_probs(seg, _to_tensor(images, seg))
            gt = torch.from_numpy(masks)
            pred = probs.argmax(1)
            u = soft_label_targets(probs, pred, gt)
            u_hat = meta(probs.to(next(meta.parameters()).dtype))
            out["u"].append(u.numpy().ravel())
            out["u_hat"].append(u_hat.numpy().ravel())
            out["correct"].append((pred == gt).numpy().ravel())
            out["max_prob"].append(probs.max(1).values.numpy().ravel())
    finally:
        meta.train(was_training)
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}


def evaluate_uq(seg: SegNet, meta: MetaNet, val_samples: Sequence[ImageSample],
                test_samples: Sequence[ImageSample], tau: float | None = None,
                batch_size: int = 8, label: str = "") -> UqMetricsReport:
    """Calibrate the threshold on validation pixels (unless given) and report on test pixels."""
    if tau is None:
        val = collect_soft_labels(seg, meta, val_samples, batch_size)
        tau = select_threshold(val["u_hat"], val["correct"])
    test = collect_soft_labels(seg, meta, test_samples, batch_size)
    return uq_report(test["u"], test["u_hat"], test["correct"], tau, max_prob=test["max_prob"], label=label)
