"""Pseudo-label generation from multi-scale CAMs and the metric suite:
per-class IoU / mIoU, foreground precision-recall, threshold sweeps and
scale-variance statistics."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSample
from .model import CamBackbone, msinf_aggregate, normalize_cams

DEFAULT_SWEEP = [round(t, 2) for t in np.arange(0.05, 0.601, 0.05)]


@dataclass
class SegMetrics:
    per_class_iou: Dict[int, float]  # class id -> IoU, only classes with nonempty union
    miou: float
    precision: float
    recall: float
    threshold: float
    zero_activation: bool = False


def pseudo_labels(
    msinf_cams: torch.Tensor, labels: torch.Tensor, bg_threshold: float
) -> torch.Tensor:
    """Per-pixel class map from normalized CAMs: the winning present class if
    its activation clears the background threshold, else 0."""
    n = msinf_cams.shape[0]
    present = labels > 0
    if not present.any():
        return torch.zeros(msinf_cams.shape[-2:], dtype=torch.long, device=msinf_cams.device)
    scored = torch.where(present[:, None, None], msinf_cams, msinf_cams.new_tensor(-1.0))
    winner = scored.argmax(dim=0)
    value = scored.gather(0, winner[None])[0]
    return torch.where(value > bg_threshold, winner + 1, torch.zeros_like(winner))


def miou(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], n_classes: int
) -> Tuple[Dict[int, float], float]:
    """Confusion-matrix mIoU over background + foreground classes.

    Classes whose prediction/GT union is empty across the whole set are
    excluded from the mean.
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need equal, nonempty prediction and GT lists")
    k = n_classes + 1
    conf = np.zeros((k, k), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
        idx = k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        conf += np.bincount(idx, minlength=k * k).reshape(k, k)
    ious = {}
    for c in range(k):
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        if union > 0:
            ious[c] = inter / union
    return ious, float(np.mean(list(ious.values())))


def precision_recall(
    activation: np.ndarray, gt_foreground: np.ndarray
) -> Tuple[float, float, bool]:
    """Foreground precision/recall of a binary activation map against binary
    GT foreground. Zero activation yields precision 0 with a flag."""
    act = activation.astype(bool)
    gt = gt_foreground.astype(bool)
    tp = int((act & gt).sum())
    fp = int((act & ~gt).sum())
    fn = int((~act & gt).sum())
    zero_act = tp + fp == 0
    precision = 0.0 if zero_act else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall, zero_act


# ---------------------------------------------------------------------------
# Model-level evaluation


def _round_to_stride(x: float, stride: int) -> int:
    return max(stride, int(round(x / stride)) * stride)


@torch.no_grad()
def infer_msinf_cams(
    net: CamBackbone,
    sample: ImageSample,
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    msinf_mode: str = "mean",
) -> torch.Tensor:
    """Normalized multi-scale-inferred CAMs at full image resolution."""
    net.eval()
    img = torch.from_numpy(sample.pixels).permute(2, 0, 1)[None]
    labels = torch.from_numpy(sample.label)
    h, w = img.shape[-2:]
    stride = net.total_stride
    aligned = []
    for ratio in scales:
        size = (_round_to_stride(h * ratio, stride), _round_to_stride(w * ratio, stride))
        scaled = (
            img if size == (h, w)
            else F.interpolate(img, size=size, mode="bilinear", align_corners=False)
        )
        _, raw, _ = net(scaled)
        up = F.interpolate(raw, size=(h, w), mode="bilinear", align_corners=False)
        aligned.append(normalize_cams(up[0], labels))
    return msinf_aggregate(aligned, labels, mode=msinf_mode)


@torch.no_grad()
def collect_cams(
    net: CamBackbone,
    samples: Sequence[ImageSample],
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    msinf_mode: str = "mean",
) -> List[torch.Tensor]:
    return [infer_msinf_cams(net, s, scales, msinf_mode) for s in samples]


def metrics_from_cams(
    cam_stacks: Sequence[torch.Tensor],
    samples: Sequence[ImageSample],
    threshold: float,
    n_classes: int,
) -> SegMetrics:
    """Pseudo-label every image at `threshold` and score against GT masks."""
    preds, gts, acts, gt_fgs = [], [], [], []
    for cams, sample in zip(cam_stacks, samples):
        if sample.gt_mask is None:
            raise ValueError("evaluation requires samples with gt_mask")
        labels = torch.from_numpy(sample.label)
        pred = pseudo_labels(cams, labels, threshold).numpy()
        preds.append(pred)
        gts.append(sample.gt_mask)
        acts.append(pred > 0)
        gt_fgs.append(sample.gt_mask > 0)
    ious, mean_iou = miou(preds, gts, n_classes)
    act_all = np.concatenate([a.ravel() for a in acts])
    gt_all = np.concatenate([g.ravel() for g in gt_fgs])
    precision, recall, zero_act = precision_recall(act_all, gt_all)
    return SegMetrics(ious, mean_iou, precision, recall, threshold, zero_act)


def evaluate(
    net: CamBackbone,
    samples: Sequence[ImageSample],
    threshold: float = 0.20,
    n_classes: int = 4,
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    msinf_mode: str = "mean",
) -> SegMetrics:
    cams = collect_cams(net, samples, scales, msinf_mode)
    return metrics_from_cams(cams, samples, threshold, n_classes)


def threshold_sweep(
    net: CamBackbone,
    samples: Sequence[ImageSample],
    thresholds: Sequence[float] = DEFAULT_SWEEP,
    n_classes: int = 4,
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    msinf_mode: str = "mean",
) -> List[SegMetrics]:
    """Evaluate pseudo-labels at each background threshold (CAMs are inferred
    once and re-thresholded)."""
    if len(thresholds) == 0:
        raise ValueError("threshold list must be nonempty")
    cams = collect_cams(net, samples, scales, msinf_mode)
    return [metrics_from_cams(cams, samples, t, n_classes) for t in thresholds]


def best_threshold(sweep: Sequence[SegMetrics]) -> SegMetrics:
    return max(sweep, key=lambda m: m.miou)


def scale_variance_report(
    net: CamBackbone,
    samples: Sequence[ImageSample],
    scales: Sequence[float] = (0.5, 1.0, 1.5, 2.0),
    threshold: float = 0.20,
    n_classes: int = 4,
    msinf_mode: str = "mean",
) -> Dict[str, float]:
    """Single-scale pseudo-label mIoU per scale, their population mean/std,
    and the multi-scale-inferred mIoU over the same scale set."""
    rows: Dict[str, float] = {}
    per_scale = []
    for ratio in scales:
        m = evaluate(net, samples, threshold, n_classes, scales=[ratio], msinf_mode=msinf_mode)
        rows[f"scale_{ratio}"] = m.miou
        per_scale.append(m.miou)
    arr = np.asarray(per_scale)
    rows["mean"] = float(arr.mean())
    rows["std"] = float(arr.std())  # population std, matching a mu +/- sigma row
    rows["msinf"] = evaluate(net, samples, threshold, n_classes, scales=scales,
                             msinf_mode=msinf_mode).miou
    return rows


# ---------------------------------------------------------------------------
# CSV / plot output


def write_sweep_csv(sweep: Sequence[SegMetrics], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "miou", "precision", "recall"])
        for m in sweep:
            writer.writerow([repr(m.threshold), repr(m.miou), repr(m.precision), repr(m.recall)])


def plot_sweep(sweep: Sequence[SegMetrics], path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [m.threshold for m in sweep]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, [m.miou for m in sweep], marker="o", label="mIoU")
    ax.plot(ts, [m.precision for m in sweep], marker="s", label="precision")
    ax.plot(ts, [m.recall for m in sweep], marker="^", label="recall")
    ax.set_xlabel("background threshold")
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_scale_report_csv(report: Dict[str, float], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "miou"])
        for key, value in report.items():
            writer.writerow([key, repr(value)])


def save_cam_heatmaps(
    cams: torch.Tensor, sample: ImageSample, out_dir: str, stem: str
) -> None:
    """Render one viridis heatmap PNG per present class plus the pseudo-label
    map as an indexed image."""
    import matplotlib
    matplotlib.use("Agg")
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    cmap = matplotlib.colormaps["viridis"]
    for k in range(cams.shape[0]):
        if sample.label[k] <= 0:
            continue
        heat = cmap(cams[k].numpy())[:, :, :3]
        blend = 0.5 * heat + 0.5 * sample.pixels
        Image.fromarray((blend * 255).round().astype(np.uint8)).save(
            os.path.join(out_dir, f"{stem}_class{k + 1}_cam.png")
        )
