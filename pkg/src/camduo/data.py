"""Synthetic shapes dataset: weak image-level labels plus eval-only masks.

Four shape classes (circle, square, triangle, ring) are drawn on a textured
noise background. Each shape's body is a muted class tint while a small
saturated marker patch sits inside it, so a classifier can minimize its loss
from a tiny discriminative region; full-object localization has to come from
the self-supervision modules, which is exactly the failure mode under test.

Generation is a pure function of (seed, split, index).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

N_CLASSES = 4
CLASS_NAMES = ("circle", "square", "triangle", "ring")

# Saturated marker colors, one per class; shape bodies use the same color
# heavily mixed toward the background so the marker is the easy cue.
CLASS_COLORS = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.15, 0.80, 0.20],
        [0.20, 0.35, 0.95],
        [0.95, 0.85, 0.15],
    ],
    dtype=np.float32,
)
BODY_MIX = 0.45  # weight of the class color in the shape body
MARKER_FRACTION = 0.45  # marker half-size as a fraction of the shape radius


@dataclass
class ImageSample:
    """RGB pixels in [0, 1] (H, W, 3), a multi-hot label, and an optional
    ground-truth class mask used for evaluation only."""

    pixels: np.ndarray
    label: np.ndarray  # (N_CLASSES,) 0/1
    gt_mask: Optional[np.ndarray] = None  # (H, W) uint8 in {0..N}

    def __post_init__(self):
        if self.gt_mask is not None and self.gt_mask.shape != self.pixels.shape[:2]:
            raise ValueError("gt_mask shape does not match image")


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if kind == 1:  # circle
        return dy * dy + dx * dx <= r * r
    if kind == 2:  # square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 3:  # upward triangle
        inside = (dy <= r) & (dy >= -r)
        halfwidth = (dy + r) * 0.55
        return inside & (np.abs(dx) <= halfwidth)
    if kind == 4:  # ring
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape class {kind}")


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.normal(0.0, 0.08, size=(size // 8, size // 8, 3)).astype(np.float32)
    coarse_t = torch.from_numpy(coarse).permute(2, 0, 1)[None]
    smooth = F.interpolate(coarse_t, size=(size, size), mode="bilinear", align_corners=False)
    img = base + tint[None, None, :] + smooth[0].permute(1, 2, 0).numpy()
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(seed: int, split: str, index: int, image_size: int = 64) -> ImageSample:
    """Deterministically draw one training/eval image."""
    split_id = {"train": 0, "val": 1}.get(split)
    if split_id is None:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, split_id, index])
    size = image_size
    img = _textured_background(rng, size)
    gt = np.zeros((size, size), dtype=np.uint8)

    n_shapes = rng.integers(1, 4)
    classes = rng.choice(N_CLASSES, size=n_shapes, replace=False) + 1
    placed: List[Tuple[float, float, float]] = []
    for cls in classes:
        for _ in range(40):
            r = rng.uniform(0.14, 0.22) * size
            cy = rng.uniform(r + 2, size - r - 2)
            cx = rng.uniform(r + 2, size - r - 2)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2) ** 2 for py, px, pr in placed):
                break
        else:
            continue  # crowded image: skip this shape
        placed.append((cy, cx, r))
        mask = _shape_mask(int(cls), size, cy, cx, r)
        color = CLASS_COLORS[cls - 1]
        body = BODY_MIX * color[None, None, :] + (1 - BODY_MIX) * img
        body += rng.normal(0.0, 0.03, size=img.shape)
        img = np.where(mask[:, :, None], body, img)
        # High-contrast discriminative marker inside the shape.
        mr = max(1, int(round(MARKER_FRACTION * r * 0.5)))
        my = int(round(cy - 0.3 * r)) if cls != 4 else int(round(cy - 0.775 * r))
        mx = int(round(cx))
        marker = np.zeros((size, size), dtype=bool)
        marker[max(0, my - mr): my + mr + 1, max(0, mx - mr): mx + mr + 1] = True
        marker &= mask
        img = np.where(marker[:, :, None], color[None, None, :], img)
        gt[mask] = cls

    label = np.zeros(N_CLASSES, dtype=np.int64)
    for cls in np.unique(gt):
        if cls > 0:
            label[cls - 1] = 1
    if not label.any():
        # Extremely unlikely fallback: force a centered circle.
        r = 0.18 * size
        mask = _shape_mask(1, size, size / 2, size / 2, r)
        img = np.where(mask[:, :, None], CLASS_COLORS[0][None, None, :], img)
        gt[mask] = 1
        label[0] = 1
    return ImageSample(np.clip(img, 0.0, 1.0).astype(np.float32), label, gt)


def generate_dataset(
    n_train: int, n_val: int, image_size: int = 64, seed: int = 0
) -> Tuple[List[ImageSample], List[ImageSample]]:
    """Generate train and validation sample lists, pure in `seed`."""
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    train = [make_sample(seed, "train", i, image_size) for i in range(n_train)]
    val = [make_sample(seed, "val", i, image_size) for i in range(n_val)]
    return train, val


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    crop: int = 48
    resize_range: Tuple[float, float] = (0.5, 1.3)
    hflip: bool = True
    jitter: float = 0.1
    min_retained_area: float = 0.25


def _resize(img: np.ndarray, size: Tuple[int, int], mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    if t.dim() == 2:
        out = F.interpolate(t[None, None], size=size, mode="nearest")[0, 0]
        return out.numpy()
    out = F.interpolate(
        t.permute(2, 0, 1)[None], size=size, mode=mode,
        align_corners=False if mode == "bilinear" else None,
    )
    return out[0].permute(1, 2, 0).numpy()


def augment(
    sample: ImageSample, cfg: AugmentConfig, rng: np.random.Generator
) -> ImageSample:
    """Resize / crop / flip / color-jitter; the mask follows with nearest
    neighbor but is never used for a training loss.

    Crops that would drop more than 75% of any present shape's area are
    redrawn; as a last resort the resize factor is clamped up.
    """
    h, w = sample.pixels.shape[:2]
    lo = max(cfg.resize_range[0], cfg.crop / min(h, w))
    hi = max(cfg.resize_range[1], lo)
    mask = sample.gt_mask if sample.gt_mask is not None else np.zeros((h, w), np.uint8)
    present = [c for c in range(1, N_CLASSES + 1) if (mask == c).any()]

    for attempt in range(20):
        factor = rng.uniform(lo, hi) if attempt < 19 else max(1.0, lo)
        nh, nw = max(cfg.crop, round(h * factor)), max(cfg.crop, round(w * factor))
        img_r = _resize(sample.pixels, (nh, nw), "bilinear")
        mask_r = _resize(mask.astype(np.float32), (nh, nw), "nearest").astype(np.uint8)
        top = int(rng.integers(0, nh - cfg.crop + 1))
        left = int(rng.integers(0, nw - cfg.crop + 1))
        img_c = img_r[top: top + cfg.crop, left: left + cfg.crop]
        mask_c = mask_r[top: top + cfg.crop, left: left + cfg.crop]
        ok = all(
            (mask_c == c).sum() >= cfg.min_retained_area * max(1, (mask_r == c).sum())
            for c in present
        )
        if ok:
            break

    img = img_c
    if cfg.hflip and rng.random() < 0.5:
        img = img[:, ::-1]
        mask_c = mask_c[:, ::-1]
    if cfg.jitter > 0:
        img = img * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter))  # brightness
        mean = img.mean()
        img = mean + (img - mean) * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter))  # contrast
        gray = img.mean(axis=2, keepdims=True)
        img = gray + (img - gray) * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter))  # saturation
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    # Weak labels describe the full image; crops are constrained to retain
    # every present shape, so the label carries over unchanged.
    label = sample.label.copy()
    out_mask = np.ascontiguousarray(mask_c) if sample.gt_mask is not None else None
    return ImageSample(np.ascontiguousarray(img), label, out_mask)


# ---------------------------------------------------------------------------
# Disk persistence


def save_dataset(samples: Sequence[ImageSample], out_dir: str, split: str) -> None:
    """Write images as PNG, masks as indexed single-channel PNG, labels as CSV."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"{split}_{i:05d}.png"
        Image.fromarray((s.pixels * 255).round().astype(np.uint8)).save(
            os.path.join(img_dir, name)
        )
        if s.gt_mask is not None:
            Image.fromarray(s.gt_mask, mode="L").save(os.path.join(mask_dir, name))
        rows.append([name] + [int(b) for b in s.label])
    with open(os.path.join(out_dir, f"{split}_labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename"] + [f"class_{c}" for c in CLASS_NAMES])
        writer.writerows(rows)


def load_dataset(out_dir: str, split: str) -> List[ImageSample]:
    """Read a dataset written by `save_dataset`."""
    labels_path = os.path.join(out_dir, f"{split}_labels.csv")
    if not os.path.exists(labels_path):
        raise FileNotFoundError(f"no label file at {labels_path}")
    samples = []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            name, bits = row[0], [int(b) for b in row[1:]]
            img = np.asarray(
                Image.open(os.path.join(out_dir, "images", name)).convert("RGB"),
                dtype=np.float32,
            ) / 255.0
            mask_path = os.path.join(out_dir, "masks", name)
            mask = (
                np.asarray(Image.open(mask_path), dtype=np.uint8)
                if os.path.exists(mask_path)
                else None
            )
            samples.append(ImageSample(img, np.asarray(bits, dtype=np.int64), mask))
    return samples


def load_voc_layout(root: str):
    """Stub loader for a PASCAL-VOC style directory.

    Expected layout::

        root/
          JPEGImages/<id>.jpg
          SegmentationClass/<id>.png      (indexed masks, eval splits only)
          ImageSets/Segmentation/{train,val}.txt

    Full-scale VOC training and evaluation are out of scope for this package;
    only the synthetic dataset path is supported.
    """
    raise NotImplementedError(
        "PASCAL VOC ingestion is out of scope; use generate_dataset/save_dataset instead"
    )
