"""Convolutional classifier backbone producing features, CAMs and class scores.

The same architecture is instantiated twice (a gradient-trained main network
and an EMA-updated support network). The network maps an RGB image to a
D-channel embedding map, an N-channel class activation map (CAM) stack via a
1x1 convolution head, and an image-level multi-label prediction via global
average pooling and a sigmoid.
"""

from __future__ import annotations

from typing import Dict, Iterable, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

SCALE_NAMES = ("s", "m", "l")
SCALE_RATIOS = {"s": 0.5, "m": 1.0, "l": 2.0}

# Guard against division by zero on dead CAM channels.
CAM_NORM_EPS = 1e-5
# Probability clamp for binary cross-entropy.
BCE_EPS = 1e-7


class CamBackbone(nn.Module):
    """Small strided CNN classifier (total stride 8) with a CAM head.

    GroupNorm is used instead of BatchNorm so that forward passes are
    independent of batch composition, which keeps the support network's
    self-supervision deterministic.
    """

    total_stride = 8

    def __init__(self, n_classes: int = 4, embed_dim: int = 256, width: int = 16):
        super().__init__()
        if n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {n_classes}")
        self.n_classes = n_classes
        self.embed_dim = embed_dim
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=1, padding=1),
            nn.GroupNorm(4, w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 4 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 4 * w),
            nn.ReLU(inplace=True),
        )
        self.embed = nn.Conv2d(4 * w, embed_dim, 1)
        self.cam_head = nn.Conv2d(embed_dim, n_classes, 1)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the network on a (B, 3, H, W) image batch.

        Returns (embedding map X, raw CAMs A, class scores). Class scores are
        sigmoid(GAP(raw CAMs)); raw CAMs are used for classification while the
        supervision paths consume `normalize_cams(raw)`.
        """
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise ValueError(
                f"input size {h}x{w} not divisible by total stride {self.total_stride}"
            )
        feat = self.features(image)
        x = F.relu(self.embed(feat))
        raw_cams = self.cam_head(x)
        scores = torch.sigmoid(raw_cams.mean(dim=(-2, -1)))
        return x, raw_cams, scores


def normalize_cams(raw_cams: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Rectify raw CAMs and max-scale each present class channel to [0, 1].

    `raw_cams` is (B, N, H, W) or (N, H, W); `labels` is the matching multi-hot
    class vector. Channels of absent classes are zeroed so they never act as
    supervision. A channel whose rectified maximum is positive attains exactly
    1 after scaling; dead channels stay zero.
    """
    squeeze = raw_cams.dim() == 3
    if squeeze:
        raw_cams, labels = raw_cams[None], labels[None]
    cams = F.relu(raw_cams)
    # The divisor is treated as a constant: letting gradients flow through the
    # peak would reward suppressing the strongest activation to lift the rest
    # of the map, which destabilizes the classification head.
    peak = cams.detach().amax(dim=(-2, -1), keepdim=True).clamp_min(CAM_NORM_EPS)
    cams = cams / peak
    cams = cams * (labels[:, :, None, None] > 0)
    return cams[0] if squeeze else cams


def build_pyramid(image: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Build the {0.5, 1.0, 2.0} scale pyramid by bilinear resampling.

    `image` is (B, C, H, W) with even H, W at least twice the network stride.
    """
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"base image sides must be even, got {h}x{w}")
    if min(h, w) < 2 * CamBackbone.total_stride:
        raise ValueError(f"base image {h}x{w} too small for the scale pyramid")
    return {
        "s": F.interpolate(image, scale_factor=0.5, mode="bilinear", align_corners=False),
        "m": image,
        "l": F.interpolate(image, scale_factor=2.0, mode="bilinear", align_corners=False),
    }


def align_to_medium(stacks: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Bilinearly resample per-scale maps to the m-scale spatial size."""
    if set(stacks) != set(SCALE_NAMES):
        raise ValueError(f"expected scales {SCALE_NAMES}, got {sorted(stacks)}")
    target = stacks["m"].shape[-2:]
    out = {}
    for name, t in stacks.items():
        if t.shape[-2:] == target:
            out[name] = t
        else:
            out[name] = F.interpolate(t, size=target, mode="bilinear", align_corners=False)
    return out


def msinf_aggregate(
    aligned_cams: Iterable[torch.Tensor],
    labels: torch.Tensor,
    mode: str = "mean",
) -> torch.Tensor:
    """Aggregate aligned per-scale CAM stacks into a single multi-scale stack.

    Elementwise mean (or max, with mode="max") over scales followed by
    per-present-class max renormalization. Absent classes stay zero.
    """
    stacks = list(aligned_cams)
    stacked = torch.stack(stacks, dim=0)
    if mode == "mean":
        agg = stacked.mean(dim=0)
    elif mode == "max":
        agg = stacked.amax(dim=0)
    else:
        raise ValueError(f"unknown msinf aggregation mode {mode!r}")
    return normalize_cams(agg, labels)


def classification_loss(class_scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between sigmoid scores and multi-hot labels."""
    p = class_scores.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = labels.to(p.dtype)
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()
