"""Regional contrastive supervision: class region masks, prototypes, loss.

The support network's multi-scale CAMs are thresholded and argmax'd into an
exact per-pixel class partition; masked feature means give one prototype per
class. Main-network pixel features are then pulled toward their own class
prototype and pushed from the others with an InfoNCE-style loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F

FEATURE_NORM_EPS = 1e-12


@dataclass
class RcmConfig:
    threshold: float = 0.20
    temperature: float = 0.5
    loss_form: str = "infonce_log"  # or "literal_eq5"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.loss_form not in ("infonce_log", "literal_eq5"):
            raise ValueError(f"unknown loss_form {self.loss_form!r}")


@dataclass
class PrototypeBank:
    """Per-class unit prototypes with staleness tracking.

    Channel 0 is the background prototype. A class stays invalid until it has
    appeared with a non-empty region mask in at least one batch; invalid
    prototypes are never used in a loss.
    """

    vectors: torch.Tensor  # (N+1, D)
    valid: torch.Tensor  # (N+1,) bool
    last_update: torch.Tensor = field(default=None)  # (N+1,) long

    def __post_init__(self):
        if self.last_update is None:
            self.last_update = torch.full((self.vectors.shape[0],), -1, dtype=torch.long)

    @classmethod
    def create(cls, n_classes: int, embed_dim: int, dtype=torch.float32) -> "PrototypeBank":
        return cls(
            vectors=torch.zeros(n_classes + 1, embed_dim, dtype=dtype),
            valid=torch.zeros(n_classes + 1, dtype=torch.bool),
        )

    @property
    def all_valid(self) -> bool:
        return bool(self.valid.all())

    def clone(self) -> "PrototypeBank":
        return PrototypeBank(self.vectors.clone(), self.valid.clone(), self.last_update.clone())


def class_region_masks(
    msinf_cams: torch.Tensor, labels: torch.Tensor, threshold: float
) -> torch.Tensor:
    """Partition pixels into (N+1) disjoint class region masks.

    `msinf_cams` is an (N, H, W) stack normalized to [0, 1]; `labels` the
    multi-hot class vector. A pixel belongs to foreground class k iff k wins
    the argmax over present classes and its activation exceeds `threshold`;
    unclaimed pixels fall to background channel 0. The returned (N+1, H, W)
    float mask sums to exactly 1 over channels at every pixel.
    """
    n, h, w = msinf_cams.shape
    present = labels > 0
    masks = torch.zeros(n + 1, h, w, dtype=msinf_cams.dtype, device=msinf_cams.device)
    if present.any():
        # Absent classes must not win the argmax.
        scored = torch.where(present[:, None, None], msinf_cams, msinf_cams.new_tensor(-1.0))
        winner = scored.argmax(dim=0)
        claimed = scored.gather(0, winner[None])[0] > threshold
        fg = torch.zeros_like(masks[1:])
        fg.view(n, -1).scatter_(0, winner.view(1, -1), 1.0)
        fg = fg * claimed
        masks[1:] = fg
    masks[0] = 1.0 - masks[1:].sum(dim=0)
    return masks


def image_prototypes(
    features: torch.Tensor, masks: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked mean of (D, H, W) features per (N+1, H, W) mask channel.

    Returns ((N+1, D) vectors, (N+1,) pixel counts); classes with an empty
    mask get a zero vector and count 0.
    """
    if features.shape[-2:] != masks.shape[-2:]:
        raise ValueError(
            f"feature map {tuple(features.shape)} and masks {tuple(masks.shape)} misaligned"
        )
    counts = masks.sum(dim=(-2, -1))
    sums = torch.einsum("khw,dhw->kd", masks, features)
    vectors = sums / counts.clamp_min(1.0)[:, None]
    return vectors, counts


def update_prototype_bank(
    bank: PrototypeBank,
    batch_prototypes: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    step: int,
) -> PrototypeBank:
    """Fold a batch of per-image (vectors, counts) into the bank.

    Each class gets the mean of its non-empty per-image prototypes, then L2
    normalization; classes absent from the whole batch keep their latest
    non-empty prototype unchanged.
    """
    out = bank.clone()
    for k in range(out.vectors.shape[0]):
        contrib = [v[k] for v, c in batch_prototypes if c[k] > 0]
        if not contrib:
            continue
        mean = torch.stack(contrib).mean(dim=0)
        out.vectors[k] = F.normalize(mean, dim=0, eps=FEATURE_NORM_EPS)
        out.valid[k] = True
        out.last_update[k] = step
    return out


def similarity(x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """exp(x . p) for unit vectors x and p."""
    return torch.exp(torch.dot(x, p))


def rcm_loss(
    features_main: torch.Tensor,
    masks: torch.Tensor,
    bank: PrototypeBank,
    cfg: RcmConfig,
) -> torch.Tensor:
    """Pixel-prototype contrastive loss over one image.

    `features_main` is the main network's (D, H, W) m-scale map (gradient
    flows through it); `masks` the (N+1, H, W) partition and `bank` the full
    set of valid prototypes (detached). Each pixel is scored against every
    prototype at temperature T and penalized toward the prototype of its
    assigned class; the sum is divided by the number of contributing pixels.
    While any prototype slot has never been filled the term is undefined and
    the caller should skip it: contrasting against an incomplete bank pulls
    pixels of the missing class toward the wrong prototype.
    """
    if not bank.all_valid:
        raise ValueError("rcm_loss requires all prototypes valid; caller should skip instead")
    d, h, w = features_main.shape
    x = F.normalize(features_main, dim=0, eps=FEATURE_NORM_EPS)
    protos = bank.vectors.detach().to(x.dtype)
    logits = torch.einsum("kd,dhw->khw", protos, x) / cfg.temperature
    masks = masks.detach().to(x.dtype)
    if cfg.loss_form == "infonce_log":
        per_pixel = -(F.log_softmax(logits, dim=0) * masks).sum(dim=0)
    else:
        per_pixel = -(F.softmax(logits, dim=0) * masks).sum(dim=0)
    total_pixels = masks.sum()
    return per_pixel.sum() / total_pixels.clamp_min(1.0)
