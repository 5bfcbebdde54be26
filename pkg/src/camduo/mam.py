"""Multi-scale attentive supervision between main- and support-network CAMs.

Per class and per scale pair, a cosine-distance score in [1, 2] measures how
dissimilar the two networks' CAMs are; the scores weight a cross-scale sum of
support CAMs into target CAMs, and an L1 loss pulls the main network's CAMs
toward those targets. Two degraded variants (uniform weights, single scale)
are kept for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import torch

from .model import SCALE_NAMES

DEGENERATE_NORM_EPS = 1e-8

VARIANT_MODES = ("MAM", "MMM", "SMM")


@dataclass
class MamConfig:
    mode: str = "MAM"
    # Letting gradient flow through the attention scores makes the target
    # self-referential; off by default, exposed for study.
    attention_grad: bool = False

    def __post_init__(self):
        if self.mode not in VARIANT_MODES:
            raise ValueError(f"unknown MAM mode {self.mode!r}, expected one of {VARIANT_MODES}")


def cosine_distance(
    cams_main: Dict[str, torch.Tensor],
    cams_support: Dict[str, torch.Tensor],
    labels: torch.Tensor,
    detach: bool = True,
) -> Tuple[torch.Tensor, int]:
    """Class-wise cosine distance between vectorized per-scale CAM pairs.

    Both inputs map scale name -> (N, H, W) stack aligned to the m-scale.
    Returns an (N, 3, 3) tensor xi with xi[k, i, j] = 2 - cos(vec(main CAM at
    scale i), vec(support CAM at scale j)), computed only for present classes
    (absent rows stay 0), plus a count of degenerate (near zero norm) entries
    that were neutralized to 1.
    """
    n = labels.shape[0]
    ref = cams_main["m"]
    xi = ref.new_zeros(n, len(SCALE_NAMES), len(SCALE_NAMES))
    degenerate = 0
    for k in range(n):
        if labels[k] <= 0:
            continue
        for i, si in enumerate(SCALE_NAMES):
            a = cams_main[si][k].reshape(-1)
            for j, sj in enumerate(SCALE_NAMES):
                b = cams_support[sj][k].reshape(-1)
                na, nb = a.norm(), b.norm()
                if na < DEGENERATE_NORM_EPS or nb < DEGENERATE_NORM_EPS:
                    xi[k, i, j] = 1.0
                    degenerate += 1
                else:
                    xi[k, i, j] = 2.0 - torch.dot(a, b) / (na * nb)
    if detach:
        xi = xi.detach()
    return xi, degenerate


def target_cams(
    xi: torch.Tensor, cams_support: Dict[str, torch.Tensor]
) -> Dict[str, torch.Tensor]:
    """Attention-weighted cross-scale sums of support CAMs, one per main scale.

    target[i] = (1/3) sum_j xi[:, i, j] * support CAM at scale j; detached so
    the targets act purely as supervision.
    """
    out = {}
    for i, si in enumerate(SCALE_NAMES):
        acc = None
        for j, sj in enumerate(SCALE_NAMES):
            term = xi[:, i, j][:, None, None] * cams_support[sj]
            acc = term if acc is None else acc + term
        out[si] = (acc / len(SCALE_NAMES)).detach()
    return out


def mam_loss(
    targets: Dict[str, torch.Tensor],
    cams_main: Dict[str, torch.Tensor],
    labels: torch.Tensor,
    scales: Tuple[str, ...] = SCALE_NAMES,
) -> torch.Tensor:
    """Mean absolute deviation of main CAMs from their target CAMs.

    Summed over present classes and the requested main scales, divided by
    (pixel count x contributing class-scale pairs) so the magnitude is
    resolution independent. Returns 0 when no class is present.
    """
    present = (labels > 0).nonzero(as_tuple=True)[0]
    ref = cams_main["m"]
    if present.numel() == 0:
        return ref.sum() * 0.0
    total = ref.new_zeros(())
    pixels = ref.shape[-2] * ref.shape[-1]
    for si in scales:
        diff = targets[si][present].detach() - cams_main[si][present]
        total = total + diff.abs().sum()
    return total / (pixels * present.numel() * len(scales))


def variant_loss(
    cams_main: Dict[str, torch.Tensor],
    cams_support: Dict[str, torch.Tensor],
    labels: torch.Tensor,
    cfg: MamConfig,
) -> torch.Tensor:
    """Dispatch the attentive loss or one of its ablation variants.

    MAM: full cosine-distance attention. MMM: attention forced to uniform
    weight 1 (targets reduce to the plain scale mean). SMM: MMM restricted to
    the main network's m-scale CAMs.
    """
    if cfg.mode == "MAM":
        xi, _ = cosine_distance(cams_main, cams_support, labels, detach=not cfg.attention_grad)
    else:
        n = labels.shape[0]
        xi = cams_main["m"].new_ones(n, len(SCALE_NAMES), len(SCALE_NAMES))
    targets = target_cams(xi, cams_support)
    scales = ("m",) if cfg.mode == "SMM" else SCALE_NAMES
    return mam_loss(targets, cams_main, labels, scales=scales)
