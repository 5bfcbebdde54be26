"""Dual-network training loop: gradient steps on the main network, EMA on the
support network, loss scheduling, CSV logging and checkpointing."""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import AugmentConfig, ImageSample, augment
from .mam import MamConfig, variant_loss
from .model import (
    CamBackbone,
    SCALE_NAMES,
    align_to_medium,
    build_pyramid,
    classification_loss,
    msinf_aggregate,
    normalize_cams,
)
from .rcm import PrototypeBank, RcmConfig, class_region_masks, image_prototypes, rcm_loss, update_prototype_bank

MODES = ("full", "baseline", "rcm-only", "mam-only", "smm", "mmm")

LOG_FIELDS = ("step", "epoch", "lr", "lambda3", "l_cls", "l_rcm", "l_mam", "total", "rcm_skipped")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    poly_power: float = 0.9
    epochs: int = 20
    batch_size: int = 16
    crop: int = 48
    resize_range: Tuple[float, float] = (0.5, 1.3)
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda3_activation_epoch: int = 10
    ema_momentum: float = 0.997
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    n_classes: int = 4
    embed_dim: int = 256
    width: int = 16
    # Fusion rule for the teacher's multi-scale CAMs when building the class
    # region masks that drive the contrastive module. "max" keeps the union of
    # scale evidence, giving fuller regions (and prototypes) than the "mean"
    # fusion used for inference-time pseudo-labels.
    msinf_mode: str = "max"
    mode: str = "full"
    seed: int = 0
    rcm: RcmConfig = field(default_factory=RcmConfig)
    mam: MamConfig = field(default_factory=MamConfig)

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lambda3_activation_epoch > self.epochs:
            raise ValueError("lambda3_activation_epoch must be <= epochs")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")


def ema_update(
    support: Dict[str, torch.Tensor], main: Dict[str, torch.Tensor], alpha: float
) -> None:
    """In-place support <- alpha * support + (1 - alpha) * main, per tensor."""
    if set(support) != set(main):
        raise ValueError("EMA parameter collections have mismatched names")
    with torch.no_grad():
        for name, s in support.items():
            m = main[name]
            if s.shape != m.shape:
                raise ValueError(f"EMA shape mismatch for {name!r}: {s.shape} vs {m.shape}")
            s.mul_(alpha).add_(m, alpha=1.0 - alpha)


@dataclass
class EMAPair:
    main: CamBackbone
    support: CamBackbone
    momentum: float = 0.997

    @classmethod
    def create(cls, cfg: TrainConfig) -> "EMAPair":
        main = CamBackbone(cfg.n_classes, cfg.embed_dim, cfg.width)
        support = copy.deepcopy(main)
        for p in support.parameters():
            p.requires_grad_(False)
        return cls(main, support, cfg.ema_momentum)

    def params(self, which: str) -> Dict[str, torch.Tensor]:
        net = self.main if which == "main" else self.support
        return dict(net.named_parameters())

    def update(self) -> None:
        ema_update(self.params("support"), self.params("main"), self.momentum)


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - iter / max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def lambda_schedule(epoch: int, cfg: TrainConfig) -> Tuple[float, float, float]:
    """Loss weights for the given epoch; the attentive term switches on late."""
    lam3 = cfg.lambda3 if epoch >= cfg.lambda3_activation_epoch else 0.0
    return cfg.lambda1, cfg.lambda2, lam3


def mode_multipliers(mode: str) -> Tuple[float, float]:
    """(contrastive, attentive) loss gates implied by the run mode."""
    use_rcm = 1.0 if mode in ("full", "rcm-only") else 0.0
    use_mam = 1.0 if mode in ("full", "mam-only", "smm", "mmm") else 0.0
    return use_rcm, use_mam


def mam_mode_for(mode: str) -> str:
    return {"smm": "SMM", "mmm": "MMM"}.get(mode, "MAM")


def total_loss(
    l_cls: torch.Tensor, l_rcm: torch.Tensor, l_mam: torch.Tensor, lams: Tuple[float, float, float]
) -> torch.Tensor:
    return lams[0] * l_cls + lams[1] * l_rcm + lams[2] * l_mam


def samples_to_batch(samples: Sequence[ImageSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (B, 3, H, W) pixels and (B, N) labels."""
    imgs = torch.stack([torch.from_numpy(s.pixels).permute(2, 0, 1) for s in samples])
    labels = torch.stack([torch.from_numpy(s.label) for s in samples])
    return imgs, labels


def network_outputs(net: CamBackbone, pyramid: Dict[str, torch.Tensor], labels: torch.Tensor):
    """Forward a pyramid: per-scale features, m-aligned normalized CAM stacks,
    and the m-scale class scores."""
    feats, cams_raw, scores_m = {}, {}, None
    for s in SCALE_NAMES:
        x, raw, scores = net(pyramid[s])
        feats[s] = x
        cams_raw[s] = raw
        if s == "m":
            scores_m = scores
    aligned_raw = align_to_medium(cams_raw)
    cams = {s: normalize_cams(aligned_raw[s], labels) for s in SCALE_NAMES}
    return feats, cams, scores_m


class Trainer:
    """Owns both networks, the prototype bank, the optimizer and the log."""

    def __init__(self, cfg: TrainConfig, steps_per_epoch: int):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.pair = EMAPair.create(cfg)
        self.bank = PrototypeBank.create(cfg.n_classes, cfg.embed_dim)
        self.optimizer = torch.optim.SGD(
            self.pair.main.parameters(),
            lr=cfg.base_lr,
            momentum=cfg.sgd_momentum,
            weight_decay=cfg.weight_decay,
        )
        self.steps_per_epoch = steps_per_epoch
        self.max_iter = cfg.epochs * steps_per_epoch
        self.step_count = 0
        self.log_rows: List[dict] = []
        self.rcm_skip_count = 0

    @property
    def epoch(self) -> int:
        return self.step_count // self.steps_per_epoch

    def train_step(self, images: torch.Tensor, labels: torch.Tensor) -> dict:
        """One optimization step on a (B, 3, H, W) batch; returns the log row."""
        cfg = self.cfg
        lr = poly_lr(self.step_count, self.max_iter, cfg.base_lr, cfg.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        lam1, lam2, lam3 = lambda_schedule(self.epoch, cfg)
        gate_rcm, gate_mam = mode_multipliers(cfg.mode)
        lam2, lam3 = lam2 * gate_rcm, lam3 * gate_mam

        pyramid = build_pyramid(images)
        feats_f, cams_f, scores_m = network_outputs(self.pair.main, pyramid, labels)
        with torch.no_grad():
            feats_g, cams_g, _ = network_outputs(self.pair.support, pyramid, labels)

        zero = images.new_zeros(())
        l_cls = classification_loss(scores_m, labels)
        l_rcm, l_mam = zero, zero
        rcm_skipped = 0

        need_masks = lam2 > 0
        if need_masks:
            batch_protos, masks_per_image = [], []
            for b in range(images.shape[0]):
                msinf_g = msinf_aggregate(
                    [cams_g[s][b] for s in SCALE_NAMES], labels[b], mode=cfg.msinf_mode
                )
                masks = class_region_masks(msinf_g, labels[b], cfg.rcm.threshold)
                masks_per_image.append(masks)
                batch_protos.append(image_prototypes(feats_g["m"][b], masks))
            self.bank = update_prototype_bank(self.bank, batch_protos, self.step_count)
            if self.bank.all_valid:
                per_image = [
                    rcm_loss(feats_f["m"][b], masks_per_image[b], self.bank, cfg.rcm)
                    for b in range(images.shape[0])
                ]
                l_rcm = torch.stack(per_image).mean()
            else:
                rcm_skipped = 1
                self.rcm_skip_count += 1

        if lam3 > 0:
            mam_cfg = replace(cfg.mam, mode=mam_mode_for(cfg.mode))
            per_image = [
                variant_loss(
                    {s: cams_f[s][b] for s in SCALE_NAMES},
                    {s: cams_g[s][b] for s in SCALE_NAMES},
                    labels[b],
                    mam_cfg,
                )
                for b in range(images.shape[0])
            ]
            l_mam = torch.stack(per_image).mean()

        total = total_loss(l_cls, l_rcm, l_mam, (lam1, lam2, lam3))
        row = {
            "step": self.step_count,
            "epoch": self.epoch,
            "lr": lr,
            "lambda3": lam3,
            "l_cls": float(l_cls.detach()),
            "l_rcm": float(l_rcm.detach()),
            "l_mam": float(l_mam.detach()),
            "total": float(total.detach()),
            "rcm_skipped": rcm_skipped,
        }
        if not math.isfinite(row["total"]):
            # Skip the gradient step but keep the schedule moving.
            self.log_rows.append(row)
            self.step_count += 1
            return row
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.pair.update()
        self.log_rows.append(row)
        self.step_count += 1
        return row

    def fit(self, train_samples: Sequence[ImageSample], log_path: Optional[str] = None) -> None:
        """Run the full schedule over the training set."""
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        aug_cfg = AugmentConfig(crop=cfg.crop, resize_range=cfg.resize_range)
        n = len(train_samples)
        steps = self.steps_per_epoch
        for _epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for s in range(steps):
                idx = [order[(s * cfg.batch_size + i) % n] for i in range(cfg.batch_size)]
                batch = [augment(train_samples[i], aug_cfg, rng) for i in idx]
                images, labels = samples_to_batch(batch)
                self.train_step(images, labels)
        if log_path is not None:
            self.write_log(log_path)

    def write_log(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.log_rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        save_checkpoint(self.pair, self.bank, self.cfg, path, step=self.step_count)

    @classmethod
    def load_for_eval(cls, path: str) -> Tuple[EMAPair, PrototypeBank, dict]:
        return load_checkpoint(path)


def save_checkpoint(
    pair: EMAPair, bank: PrototypeBank, cfg: TrainConfig, path: str, step: int = 0
) -> None:
    tensors: Dict[str, torch.Tensor] = {}
    for name, p in pair.main.state_dict().items():
        tensors[f"main/{name}"] = p
    for name, p in pair.support.state_dict().items():
        tensors[f"support/{name}"] = p
    tensors["bank/vectors"] = bank.vectors
    tensors["bank/valid"] = bank.valid.to(torch.float32)
    tensors["bank/last_update"] = bank.last_update.to(torch.float32)
    meta = {
        "n_classes": str(cfg.n_classes),
        "embed_dim": str(cfg.embed_dim),
        "width": str(cfg.width),
        "ema_momentum": repr(cfg.ema_momentum),
        "step": str(step),
        "mode": cfg.mode,
    }
    ckpt.save_tensors(path, tensors, meta)


def load_checkpoint(path: str) -> Tuple[EMAPair, PrototypeBank, dict]:
    tensors, meta = ckpt.load_tensors(path)
    for key in ("n_classes", "embed_dim", "width"):
        if key not in meta:
            raise ckpt.CheckpointError(f"checkpoint meta missing field {key!r}")
    n_classes, embed_dim, width = (int(meta[k]) for k in ("n_classes", "embed_dim", "width"))
    main = CamBackbone(n_classes, embed_dim, width)
    support = CamBackbone(n_classes, embed_dim, width)
    for net, prefix in ((main, "main/"), (support, "support/")):
        state = {}
        for name in net.state_dict():
            key = prefix + name
            if key not in tensors:
                raise ckpt.CheckpointError(f"checkpoint missing tensor {key!r}")
            state[name] = tensors[key]
        net.load_state_dict(state)
    for p in support.parameters():
        p.requires_grad_(False)
    pair = EMAPair(main, support, float(meta.get("ema_momentum", 0.997)))
    bank = PrototypeBank(
        vectors=tensors["bank/vectors"],
        valid=tensors["bank/valid"] > 0.5,
        last_update=tensors["bank/last_update"].to(torch.long),
    )
    return pair, bank, meta
