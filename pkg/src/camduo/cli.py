"""Command-line entry point: dataset generation, training, inference,
evaluation, threshold sweeps and scale-variance reports."""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from typing import List, Optional

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, default_run_config, load_run_config
from .data import generate_dataset, load_dataset, save_dataset
from .metrics import (
    best_threshold,
    evaluate,
    infer_msinf_cams,
    plot_sweep,
    pseudo_labels,
    save_cam_heatmaps,
    scale_variance_report,
    threshold_sweep,
    write_scale_report_csv,
    write_sweep_csv,
)
from .train import Trainer, load_checkpoint


def _load_config(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "mode": getattr(args, "mode", None),
    }
    if getattr(args, "config", None):
        return load_run_config(args.config, overrides)
    cfg = default_run_config()
    from .config import apply_overrides

    return apply_overrides(cfg, overrides)


def _dataset_for(cfg: RunConfig, data_dir: Optional[str], split: str):
    if data_dir:
        return load_dataset(data_dir, split)
    train, val = generate_dataset(
        cfg.dataset.n_train, cfg.dataset.n_val, cfg.dataset.image_size, cfg.seed
    )
    return train if split == "train" else val


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    train, val = generate_dataset(
        cfg.dataset.n_train, cfg.dataset.n_val, cfg.dataset.image_size, cfg.seed
    )
    save_dataset(train, cfg.out_dir, "train")
    save_dataset(val, cfg.out_dir, "val")
    print(f"wrote {len(train)} train / {len(val)} val samples to {cfg.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = _dataset_for(cfg, args.data, "train")
    steps = max(1, math.ceil(len(samples) / cfg.train.batch_size))
    trainer = Trainer(cfg.train, steps_per_epoch=steps)
    trainer.fit(samples, log_path=os.path.join(cfg.out_dir, "loss_log.csv"))
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.ckpt")
    trainer.save_checkpoint(ckpt_path)
    print(f"trained {trainer.step_count} steps (mode={cfg.train.mode}); "
          f"checkpoint at {ckpt_path}")
    return 0


def cmd_infer(args) -> int:
    pair, _, meta = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    samples = _dataset_for(cfg, args.data, args.split)
    os.makedirs(cfg.out_dir, exist_ok=True)
    from PIL import Image

    for i, sample in enumerate(samples):
        cams = infer_msinf_cams(pair.main, sample)
        stem = f"{args.split}_{i:05d}"
        save_cam_heatmaps(cams, sample, cfg.out_dir, stem)
        pred = pseudo_labels(cams, torch.from_numpy(sample.label), cfg.eval.threshold)
        Image.fromarray(pred.numpy().astype(np.uint8), mode="L").save(
            os.path.join(cfg.out_dir, f"{stem}_pseudo.png")
        )
    print(f"wrote CAM heatmaps and pseudo-label maps for {len(samples)} images "
          f"to {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    pair, _, _ = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    samples = _dataset_for(cfg, args.data, args.split)
    m = evaluate(pair.main, samples, threshold=cfg.eval.threshold)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["threshold", repr(m.threshold)])
        writer.writerow(["miou", repr(m.miou)])
        writer.writerow(["precision", repr(m.precision)])
        writer.writerow(["recall", repr(m.recall)])
        for c, iou in sorted(m.per_class_iou.items()):
            writer.writerow([f"iou_class_{c}", repr(iou)])
    print(f"mIoU {m.miou:.4f} precision {m.precision:.4f} recall {m.recall:.4f} "
          f"-> {path}")
    return 0


def _parse_floats(text: str) -> List[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def cmd_sweep(args) -> int:
    pair, _, _ = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    samples = _dataset_for(cfg, args.data, args.split)
    thresholds = _parse_floats(args.thresholds) if args.thresholds else list(cfg.eval.thresholds)
    sweep = threshold_sweep(pair.main, samples, thresholds)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_sweep_csv(sweep, os.path.join(cfg.out_dir, "sweep.csv"))
    plot_sweep(sweep, os.path.join(cfg.out_dir, "sweep.png"))
    best = best_threshold(sweep)
    print(f"best threshold {best.threshold}: mIoU {best.miou:.4f} "
          f"-> {cfg.out_dir}/sweep.csv")
    return 0


def cmd_scale_report(args) -> int:
    pair, _, _ = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    samples = _dataset_for(cfg, args.data, args.split)
    scales = _parse_floats(args.scales) if args.scales else list(cfg.eval.scales)
    report = scale_variance_report(pair.main, samples, scales, cfg.eval.threshold)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_scale_report_csv(report, os.path.join(cfg.out_dir, "scale_report.csv"))
    print(f"single-scale mIoU std {report['std']:.4f}, msinf mIoU {report['msinf']:.4f} "
          f"-> {cfg.out_dir}/scale_report.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camduo",
        description="Weakly supervised segmentation with dual-network self-supervision",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory (default: generate from config)")
            p.add_argument("--split", default="val", choices=["train", "val"])

    p = sub.add_parser("gen-data", help="write the synthetic dataset to disk")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    common(p)
    p.add_argument(
        "--mode",
        choices=["full", "baseline", "rcm-only", "mam-only", "smm", "mmm"],
        help="supervision recipe",
    )
    p.set_defaults(func=cmd_train, split="train")

    p = sub.add_parser("infer", help="write CAM heatmaps and pseudo-label maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate pseudo-label metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep with CSV and plot")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", help="space/comma separated list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scale-report", help="single-scale mIoU variance report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scales", help="space/comma separated list")
    p.set_defaults(func=cmd_scale_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
