"""Dev experiment: train each mode across seeds, report best-threshold mIoU,
precision/recall, and scale-variance. Used to tune the toy setup."""

import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from camduo.data import generate_dataset
from camduo.metrics import best_threshold, scale_variance_report, threshold_sweep
from camduo.train import TrainConfig, Trainer

MODES = sys.argv[1].split(",") if len(sys.argv) > 1 else ["baseline", "rcm-only", "mam-only", "full"]
SEEDS = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0, 1, 2]
EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 20
N_TRAIN = int(sys.argv[4]) if len(sys.argv) > 4 else 120
MSINF = sys.argv[5] if len(sys.argv) > 5 else "mean"
EVAL_MSINF = sys.argv[6] if len(sys.argv) > 6 else MSINF
ACT = int(sys.argv[7]) if len(sys.argv) > 7 else 10
ALPHA = float(sys.argv[8]) if len(sys.argv) > 8 else 0.997
LAM3 = float(sys.argv[9]) if len(sys.argv) > 9 else 1.0

def run(mode, seed):
    t0 = time.time()
    train, val = generate_dataset(N_TRAIN, 40, 64, seed)
    cfg = TrainConfig(mode=mode, seed=seed, epochs=EPOCHS,
                      lambda3_activation_epoch=min(ACT, EPOCHS), msinf_mode=MSINF,
                      ema_momentum=ALPHA, lambda3=LAM3)
    trainer = Trainer(cfg, steps_per_epoch=math.ceil(len(train) / cfg.batch_size))
    trainer.fit(train)
    sweep = threshold_sweep(trainer.pair.main, val, msinf_mode=EVAL_MSINF)
    best = best_threshold(sweep)
    rep = scale_variance_report(trainer.pair.main, val, threshold=best.threshold, msinf_mode=EVAL_MSINF)
    dt = time.time() - t0
    print(f"{mode:9s} seed {seed}: mIoU {best.miou:.3f} @t={best.threshold:.2f} "
          f"P {best.precision:.3f} R {best.recall:.3f} std {rep['std']:.4f} "
          f"skips {trainer.rcm_skip_count} ({dt:.0f}s)", flush=True)
    return best, rep

results = {}
for mode in MODES:
    accum = []
    for seed in SEEDS:
        accum.append(run(mode, seed))
    miou = np.mean([b.miou for b, _ in accum])
    prec = np.mean([b.precision for b, _ in accum])
    rec = np.mean([b.recall for b, _ in accum])
    std = np.mean([r["std"] for _, r in accum])
    results[mode] = (miou, prec, rec, std)
    print(f"== {mode}: mIoU {miou:.3f} P {prec:.3f} R {rec:.3f} std {std:.4f}", flush=True)

print(results)
