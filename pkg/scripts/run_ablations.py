#!/usr/bin/env python3
"""Block-structure ablations at a small shared budget: baseline block vs
(a) no residual connections, (b) an extra level, (c) coarse-level
convolutions, (d) per-level residual arcs, (e) pre/post smoothing convs."""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vpdenet.datagen import build_dataset
from vpdenet.evaluate import relative_errors
from vpdenet.grid import poisson_spec
from vpdenet.model import VNetConfig, build_model, count_params
from vpdenet.train import TrainConfig, best_model, predict_fields, train

BASE = dict(levels=1, blocks=12, dilations=2, width=0.8, base_channels=(8,))

VARIANTS = {
    "baseline": {},
    "no_residual": {"no_residual": True},
    "more_levels": {"levels": 2, "base_channels": (8, 16)},
    "coarse_convs": {"coarse_convs": 2},
    "level_residuals": {"level_residuals": True},
    "smoothing_convs": {"smoothing_convs": 1},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--s", type=int, default=100)
    ap.add_argument("--m", type=int, default=65)
    ap.add_argument("--seed", type=int, default=101)
    args = ap.parse_args()

    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:
        pass

    spec = poisson_spec(6e5)
    train_ds = build_dataset(spec, args.s, args.m, rng_seed=args.seed)
    test_ds = build_dataset(spec, max(20, args.s // 4), args.m,
                            rng_seed=args.seed + 55, split="test")
    h = 1.0 / (args.m - 1)

    print(f"{'variant':<18} {'params':>8} {'test err':>9} {'grad err':>9} {'min':>6}")
    for name, overrides in VARIANTS.items():
        cfg = VNetConfig(**{**BASE, **overrides})
        model = build_model(cfg, rng_seed=3)
        tc = TrainConfig(epochs=args.epochs, batch_size=8, seed=5)
        t0 = time.time()
        model, state, _ = train(model, train_ds, None, tc)
        preds = predict_fields(best_model(model, state), test_ds)
        rep = relative_errors(preds, test_ds.solution, h)
        print(f"{name:<18} {count_params(cfg):>8} {rep.mean:>9.4f} "
              f"{rep.mean_grad:>9.4f} {(time.time()-t0)/60:>6.1f}", flush=True)


if __name__ == "__main__":
    main()
