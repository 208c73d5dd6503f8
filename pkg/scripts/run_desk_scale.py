#!/usr/bin/env python3
"""Desk-scale forward experiment: high-contrast reaction-diffusion problem at
65x65, iterated V-block surrogate vs the POD/Galerkin baseline.

Default budget reproduces the CI smoke gate (s=100, 300 epochs); pass
--full for the s=500 / 2000-epoch run (hours of CPU time).
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vpdenet import autodiff as ad
from vpdenet.datagen import build_dataset
from vpdenet.evaluate import relative_errors, report_summary
from vpdenet.grid import poisson_spec
from vpdenet.model import VNetConfig, build_model, save_model
from vpdenet.pod import fit_pod, pod_error_curve, snapshots_from_fields
from vpdenet.train import TrainConfig, best_model, predict_fields, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true", help="s=500, 2000 epochs")
    ap.add_argument("--contrast", type=float, default=6e5)
    ap.add_argument("--m", type=int, default=65)
    ap.add_argument("--seed", type=int, default=101)
    ap.add_argument("--loss-mode", choices=["h1", "l2only"], default="h1")
    ap.add_argument("--out-dir", default="runs/desk_scale")
    args = ap.parse_args()

    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:
        pass

    s_train, s_test, epochs = (500, 100, 2000) if args.full else (100, 50, 300)
    base = () if args.full else (8,)
    os.makedirs(args.out_dir, exist_ok=True)

    spec = poisson_spec(args.contrast)
    t0 = time.time()
    print(f"generating {s_train}+{s_test} samples at m={args.m} ...", flush=True)
    train_ds = build_dataset(spec, s_train, args.m, rng_seed=args.seed)
    test_ds = build_dataset(spec, s_test, args.m, rng_seed=args.seed + 101, split="test")
    print(f"  solved in {time.time()-t0:.0f}s")

    cfg = VNetConfig(levels=1, blocks=22, dilations=2, width=0.8, base_channels=base)
    model = build_model(cfg, rng_seed=3)
    print(f"model: {model.num_params} parameters")
    tc = TrainConfig(epochs=epochs, batch_size=8, seed=5, loss_mode=args.loss_mode)

    def log(epoch, tr, vl, lr, wall):
        if epoch % 20 == 0 or epoch == epochs - 1:
            print(f"  epoch {epoch:4d}  train {tr:.4f}  val {vl:.4f}  "
                  f"lr {lr:.1e}  {wall:.1f}s", flush=True)

    t0 = time.time()
    model, state, _ = train(model, train_ds, None, tc, log_fn=log)
    model = best_model(model, state)
    print(f"trained {epochs} epochs in {(time.time()-t0)/60:.1f} min")
    save_model(model, os.path.join(args.out_dir, "surrogate.ivn"))

    preds = predict_fields(model, test_ds)
    rep = relative_errors(preds, test_ds.solution, h=1.0 / (args.m - 1))
    print(f"\nsurrogate mean test error: {rep.mean:.4f} "
          f"(median {rep.median:.4f}, max {rep.max:.4f}, grad {rep.mean_grad:.4f})")
    with open(os.path.join(args.out_dir, "surrogate_report.txt"), "w") as fh:
        fh.write(report_summary(rep))

    print("\nfitting POD baseline ...")
    pod = fit_pod(snapshots_from_fields(train_ds.solution), r=min(s_train, 200))
    curve = pod_error_curve(pod, test_ds.subset(np.arange(min(s_test, 25))))
    for r, err in curve:
        print(f"  POD r={r:4d}  mean test error {err:.4f}")
    with open(os.path.join(args.out_dir, "pod_curve.csv"), "w") as fh:
        fh.write("r,mean_test_err\n")
        for r, err in curve:
            fh.write(f"{r},{err!r}\n")


if __name__ == "__main__":
    main()
