#!/usr/bin/env python3
"""Uncertainty-quantification study: mean / spread / extreme-event rate of
three solution functionals, comparing ground truth, the trained surrogate,
and the POD baseline on a fresh Monte-Carlo set."""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vpdenet.datagen import build_dataset
from vpdenet.evaluate import QoiSpec, qoi_stats, qoi_values
from vpdenet.grid import GridField, assemble_operator, assemble_rhs, poisson_spec
from vpdenet.datagen import source_for_spec
from vpdenet.model import load_model
from vpdenet.pod import fit_pod, pod_solve, snapshots_from_fields
from vpdenet.train import predict_fields


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", required=True, help="trained checkpoint (.ivn)")
    ap.add_argument("--m", type=int, default=65)
    ap.add_argument("--contrast", type=float, default=6e5)
    ap.add_argument("--train-s", type=int, default=100, help="POD snapshot count")
    ap.add_argument("--mc-s", type=int, default=200, help="Monte-Carlo sample count")
    ap.add_argument("--seed", type=int, default=404)
    args = ap.parse_args()

    spec = poisson_spec(args.contrast)
    h = 1.0 / (args.m - 1)
    print(f"solving {args.mc_s} Monte-Carlo samples ...", flush=True)
    mc = build_dataset(spec, args.mc_s, args.m, rng_seed=args.seed)

    model = load_model(args.ckpt)
    preds = predict_fields(model, mc)

    pod_train = build_dataset(spec, args.train_s, args.m, rng_seed=args.seed + 7)
    pod = fit_pod(snapshots_from_fields(pod_train.solution))
    print(f"POD rank {pod.r}")
    ones = GridField.from_values(np.ones((args.m, args.m)))
    fsrc, flux = source_for_spec(spec, args.m)
    b = assemble_rhs(spec, fsrc, flux)
    pod_preds = np.empty_like(mc.solution)
    for i in range(len(mc)):
        A = assemble_operator(spec, GridField.from_values(mc.coeff[i]), ones)
        pod_preds[i] = pod_solve(pod, A, b).reshape(args.m, args.m)

    print(f"\n{'QoI':<12} {'stat':<6} {'exact':>12} {'surrogate':>12} {'POD':>12}")
    for kind in ("l2_norm", "l1_norm", "sum_abs_dx"):
        q = QoiSpec(kind=kind)
        rows = zip(("mu", "sigma", "p_ext"),
                   qoi_stats(qoi_values(mc.solution, q, h)),
                   qoi_stats(qoi_values(preds, q, h)),
                   qoi_stats(qoi_values(pod_preds, q, h)))
        for stat, exact, net, podv in rows:
            print(f"{kind:<12} {stat:<6} {exact:12.4e} {net:12.4e} {podv:12.4e}")


if __name__ == "__main__":
    main()
