"""Subcommand front-end wiring the pipeline end to end.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
failure.  Every subcommand writes a run manifest next to its outputs with
sha256 hashes of the files it produced.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import datagen, evaluate, pod as pod_mod, train as train_mod
from .grid import (Family, GridField, assemble_operator, assemble_rhs,
                   darcy_spec, helmholtz_spec, poisson_spec)
from .linsolve import DEFAULT_TOL
from .model import VNetConfig, build_model, load_model, save_model


class DataError(RuntimeError):
    pass


def _limit_blas_threads(n: int = 1):
    """The engine's GEMMs are small; multithreaded BLAS slows them down."""
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, subcommand: str, config: dict, seeds: dict,
                   inputs: list, outputs: list) -> str:
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"subcommand={subcommand}\n")
        fh.write(f"tool_version={__version__}\n")
        for k, v in sorted(config.items()):
            fh.write(f"config.{k}={v}\n")
        for k, v in sorted(seeds.items()):
            fh.write(f"seed.{k}={v}\n")
        for p in inputs:
            fh.write(f"input={p}\n")
        for p in outputs:
            fh.write(f"output={p} sha256={_sha256(p)}\n")
    return path


def verify_manifest(path: str) -> bool:
    """Re-hash every output recorded in a manifest."""
    base = os.path.dirname(path)
    with open(path) as fh:
        for line in fh:
            if line.startswith("output="):
                body = line.strip()[len("output="):]
                fpath, _, digest = body.partition(" sha256=")
                if not os.path.isabs(fpath):
                    fpath = os.path.join(base, fpath)
                if _sha256(fpath) != digest:
                    return False
    return True


def load_config_file(path: str) -> dict:
    """Flat key=value text config."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed config line {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _spec_from_args(family: str, contrast: float, kappa_sq: float):
    if family == "poisson":
        return poisson_spec(contrast)
    if family == "helmholtz":
        return helmholtz_spec(kappa_sq, contrast)
    if family == "darcy":
        return darcy_spec()
    raise DataError(f"unknown family {family!r}")


def _read_dataset(path: str) -> datagen.Dataset:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    try:
        return datagen.read_dataset(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _ensure_outdir(path: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args.family, args.contrast, args.kappa_sq)
    ds = datagen.build_dataset(spec, args.s, args.m, rng_seed=args.seed,
                               solver_tol=args.tol, split=args.split,
                               workers=args.workers)
    out_dir = _ensure_outdir(args.out)
    datagen.write_dataset(ds, args.out)
    write_manifest(out_dir, "gen-data",
                   {"family": args.family, "contrast": args.contrast,
                    "kappa_sq": args.kappa_sq, "m": args.m, "s": args.s,
                    "tol": args.tol, "split": args.split},
                   {"master": args.seed}, [], [args.out, args.out + ".meta"])
    print(f"wrote {args.out} ({args.s} samples, m={args.m})")
    return 0


def cmd_solve(args) -> int:
    ds = _read_dataset(args.data)
    spec, m = ds.spec, ds.m
    fsrc, flux = datagen.source_for_spec(spec, m)
    sol = np.empty_like(ds.solution)
    for i in range(len(ds)):
        coeff = GridField.from_values(ds.coeff[i])
        try:
            sol[i] = datagen.solve_sample(spec, coeff, fsrc, flux, args.tol)
        except RuntimeError as exc:
            print(f"error: sample {i}: {exc}", file=sys.stderr)
            return 4
    out = datagen.Dataset(spec=spec, m=m, coeff=ds.coeff.copy(),
                          source=ds.source.copy(), solution=sol,
                          master_seed=ds.master_seed, solver_tol=args.tol,
                          split=ds.split, inverse=ds.inverse)
    out_dir = _ensure_outdir(args.out)
    datagen.write_dataset(out, args.out)
    write_manifest(out_dir, "solve", {"tol": args.tol}, {},
                   [args.data], [args.out, args.out + ".meta"])
    print(f"re-solved {len(ds)} samples -> {args.out}")
    return 0


def _assemble_for(ds: datagen.Dataset, coeff_values: np.ndarray):
    m = ds.m
    ones = GridField.from_values(np.ones((m, m)))
    coeff = GridField.from_values(coeff_values)
    if ds.spec.family is Family.DARCY:
        return assemble_operator(ds.spec, GridField.zeros(m), coeff)
    return assemble_operator(ds.spec, coeff, ones)


def cmd_pod(args) -> int:
    ds = _read_dataset(args.data)
    from .grid import field_to_vector
    snaps = np.stack([field_to_vector(ds.spec, GridField.from_values(u))
                      for u in ds.solution], axis=1)
    model = pod_mod.fit_pod(snaps, r=args.r, spec_hash=_sha256(args.data)[:16])
    out_dir = _ensure_outdir(args.out)
    pod_mod.save_pod(model, args.out)
    outputs = [args.out]

    curve_path = args.out + ".curve.csv"
    ranks = [r for r in (2 ** np.arange(0, 16)) if r <= model.r]
    if ranks[-1] != model.r:
        ranks.append(model.r)
    proj = pod_mod.projection_error_curve(model, snaps, ranks)
    lines = ["r,train_reconstruction_err,test_solve_err"]
    test_curve = {}
    if args.test:
        te = _read_dataset(args.test)
        fsrc, flux = datagen.source_for_spec(te.spec, te.m)
        b = assemble_rhs(te.spec, fsrc, flux)
        from .grid import field_to_vector as f2v
        truths = [f2v(te.spec, GridField.from_values(u)) for u in te.solution]
        sub = min(len(te), args.test_cap)
        curve = pod_mod.galerkin_error_curve(
            model, lambda c: _assemble_for(te, c), lambda c: b,
            te.coeff[:sub], truths[:sub], ranks)
        test_curve = dict(curve)
    for r, err in proj:
        t = test_curve.get(r, "")
        lines.append(f"{r},{err!r},{t!r}" if t != "" else f"{r},{err!r},")
    with open(curve_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    outputs.append(curve_path)
    write_manifest(out_dir, "pod", {"r": model.r}, {},
                   [args.data] + ([args.test] if args.test else []), outputs)
    print(f"pod basis rank {model.r} -> {args.out}")
    return 0


def _train_config_from(args) -> train_mod.TrainConfig:
    overrides = {}
    if args.config:
        overrides.update(load_config_file(args.config))
    fields = dict(
        epochs=int(overrides.get("epochs", args.epochs)),
        batch_size=int(overrides.get("batch_size", args.batch_size)),
        learning_rate=float(overrides.get("learning_rate", args.lr)),
        weight_decay=float(overrides.get("weight_decay", 1e-4)),
        scheduler_factor=float(overrides.get("scheduler_factor", 0.5)),
        scheduler_patience=int(overrides.get("scheduler_patience", 50)),
        min_lr=float(overrides.get("min_lr", 1e-5)),
        loss_mode=overrides.get("loss_mode", args.loss_mode),
        seed=int(overrides.get("seed", args.seed)),
    )
    return train_mod.TrainConfig(**fields)


def _model_config_from(args, overrides: dict) -> VNetConfig:
    base = ()
    if overrides.get("base_channels"):
        base = tuple(int(v) for v in str(overrides["base_channels"]).split(":"))
    return VNetConfig(
        levels=int(overrides.get("levels", args.levels)),
        blocks=int(overrides.get("blocks", args.blocks)),
        dilations=int(overrides.get("dilations", 2)),
        width=float(overrides.get("width", args.width)),
        base_channels=base,
        share_weights=bool(int(overrides.get("share_weights", 0))),
    )


def cmd_train(args) -> int:
    _limit_blas_threads(1)
    ds = _read_dataset(args.data)
    overrides = load_config_file(args.config) if args.config else {}
    tc = _train_config_from(args)
    mc = _model_config_from(args, overrides)
    model = build_model(mc, rng_seed=tc.seed)
    log_path = args.out + ".log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,wall_time\n")

    def log_fn(epoch, tr, vl, lr, wall):
        with open(log_path, "a") as fh:
            fh.write(f"{epoch},{tr!r},{vl!r},{lr!r},{wall!r}\n")

    try:
        model, state, _ = train_mod.train(model, ds, None, tc, log_fn=log_fn)
    except train_mod.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    out_dir = _ensure_outdir(args.out)
    save_model(train_mod.best_model(model, state), args.out)
    write_manifest(out_dir, "train",
                   {"epochs": tc.epochs, "batch_size": tc.batch_size,
                    "lr": tc.learning_rate, "loss_mode": tc.loss_mode,
                    "levels": mc.levels, "blocks": mc.blocks, "width": mc.width},
                   {"train": tc.seed}, [args.data], [args.out, log_path])
    print(f"trained {tc.epochs} epochs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    _limit_blas_threads(1)
    ds = _read_dataset(args.data)
    try:
        model = load_model(args.ckpt)
    except (ValueError, FileNotFoundError) as exc:
        raise DataError(str(exc)) from exc
    preds = train_mod.predict_fields_parallel(model, ds, args.workers)
    truth = train_mod.encode_coeff(ds.coeff, model.normalization) if ds.inverse \
        else ds.solution
    report = evaluate.relative_errors(preds, truth, h=1.0 / (ds.m - 1))
    out_dir = _ensure_outdir(args.out)
    with open(args.out, "w") as fh:
        fh.write(evaluate.report_to_csv(report))
    summary_path = args.out + ".summary.txt"
    with open(summary_path, "w") as fh:
        fh.write(evaluate.report_summary(report))
    outputs = [args.out, summary_path]
    if args.dump_fields:
        for i in range(min(len(ds), 4)):
            p = os.path.join(out_dir, f"field{i}.pgm")
            evaluate.write_field_pgm(p, np.concatenate(
                [ds.coeff[i], truth[i], preds[i]], axis=1))
            outputs.append(p)
    write_manifest(out_dir, "eval", {"inverse": ds.inverse}, {},
                   [args.data, args.ckpt], outputs)
    print(f"mean relative error: {report.mean:.6f}")
    return 0


def cmd_uq(args) -> int:
    _limit_blas_threads(1)
    ds = _read_dataset(args.data)
    h = 1.0 / (ds.m - 1)
    kinds = ("l2_norm", "l1_norm", "sum_abs_dx")
    rows = ["qoi,source,mu,sigma,p_ext"]
    for kind in kinds:
        q = evaluate.QoiSpec(kind=kind)
        mu, sg, pe = evaluate.qoi_stats(evaluate.qoi_values(ds.solution, q, h))
        rows.append(f"{kind},truth,{mu!r},{sg!r},{pe!r}")
    inputs = [args.data]
    if args.ckpt:
        model = load_model(args.ckpt)
        preds = train_mod.predict_fields(model, ds)
        for kind in kinds:
            q = evaluate.QoiSpec(kind=kind)
            mu, sg, pe = evaluate.qoi_stats(evaluate.qoi_values(preds, q, h))
            rows.append(f"{kind},model,{mu!r},{sg!r},{pe!r}")
        inputs.append(args.ckpt)
    out_dir = _ensure_outdir(args.out)
    with open(args.out, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    write_manifest(out_dir, "uq", {}, {}, inputs, [args.out])
    print(f"qoi statistics -> {args.out}")
    return 0


def cmd_invert(args) -> int:
    ds = _read_dataset(args.data)
    inv = evaluate.invert_dataset(ds)
    out_dir = _ensure_outdir(args.out)
    datagen.write_dataset(inv, args.out)
    write_manifest(out_dir, "invert", {}, {}, [args.data],
                   [args.out, args.out + ".meta"])
    print(f"inverse-mode dataset -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpdenet",
                                description="elliptic-PDE surrogate pipeline")
    sub = p.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen-data", help="sample coefficients and solve")
    g.add_argument("--family", required=True, choices=["poisson", "helmholtz", "darcy"])
    g.add_argument("--contrast", type=float, default=6e5)
    g.add_argument("--kappa-sq", type=float, default=100.0)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--s", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.add_argument("--split", default="train")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("solve", help="re-solve an existing dataset's systems")
    s.add_argument("--data", required=True)
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_solve)

    o = sub.add_parser("pod", help="fit a POD basis and report error curves")
    o.add_argument("--data", required=True)
    o.add_argument("--r", type=int, default=None)
    o.add_argument("--test", default=None)
    o.add_argument("--test-cap", type=int, default=50)
    o.add_argument("--out", required=True)
    o.set_defaults(fn=cmd_pod)

    t = sub.add_parser("train", help="train the surrogate")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="flat key=value file")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--loss-mode", choices=["h1", "l2only"], default="h1")
    t.add_argument("--levels", type=int, default=1)
    t.add_argument("--blocks", type=int, default=12)
    t.add_argument("--width", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--dump-fields", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    u = sub.add_parser("uq", help="QoI statistics table")
    u.add_argument("--data", required=True)
    u.add_argument("--ckpt", default=None)
    u.add_argument("--out", required=True)
    u.set_defaults(fn=cmd_uq)

    i = sub.add_parser("invert", help="swap dataset input/target roles")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_invert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
