"""Loss assembly, AdamW, plateau scheduling, and the minibatch training loop.

Training arithmetic is float32; loss reductions accumulate in float64.
Inputs are standardized per dataset: the coefficient channel is fed as
log10(1 + eta) rescaled to [0, 1] (raw 1e6-contrast fields destabilize batch
normalization), the source by its max-abs, and the target by its max-abs.
Predictions are mapped back to original units at inference; metrics always
run in original units.  Inverse mode swaps inputs and targets and predicts
the coefficient in the same log-rescaled representation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .model import VNetModel, clone_model

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_REL_IMPROVEMENT = 1e-4


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    scheduler_factor: float = 0.5
    scheduler_patience: int = 50
    min_lr: float = 1e-5
    loss_mode: str = "h1"            # "h1" | "l2only"
    seed: int = 0
    val_fraction: float = 0.1        # used when no explicit validation set

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.scheduler_patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler factor must lie in (0, 1)")
        if self.loss_mode not in ("h1", "l2only"):
            raise ValueError("loss mode must be 'h1' or 'l2only'")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 1e-3
    moments: dict = field(default_factory=dict)      # name -> (m, v)
    best_val: float = np.inf
    epochs_since_improvement: int = 0
    initial_loss: float | None = None
    best_state: dict | None = None
    history: list = field(default_factory=list)      # (epoch, train, val, lr, wall)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# standardization

def compute_normalization(ds: Dataset) -> dict:
    """Per-dataset constants for input/target standardization."""
    eta_log = np.log10(1.0 + np.maximum(ds.coeff, 0.0))
    lo, hi = float(eta_log.min()), float(eta_log.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    f_scale = float(np.abs(ds.source).max()) or 1.0
    u_scale = float(np.abs(ds.solution).max()) or 1.0
    return {"eta_log_min": lo, "eta_log_max": hi, "f_scale": f_scale,
            "u_scale": u_scale, "inverse": ds.inverse}


def encode_coeff(coeff: np.ndarray, norm: dict) -> np.ndarray:
    x = np.log10(1.0 + np.maximum(coeff, 0.0))
    return (x - norm["eta_log_min"]) / (norm["eta_log_max"] - norm["eta_log_min"])


def decode_coeff(x: np.ndarray, norm: dict) -> np.ndarray:
    lo, hi = norm["eta_log_min"], norm["eta_log_max"]
    return np.power(10.0, x * (hi - lo) + lo) - 1.0


def batch_arrays(ds: Dataset, idx: np.ndarray, norm: dict, dtype=np.float32):
    """(input channels, target) arrays for the given sample indices.

    Forward mode: inputs (coeff, f) -> target u / u_scale.
    Inverse mode: inputs (u, f) -> target log-rescaled coefficient.
    """
    coeff = ds.coeff[idx]
    f = ds.source[idx] / norm["f_scale"]
    u = ds.solution[idx]
    if ds.inverse:
        chan_a = u / norm["u_scale"]
        target = encode_coeff(coeff, norm)
    else:
        chan_a = encode_coeff(coeff, norm)
        target = u / norm["u_scale"]
    to = lambda a: a[:, None, :, :].astype(dtype)
    return to(chan_a), to(f), to(target)


_PARALLEL_CTX = None


def _parallel_predict_chunk(args):
    lo, hi = args
    model, ds = _PARALLEL_CTX
    return lo, predict_fields(model, ds, indices=np.arange(lo, hi))


def predict_fields_parallel(model: VNetModel, ds: Dataset, workers: int) -> np.ndarray:
    """Fork-based sample-parallel evaluation; identical output to the serial
    path (per-sample work is independent)."""
    global _PARALLEL_CTX
    if workers <= 1:
        return predict_fields(model, ds)
    from multiprocessing import get_context
    n = len(ds)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)
              if bounds[i] < bounds[i + 1]]
    _PARALLEL_CTX = (model, ds)
    try:
        with get_context("fork").Pool(len(chunks)) as pool:
            parts = pool.map(_parallel_predict_chunk, chunks)
    finally:
        _PARALLEL_CTX = None
    out = np.empty((n, ds.m, ds.m))
    for lo, block in parts:
        out[lo: lo + block.shape[0]] = block
    return out


def predict_fields(model: VNetModel, ds: Dataset, indices=None,
                   batch_size: int = 16) -> np.ndarray:
    """Eval-mode predictions in original units, shape (s, m, m)."""
    norm = model.normalization
    if not norm:
        raise ValueError("model carries no normalization constants")
    if indices is None:
        indices = np.arange(len(ds))
    model.set_mode("eval")
    out = np.empty((len(indices), ds.m, ds.m))
    with ad.no_grad():
        for lo in range(0, len(indices), batch_size):
            idx = indices[lo: lo + batch_size]
            xa, xf, _ = batch_arrays(ds, idx, norm)
            u, _ = model.forward(ad.tensor(xa), ad.tensor(xf))
            pred = u.values[:, 0].astype(np.float64)
            if ds.inverse:
                out[lo: lo + len(idx)] = pred  # log-rescaled representation
            else:
                out[lo: lo + len(idx)] = pred * norm["u_scale"]
    return out


# ---------------------------------------------------------------------------
# loss

def h1_loss(pred: ad.DiffTensor, target: np.ndarray, h: float,
            mode: str = "h1") -> ad.DiffTensor:
    """Mean per-sample relative L2 mismatch of the field and, in h1 mode,
    half-weighted relative mismatches of both derivative components."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not np.all(np.isfinite(pred.values)):
        raise FloatingPointError("non-finite prediction entering the loss")
    s = pred.shape[0]
    t = target.reshape(s, -1)

    def norms_of(a: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(a.reshape(s, -1).astype(np.float64), axis=1)
        bad = np.nonzero(n == 0.0)[0]
        if bad.size:
            raise ValueError(f"zero-norm target at sample {bad[0]}")
        return n

    tn = norms_of(target)
    diff = ad.sub(pred, ad.tensor(target))
    loss = ad.weighted_sum(ad.per_sample_l2(diff), 1.0 / (s * tn))
    if mode == "h1":
        for axis in (3, 2):  # d/dx then d/dy
            dt_target = _target_derivative(target, h, axis)
            dn = norms_of(dt_target)
            dd = ad.sub(ad.fixed_stencil_derivative(pred, axis, h), ad.tensor(dt_target))
            loss = ad.add(loss, ad.weighted_sum(ad.per_sample_l2(dd), 1.0 / (2.0 * s * dn)))
    return loss


def _target_derivative(target: np.ndarray, h: float, axis: int) -> np.ndarray:
    t = ad.tensor(target)
    return ad.fixed_stencil_derivative(t, axis, h).values


# ---------------------------------------------------------------------------
# optimizer and scheduler

def _decayable(name: str) -> bool:
    return name.endswith("/kernel")


def adamw_step(state: TrainState, grads: dict, params, lr: float,
               weight_decay: float) -> None:
    """Decoupled weight decay with bias-corrected moments.  Decay skips
    biases and batch-norm affine parameters."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params:
        g = grads.get(p)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {t}")
        g = g.astype(np.float64)
        m, v = state.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.moments[name] = (m, v)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new = p.values.astype(np.float64) - lr * update
        if weight_decay and _decayable(name):
            new -= lr * weight_decay * p.values.astype(np.float64)
        p.values[...] = new.astype(p.values.dtype)


def plateau_scheduler(state: TrainState, monitored: float, factor: float,
                      patience: int, min_lr: float) -> float:
    """ReduceLROnPlateau: shrink lr when `monitored` stops improving."""
    if monitored < state.best_val * (1.0 - PLATEAU_REL_IMPROVEMENT):
        state.best_val = monitored
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement > patience:
            state.lr = max(state.lr * factor, min_lr)
            state.epochs_since_improvement = 0
    return state.lr


# ---------------------------------------------------------------------------
# training loop

def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    key = np.array([seed, epoch + 1], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def evaluate_loss(model: VNetModel, ds: Dataset, idx: np.ndarray, norm: dict,
                  cfg: TrainConfig, h: float) -> float:
    model.set_mode("eval")
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(idx), cfg.batch_size):
            sel = idx[lo: lo + cfg.batch_size]
            xa, xf, tgt = batch_arrays(ds, sel, norm)
            u, _ = model.forward(ad.tensor(xa), ad.tensor(xf))
            total += h1_loss(u, tgt, h, cfg.loss_mode).item() * len(sel)
    return total / len(idx)


def train(model: VNetModel, train_ds: Dataset, val_ds: Dataset | None,
          cfg: TrainConfig, state: TrainState | None = None,
          log_fn=None) -> tuple[VNetModel, TrainState, list]:
    """Shuffled minibatch epochs; per-epoch validation loss drives the
    plateau scheduler; the best-validation parameter snapshot is retained in
    the returned state.  Deterministic for a fixed config and seed; passing
    a previous `state` resumes bit-for-bit."""
    if len(train_ds) == 0:
        raise ValueError("empty training dataset")
    h = 1.0 / (train_ds.m - 1)

    if not model.normalization:
        model.normalization = compute_normalization(train_ds)
    norm = model.normalization

    if val_ds is not None:
        train_idx = np.arange(len(train_ds))
        val_view, val_idx = val_ds, np.arange(len(val_ds))
    else:
        n_val = max(1, int(round(cfg.val_fraction * len(train_ds))))
        if n_val >= len(train_ds):
            raise ValueError("training set too small for a validation split")
        split_perm = _epoch_perm(cfg.seed, 0, len(train_ds))
        val_view, val_idx = train_ds, split_perm[:n_val]
        train_idx = split_perm[n_val:]

    if state is None:
        state = TrainState(lr=cfg.learning_rate)
    params = model.parameters()
    leaves = [p for _, p in params]

    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        perm = train_idx[_epoch_perm(cfg.seed, epoch + 1, len(train_idx))]
        model.set_mode("train")
        running = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            sel = perm[lo: lo + cfg.batch_size]
            xa, xf, tgt = batch_arrays(train_ds, sel, norm)
            u, _ = model.forward(ad.tensor(xa), ad.tensor(xf))
            loss = h1_loss(u, tgt, h, cfg.loss_mode)
            if state.initial_loss is None:
                state.initial_loss = loss.item()
            grads = ad.backward(loss, leaves=leaves)
            adamw_step(state, grads, params, state.lr, cfg.weight_decay)
            running += loss.item() * len(sel)
        train_loss = running / len(perm)

        if train_loss > 10.0 * state.initial_loss:
            raise TrainingDiverged(
                f"train loss {train_loss:.3e} exceeded 10x its initial value at epoch {epoch}")

        val_loss = evaluate_loss(model, val_view, val_idx, norm, cfg, h)
        if val_loss < state.best_val * (1.0 - PLATEAU_REL_IMPROVEMENT):
            state.best_state = model.state_dict()
        plateau_scheduler(state, val_loss, cfg.scheduler_factor,
                          cfg.scheduler_patience, cfg.min_lr)
        state.epoch = epoch + 1
        row = (epoch, train_loss, val_loss, state.lr, time.perf_counter() - t0)
        state.history.append(row)
        if log_fn is not None:
            log_fn(*row)
    return model, state, state.history


def best_model(model: VNetModel, state: TrainState) -> VNetModel:
    """Copy of the model holding the best-validation snapshot."""
    out = clone_model(model)
    if state.best_state is not None:
        out.load_state_dict(state.best_state)
    return out
