"""Engine benchmarks: single-core forward+backward latency and multi-worker
batch-parallel evaluation throughput.

Run as `python -m vpdenet.benchmark` with OMP/OPENBLAS thread variables
pinned by the caller; results are printed as JSON.
"""

from __future__ import annotations

import json
import os
import sys
import time
from multiprocessing import get_context

import numpy as np

from . import autodiff as ad
from .model import VNetConfig, build_model
from .train import TrainState, adamw_step, h1_loss

BENCH_CONFIG = VNetConfig(levels=1, blocks=22, dilations=2, width=0.8)
BATCH = 8
GRID = 64


def _bench_model(seed=0):
    model = build_model(BENCH_CONFIG, rng_seed=seed)
    rng = np.random.default_rng(seed)
    # nonzero mixing kernels so backward traverses realistic magnitudes
    for name, p in model.parameters():
        if name.endswith("mix/kernel"):
            p.values[...] = (rng.standard_normal(p.values.shape) * 0.05).astype(np.float32)
    return model


def time_forward_backward(repeats: int = 5) -> float:
    """Seconds per forward+backward+optimizer step on one 8 x 64^2 batch."""
    model = _bench_model()
    model.set_mode("train")
    rng = np.random.default_rng(1)
    eta = ad.tensor(rng.random((BATCH, 1, GRID, GRID), dtype=np.float64).astype(np.float32))
    f = ad.tensor(rng.random((BATCH, 1, GRID, GRID), dtype=np.float64).astype(np.float32))
    target = rng.random((BATCH, 1, GRID, GRID)).astype(np.float32) + 0.5
    params = model.parameters()
    leaves = [p for _, p in params]
    state = TrainState()

    def step():
        u, _ = model.forward(eta, f)
        loss = h1_loss(u, target, 1.0 / (GRID - 1), "h1")
        grads = ad.backward(loss, leaves=leaves)
        adamw_step(state, grads, params, lr=1e-3, weight_decay=1e-4)

    step()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        times.append(time.perf_counter() - t0)
    return min(times)


_WORKER_MODEL = None


def _worker_init():
    global _WORKER_MODEL
    _WORKER_MODEL = _bench_model()
    _WORKER_MODEL.set_mode("eval")


def _worker_eval(seed: int) -> float:
    rng = np.random.default_rng(seed)
    eta = ad.tensor(rng.random((BATCH, 1, GRID, GRID), dtype=np.float64).astype(np.float32))
    f = ad.tensor(rng.random((BATCH, 1, GRID, GRID), dtype=np.float64).astype(np.float32))
    with ad.no_grad():
        u, _ = _WORKER_MODEL.forward(eta, f)
    return float(u.values.sum())


def time_parallel_eval(workers: int, tasks: int = 40) -> float:
    """Wall time to evaluate `tasks` batches across `workers` processes.

    The single-worker baseline runs inline (no pool overhead), so the
    reported speedup charges fork and initializer costs to the workers.
    """
    ctx = get_context("fork")
    t0 = time.perf_counter()
    if workers == 1:
        _worker_init()
        for s in range(tasks):
            _worker_eval(s)
    else:
        with ctx.Pool(workers, initializer=_worker_init) as pool:
            pool.map(_worker_eval, range(tasks), chunksize=max(1, tasks // (2 * workers)))
    return time.perf_counter() - t0


def main() -> int:
    mode = sys.argv[1] if len(sys.argv) > 1 else "all"
    out = {"cpu_count": os.cpu_count()}
    if mode in ("all", "step"):
        out["step_seconds"] = time_forward_backward()
    if mode in ("all", "scaling"):
        out["eval_1_worker"] = time_parallel_eval(1)
        out["eval_4_workers"] = time_parallel_eval(4)
        out["speedup_4_workers"] = out["eval_1_worker"] / out["eval_4_workers"]
    print(json.dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
